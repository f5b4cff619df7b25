fn main() {
    std::process::exit(glitr::cli::run(std::env::args_os()));
}
