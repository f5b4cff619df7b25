use glitr::data::{
    build_dataset, clip_seed, generate_clip, load_manifest, write_dataset, ClipSpec, Split, Variant, GENERATOR_VERSION,
    SPEED, SPRITE,
};
use glitr::glimpse::{GlimpseGeometry, GlimpseLocation};
use glitr::GlitrError;
use proptest::prelude::*;
use std::collections::HashSet;

fn spec(variant: Variant) -> ClipSpec {
    ClipSpec {
        geometry: GlimpseGeometry::default(),
        frames: 8,
        num_classes: 8,
        variant,
    }
}

#[test]
fn splits_are_balanced_and_seeds_disjoint() {
    let (train, val) = build_dataset(800, 200, &spec(Variant::Centered), 7).unwrap();
    let mut counts = [0usize; 8];
    for e in &train.entries {
        counts[e.label] += 1;
    }
    assert!(counts.iter().all(|&c| c == 100));
    let a: HashSet<u64> = train.entries.iter().map(|e| e.seed).collect();
    let b: HashSet<u64> = val.entries.iter().map(|e| e.seed).collect();
    assert_eq!(a.len(), 800);
    assert_eq!(b.len(), 200);
    assert!(a.is_disjoint(&b));
    assert_eq!(clip_seed(7, Split::Val, 0), val.entries[0].seed);
    let (other, _) = build_dataset(800, 200, &spec(Variant::Centered), 8).unwrap();
    assert!(other.entries.iter().all(|e| !a.contains(&e.seed)));
}

#[test]
fn manifest_round_trip_regenerates_identical_clips() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = write_dataset(dir.path(), 16, 8, &spec(Variant::Centered), 3).unwrap();
    let loaded = load_manifest(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(loaded, train);
    assert_eq!(loaded.version, GENERATOR_VERSION);
    let a: Vec<u64> = train.clips().unwrap().iter().map(|c| c.checksum()).collect();
    let b: Vec<u64> = loaded.clips().unwrap().iter().map(|c| c.checksum()).collect();
    assert_eq!(a, b);
}

#[test]
fn missing_manifest_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_manifest(&dir.path().join("nope.jsonl")), Err(GlitrError::NotFound(_))));
}

#[test]
fn tampered_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 8, 8, &spec(Variant::Centered), 3).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();

    let dropped: Vec<&str> = text.lines().take(5).collect();
    std::fs::write(&path, dropped.join("\n")).unwrap();
    assert!(matches!(load_manifest(&path), Err(GlitrError::Manifest { .. })));

    std::fs::write(&path, text.replace(GENERATOR_VERSION, "sprites-v0")).unwrap();
    assert!(matches!(load_manifest(&path), Err(GlitrError::VersionMismatch { .. })));

    std::fs::write(&path, text.replacen("\"label\":1", "\"label\":9", 1)).unwrap();
    assert!(load_manifest(&path).is_err());

    std::fs::write(&path, "").unwrap();
    assert!(load_manifest(&path).is_err());
}

#[test]
fn writing_over_another_generator_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = write_dataset(dir.path(), 8, 8, &spec(Variant::Centered), 3).unwrap();
    let path = dir.path().join("train.jsonl");
    let mut old = train.clone();
    old.version = "sprites-v0".into();
    assert!(matches!(old.write(&path), Err(GlitrError::VersionMismatch { .. })));
    train.write(&path).unwrap();
}

#[test]
fn frames_are_valid_pixels() {
    let clip = generate_clip(11, 3, &spec(Variant::Centered)).unwrap();
    assert_eq!(clip.frames.shape(), &[8, 1, 64, 64]);
    assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(clip.label, 3);
}

fn pixel(loc: GlimpseLocation, geom: &GlimpseGeometry) -> (f64, f64) {
    geom.centroid(loc)
}

#[test]
fn target_moves_in_the_label_direction() {
    let geom = GlimpseGeometry::default();
    let dirs: [(f64, f64); 4] = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)];
    for label in 0..8 {
        for seed in 0..10 {
            let clip = generate_clip(seed, label, &spec(Variant::Centered)).unwrap();
            let (dy, dx) = dirs[label % 4];
            let mut straight = 0;
            for w in clip.sprite_track.windows(2) {
                let (a, b) = (pixel(w[0], &geom), pixel(w[1], &geom));
                let step = ((b.0 - a.0), (b.1 - a.1));
                if (step.0 - dy * SPEED as f64).abs() < 1e-6 && (step.1 - dx * SPEED as f64).abs() < 1e-6 {
                    straight += 1;
                }
            }
            assert!(straight >= 4, "label {label} seed {seed}: {straight} straight steps");
        }
    }
}

#[test]
fn target_is_inside_a_glimpse_centered_on_its_track() {
    let geom = GlimpseGeometry::default();
    let half_g = (geom.glimpse_g as f64 - 1.0) / 2.0;
    let half_s = (SPRITE as f64 - 1.0) / 2.0;
    for variant in [Variant::Centered, Variant::Bottomleft] {
        for seed in 0..20 {
            let clip = generate_clip(seed, (seed % 8) as usize, &spec(variant)).unwrap();
            for (t, &loc) in clip.sprite_track.iter().enumerate() {
                let (cy, cx) = geom.centroid(loc);
                assert!(half_s <= half_g);
                assert!(cy - half_s >= 0.0 && cy + half_s <= 63.0 && cx - half_s >= 0.0 && cx + half_s <= 63.0);
                // a sprite pixel is pure black or white before noise
                let top = (cy - half_s).round() as usize;
                let left = (cx - half_s).round() as usize;
                let v = clip.frames.data()[(t * 64 + top) * 64 + left];
                assert!((v - 0.5).abs() > 0.15, "corner pixel {v} looks like background");
            }
        }
    }
}

#[test]
fn centered_variant_stays_near_the_middle_and_bottomleft_does_not() {
    let mut centered = 0.0;
    let mut corner = 0.0;
    for seed in 0..50 {
        let a = generate_clip(seed, 0, &spec(Variant::Centered)).unwrap();
        let b = generate_clip(seed, 0, &spec(Variant::Bottomleft)).unwrap();
        centered += a.sprite_track[0].y.hypot(a.sprite_track[0].x);
        corner += b.sprite_track[0].y - b.sprite_track[0].x;
    }
    assert!(centered / 50.0 < 0.5);
    assert!(corner / 50.0 > 0.6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clips_are_pure_functions_of_seed_and_label(seed in any::<u64>(), label in 0usize..8) {
        let s = spec(Variant::Centered);
        let a = generate_clip(seed, label, &s).unwrap();
        let b = generate_clip(seed, label, &s).unwrap();
        prop_assert_eq!(a.checksum(), b.checksum());
        prop_assert_eq!(&a, &b);
        let c = generate_clip(seed.wrapping_add(1), label, &s).unwrap();
        prop_assert_ne!(a.checksum(), c.checksum());
    }
}
