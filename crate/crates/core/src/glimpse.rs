//! Translation-only differentiable glimpse extraction and position
//! embeddings for patches at arbitrary continuous locations.
//!
//! Locations are normalized: `(-1,-1)` is the top-left pixel center and
//! `(1,1)` the bottom-right one. A glimpse is the `g x g` lattice of unit
//! spacing centered there, sampled bilinearly with zero padding.

use std::cell::RefCell;

use glitr_substrate::{Function, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GlitrError, Result};

/// Base of the geometric frequency ladder of the sinusoidal embedding.
pub const SINUSOID_BASE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlimpseLocation {
    pub y: f64,
    pub x: f64,
}

impl GlimpseLocation {
    pub const CENTER: GlimpseLocation = GlimpseLocation { y: 0.0, x: 0.0 };

    pub fn new(y: f64, x: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && (-1.0..=1.0).contains(&v);
        if !ok(y) || !ok(x) {
            return Err(GlitrError::Geometry(format!("location ({y}, {x}) outside [-1,1]^2")));
        }
        Ok(Self { y, x })
    }

    pub fn to_tensor<R: Real>(self) -> Tensor<R> {
        Tensor::from_vec(vec![R::lit(self.y), R::lit(self.x)])
    }

    pub fn from_values<R: Real>(v: &[R]) -> Self {
        Self {
            y: v[0].to_f64_lossy(),
            x: v[1].to_f64_lossy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlimpseGeometry {
    pub frame_h: usize,
    pub frame_w: usize,
    pub glimpse_g: usize,
    pub patch_p: usize,
    pub channels: usize,
}

impl Default for GlimpseGeometry {
    fn default() -> Self {
        Self {
            frame_h: 64,
            frame_w: 64,
            glimpse_g: 24,
            patch_p: 8,
            channels: 1,
        }
    }
}

impl GlimpseGeometry {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlitrError::Geometry(m));
        if self.frame_h < 2 || self.frame_w < 2 || self.channels == 0 || self.patch_p == 0 || self.glimpse_g == 0 {
            return fail(format!("degenerate geometry {self:?}"));
        }
        if self.glimpse_g > self.frame_h.min(self.frame_w) {
            return fail(format!("glimpse {} larger than frame {}x{}", self.glimpse_g, self.frame_h, self.frame_w));
        }
        if self.glimpse_g % self.patch_p != 0 {
            return fail(format!("patch {} does not divide glimpse {}", self.patch_p, self.glimpse_g));
        }
        // full frames are patchified for the teacher
        if self.frame_h % self.patch_p != 0 || self.frame_w % self.patch_p != 0 {
            return fail(format!(
                "patch {} does not divide frame {}x{}",
                self.patch_p, self.frame_h, self.frame_w
            ));
        }
        Ok(())
    }

    pub fn glimpse_patches(&self) -> usize {
        let s = self.glimpse_g / self.patch_p;
        s * s
    }

    pub fn frame_patches(&self) -> usize {
        (self.frame_h / self.patch_p) * (self.frame_w / self.patch_p)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_p * self.patch_p * self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.frame_h * self.frame_w
    }

    /// Pixel position of the grid centroid for a normalized center.
    pub fn centroid(&self, loc: GlimpseLocation) -> (f64, f64) {
        (
            (loc.y + 1.0) / 2.0 * (self.frame_h - 1) as f64,
            (loc.x + 1.0) / 2.0 * (self.frame_w - 1) as f64,
        )
    }

    /// Normalized location whose grid centroid is pixel `(py, px)`.
    pub fn normalize(&self, py: f64, px: f64) -> GlimpseLocation {
        GlimpseLocation {
            y: 2.0 * py / (self.frame_h - 1) as f64 - 1.0,
            x: 2.0 * px / (self.frame_w - 1) as f64 - 1.0,
        }
    }

    /// Normalized center placing the glimpse flush against the bottom-left corner.
    pub fn bottom_left(&self) -> GlimpseLocation {
        GlimpseLocation {
            y: 1.0 - self.glimpse_g as f64 / self.frame_h as f64,
            x: -(1.0 - self.glimpse_g as f64 / self.frame_w as f64),
        }
    }
}

/// `[g, g, 2]` source pixel coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<R> {
    pub coords: Tensor<R>,
}

fn grid_values<R: Real>(cy: R, cx: R, g: usize) -> Tensor<R> {
    let half = R::lit((g as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(g * g * 2);
    for i in 0..g {
        for j in 0..g {
            data.push(cy - half + R::lit(i as f64));
            data.push(cx - half + R::lit(j as f64));
        }
    }
    Tensor::new(vec![g, g, 2], data).expect("grid length")
}

fn centroid_scale<R: Real>(geom: &GlimpseGeometry) -> (R, R) {
    (
        R::lit((geom.frame_h - 1) as f64 / 2.0),
        R::lit((geom.frame_w - 1) as f64 / 2.0),
    )
}

pub fn make_sampling_grid<R: Real>(center: GlimpseLocation, geom: &GlimpseGeometry) -> SamplingGrid<R> {
    let (sy, sx) = centroid_scale::<R>(geom);
    let cy = (R::lit(center.y) + R::one()) * sy;
    let cx = (R::lit(center.x) + R::one()) * sx;
    SamplingGrid {
        coords: grid_values(cy, cx, geom.glimpse_g),
    }
}

struct GridFn<R> {
    sy: R,
    sx: R,
}

impl<R: Real> Function<R> for GridFn<R> {
    fn name(&self) -> &'static str {
        "sampling_grid"
    }

    fn backward(&self, grad: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, wanted: &[bool]) -> Vec<Option<Tensor<R>>> {
        if !wanted[0] {
            return vec![None];
        }
        let (mut gy, mut gx) = (R::zero(), R::zero());
        for pair in grad.data().chunks_exact(2) {
            gy += pair[0];
            gx += pair[1];
        }
        vec![Some(Tensor::from_vec(vec![gy * self.sy, gx * self.sx]))]
    }
}

/// Sampling grid as a differentiable function of a `[2]` center variable.
pub fn grid_op<R: Real>(tape: &mut Tape<R>, center: Var, geom: &GlimpseGeometry) -> Var {
    let c = tape.value(center);
    assert_eq!(c.shape(), &[2], "grid_op: center must have shape [2]");
    let (sy, sx) = centroid_scale::<R>(geom);
    let cy = (c.data()[0] + R::one()) * sy;
    let cx = (c.data()[1] + R::one()) * sx;
    let out = grid_values(cy, cx, geom.glimpse_g);
    tape.custom(&[center], out, Box::new(GridFn { sy, sx }))
}

/// Read access to one `C x H x W` frame.
pub trait PixelSource<R> {
    /// `(channels, height, width)`.
    fn dims(&self) -> (usize, usize, usize);
    /// In-bounds pixel value.
    fn pixel(&self, c: usize, y: usize, x: usize) -> R;
}

#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a, R> {
    data: &'a [R],
    channels: usize,
    height: usize,
    width: usize,
}

impl<'a, R: Real> FrameView<'a, R> {
    pub fn new(data: &'a [R], channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(GlitrError::Geometry(format!(
                "frame of {} values is not {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
        })
    }

    /// Frame `t` of a `[T, C, H, W]` tensor.
    pub fn of_clip(frames: &'a Tensor<R>, t: usize) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || t >= s[0] {
            return Err(GlitrError::Geometry(format!("frame {t} of tensor shaped {s:?}")));
        }
        let n = s[1] * s[2] * s[3];
        Self::new(&frames.data()[t * n..(t + 1) * n], s[1], s[2], s[3])
    }

    pub fn data(&self) -> &'a [R] {
        self.data
    }
}

impl<R: Real> PixelSource<R> for FrameView<'_, R> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> R {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Frame wrapper recording which pixel positions were read.
pub struct AuditedFrame<'a, R> {
    inner: FrameView<'a, R>,
    touched: RefCell<Vec<bool>>,
}

impl<'a, R: Real> AuditedFrame<'a, R> {
    pub fn new(inner: FrameView<'a, R>) -> Self {
        let n = inner.height * inner.width;
        Self {
            inner,
            touched: RefCell::new(vec![false; n]),
        }
    }

    /// Number of distinct `(y, x)` positions read so far.
    pub fn touched_count(&self) -> usize {
        self.touched.borrow().iter().filter(|&&b| b).count()
    }

    /// Row-major `H x W` mask of read positions.
    pub fn touched_mask(&self) -> Vec<bool> {
        self.touched.borrow().clone()
    }
}

impl<R: Real> PixelSource<R> for AuditedFrame<'_, R> {
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> R {
        self.touched.borrow_mut()[y * self.inner.width + x] = true;
        self.inner.pixel(c, y, x)
    }
}

#[derive(Clone, Copy)]
struct Cell<R> {
    y0: i64,
    x0: i64,
    fy: R,
    fx: R,
}

struct Sampled<R> {
    out: Vec<R>,
    cells: Vec<Cell<R>>,
    /// `[C, g*g]` values of the taps (00, 01, 10, 11).
    taps: Vec<[R; 4]>,
}

/// Bilinear interpolation at each grid point. Taps with zero weight are
/// read only when `all_taps` is set (needed for the coordinate derivative).
fn sample_core<R: Real>(src: &dyn PixelSource<R>, coords: &[R], all_taps: bool) -> Sampled<R> {
    let (c, h, w) = src.dims();
    let n = coords.len() / 2;
    let mut cells = Vec::with_capacity(n);
    for pair in coords.chunks_exact(2) {
        let (yy, xx) = (pair[0], pair[1]);
        let (yf, xf) = (yy.floor(), xx.floor());
        cells.push(Cell {
            y0: yf.to_f64_lossy() as i64,
            x0: xf.to_f64_lossy() as i64,
            fy: yy - yf,
            fx: xx - xf,
        });
    }
    let read = |ch: usize, y: i64, x: i64, weight: R| -> R {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            return R::zero();
        }
        if weight == R::zero() && !all_taps {
            return R::zero();
        }
        src.pixel(ch, y as usize, x as usize)
    };
    let mut out = Vec::with_capacity(c * n);
    let mut taps = Vec::with_capacity(c * n);
    let one = R::one();
    for ch in 0..c {
        for cell in &cells {
            let (fy, fx) = (cell.fy, cell.fx);
            let w = [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx];
            let v = [
                read(ch, cell.y0, cell.x0, w[0]),
                read(ch, cell.y0, cell.x0 + 1, w[1]),
                read(ch, cell.y0 + 1, cell.x0, w[2]),
                read(ch, cell.y0 + 1, cell.x0 + 1, w[3]),
            ];
            out.push(w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]);
            taps.push(v);
        }
    }
    Sampled { out, cells, taps }
}

/// Plain bilinear sampling of a `[C, H, W]` source.
pub fn bilinear_sample<R: Real>(src: &dyn PixelSource<R>, grid: &SamplingGrid<R>) -> Tensor<R> {
    let g = grid.coords.shape()[0];
    let (c, _, _) = src.dims();
    let s = sample_core(src, grid.coords.data(), false);
    Tensor::new(vec![c, g, g], s.out).expect("sample length")
}

struct BilinearFn<R> {
    cells: Vec<Cell<R>>,
    taps: Vec<[R; 4]>,
    channels: usize,
    height: usize,
    width: usize,
    frame_input: bool,
}

impl<R: Real> BilinearFn<R> {
    fn grid_grad(&self, grad: &[R]) -> Tensor<R> {
        let n = self.cells.len();
        let mut out = vec![R::zero(); n * 2];
        let one = R::one();
        for ch in 0..self.channels {
            for (k, cell) in self.cells.iter().enumerate() {
                let gk = grad[ch * n + k];
                let v = self.taps[ch * n + k];
                let dy = (one - cell.fx) * (v[2] - v[0]) + cell.fx * (v[3] - v[1]);
                let dx = (one - cell.fy) * (v[1] - v[0]) + cell.fy * (v[3] - v[2]);
                out[2 * k] += gk * dy;
                out[2 * k + 1] += gk * dx;
            }
        }
        let g = (n as f64).sqrt().round() as usize;
        Tensor::new(vec![g, g, 2], out).expect("grid grad")
    }

    fn frame_grad(&self, grad: &[R]) -> Tensor<R> {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut out = Tensor::zeros(&[self.channels, self.height, self.width]);
        let data = out.data_mut();
        let n = self.cells.len();
        let one = R::one();
        for ch in 0..self.channels {
            for (k, cell) in self.cells.iter().enumerate() {
                let gk = grad[ch * n + k];
                let (fy, fx) = (cell.fy, cell.fx);
                let taps = [
                    (cell.y0, cell.x0, (one - fy) * (one - fx)),
                    (cell.y0, cell.x0 + 1, (one - fy) * fx),
                    (cell.y0 + 1, cell.x0, fy * (one - fx)),
                    (cell.y0 + 1, cell.x0 + 1, fy * fx),
                ];
                for (y, x, wt) in taps {
                    if y >= 0 && x >= 0 && y < h && x < w {
                        data[(ch * self.height + y as usize) * self.width + x as usize] += gk * wt;
                    }
                }
            }
        }
        out
    }
}

impl<R: Real> Function<R> for BilinearFn<R> {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, grad: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, wanted: &[bool]) -> Vec<Option<Tensor<R>>> {
        let g = grad.data();
        if self.frame_input {
            vec![
                wanted[0].then(|| self.frame_grad(g)),
                wanted[1].then(|| self.grid_grad(g)),
            ]
        } else {
            vec![wanted[0].then(|| self.grid_grad(g))]
        }
    }
}

/// Where the sampler reads pixels from.
pub enum FrameSource<'a, R> {
    /// A `[C, H, W]` tape variable; gradients reach the frame.
    Var(Var),
    /// External pixels; only the sampler ever sees them.
    Pixels(&'a dyn PixelSource<R>),
}

/// Differentiable bilinear sampling producing a `[C, g, g]` glimpse.
pub fn sample_op<R: Real>(tape: &mut Tape<R>, source: FrameSource<'_, R>, grid: Var) -> Result<Var> {
    let gshape = tape.value(grid).shape().to_vec();
    if gshape.len() != 3 || gshape[0] != gshape[1] || gshape[2] != 2 {
        return Err(GlitrError::Geometry(format!("grid shaped {gshape:?}")));
    }
    let g = gshape[0];
    let all_taps = tape.requires_grad(grid);
    let coords = tape.shared_value(grid);
    let (sampled, dims, frame_input, inputs) = match source {
        FrameSource::Var(frame) => {
            let f = tape.shared_value(frame);
            let s = f.shape();
            if s.len() != 3 {
                return Err(GlitrError::Geometry(format!("frame shaped {s:?}")));
            }
            let view = FrameView::new(f.data(), s[0], s[1], s[2])?;
            let dims = view.dims();
            let all = all_taps || tape.requires_grad(frame);
            (sample_core(&view, coords.data(), all), dims, true, vec![frame, grid])
        }
        FrameSource::Pixels(src) => (sample_core(src, coords.data(), all_taps), src.dims(), false, vec![grid]),
    };
    let (c, h, w) = dims;
    let out = Tensor::new(vec![c, g, g], sampled.out).expect("sample length");
    Ok(tape.custom(
        &inputs,
        out,
        Box::new(BilinearFn {
            cells: sampled.cells,
            taps: sampled.taps,
            channels: c,
            height: h,
            width: w,
            frame_input,
        }),
    ))
}

/// Gather map from a `[G, C, h, w]` image stack to `[G * (h/p) * (w/p), C * p * p]`
/// patch rows, raster patch order, `(c, py, px)` within a patch.
fn patch_index(groups: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (ph, pw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(groups * c * h * w);
    for gi in 0..groups {
        for a in 0..ph {
            for b in 0..pw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(((gi * c + ch) * h + a * p + py) * w + b * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn image_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    let (g, c, h, w) = match *shape {
        [c, h, w] => (1, c, h, w),
        [g, c, h, w] => (g, c, h, w),
        _ => return Err(GlitrError::Geometry(format!("cannot patchify shape {shape:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(GlitrError::Geometry(format!("patch {p} does not tile {h}x{w}")));
    }
    Ok((g, c, h, w))
}

/// Patch rows of a `[C, H, W]` or `[G, C, H, W]` tensor.
pub fn patchify<R: Real>(x: &Tensor<R>, p: usize) -> Result<Tensor<R>> {
    let (g, c, h, w) = image_dims(x.shape(), p)?;
    let idx = patch_index(g, c, h, w, p);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::new(vec![g * (h / p) * (w / p), c * p * p], data)?)
}

struct GatherFn {
    idx: Vec<usize>,
    in_shape: Vec<usize>,
}

impl<R: Real> Function<R> for GatherFn {
    fn name(&self) -> &'static str {
        "patchify"
    }

    fn backward(&self, grad: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, wanted: &[bool]) -> Vec<Option<Tensor<R>>> {
        if !wanted[0] {
            return vec![None];
        }
        let mut out = Tensor::zeros(&self.in_shape);
        let d = out.data_mut();
        for (k, &i) in self.idx.iter().enumerate() {
            d[i] += grad.data()[k];
        }
        vec![Some(out)]
    }
}

pub fn patchify_op<R: Real>(tape: &mut Tape<R>, x: Var, p: usize) -> Result<Var> {
    let xv = tape.value(x);
    let (g, c, h, w) = image_dims(xv.shape(), p)?;
    let idx = patch_index(g, c, h, w, p);
    let data = idx.iter().map(|&i| xv.data()[i]).collect();
    let out = Tensor::new(vec![g * (h / p) * (w / p), c * p * p], data)?;
    let in_shape = xv.shape().to_vec();
    Ok(tape.custom(&[x], out, Box::new(GatherFn { idx, in_shape })))
}

fn to_normalized<R: Real>(pix: R, extent: usize) -> R {
    R::lit(2.0) * pix / R::lit((extent - 1) as f64) - R::one()
}

/// Normalized `(y, x)` centers of the glimpse patches, raster order.
fn glimpse_patch_centers<R: Real>(coords: &[R], geom: &GlimpseGeometry) -> Vec<R> {
    let (g, p) = (geom.glimpse_g, geom.patch_p);
    let s = g / p;
    let off = R::lit((p as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(s * s * 2);
    for a in 0..s {
        for b in 0..s {
            let k = (a * p * g + b * p) * 2;
            out.push(to_normalized(coords[k] + off, geom.frame_h));
            out.push(to_normalized(coords[k + 1] + off, geom.frame_w));
        }
    }
    out
}

/// Normalized `(y, x)` centers of the full-frame patches, raster order.
pub fn frame_patch_centers<R: Real>(geom: &GlimpseGeometry) -> Vec<R> {
    let p = geom.patch_p;
    let off = R::lit((p as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(geom.frame_patches() * 2);
    for a in 0..geom.frame_h / p {
        for b in 0..geom.frame_w / p {
            out.push(to_normalized(R::lit((a * p) as f64) + off, geom.frame_h));
            out.push(to_normalized(R::lit((b * p) as f64) + off, geom.frame_w));
        }
    }
    out
}

struct PatchCentersFn<R> {
    g: usize,
    p: usize,
    ky: R,
    kx: R,
}

impl<R: Real> Function<R> for PatchCentersFn<R> {
    fn name(&self) -> &'static str {
        "patch_centers"
    }

    fn backward(&self, grad: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, wanted: &[bool]) -> Vec<Option<Tensor<R>>> {
        if !wanted[0] {
            return vec![None];
        }
        let (g, p) = (self.g, self.p);
        let s = g / p;
        let mut out = Tensor::zeros(&[g, g, 2]);
        let d = out.data_mut();
        for a in 0..s {
            for b in 0..s {
                let r = a * s + b;
                let k = (a * p * g + b * p) * 2;
                d[k] += grad.data()[2 * r] * self.ky;
                d[k + 1] += grad.data()[2 * r + 1] * self.kx;
            }
        }
        vec![Some(out)]
    }
}

/// `[N, 2]` normalized patch centers as a function of the sampling grid.
pub fn patch_centers_op<R: Real>(tape: &mut Tape<R>, grid: Var, geom: &GlimpseGeometry) -> Var {
    let centers = glimpse_patch_centers(tape.value(grid).data(), geom);
    let n = centers.len() / 2;
    let out = Tensor::new(vec![n, 2], centers).expect("centers");
    let f = PatchCentersFn {
        g: geom.glimpse_g,
        p: geom.patch_p,
        ky: R::lit(2.0 / (geom.frame_h - 1) as f64),
        kx: R::lit(2.0 / (geom.frame_w - 1) as f64),
    };
    tape.custom(&[grid], out, Box::new(f))
}

/// Per-axis scale from a normalized coordinate to patch units from the frame center.
fn axis_scales<R: Real>(geom: &GlimpseGeometry) -> (R, R) {
    let p = geom.patch_p as f64;
    (
        R::lit((geom.frame_h - 1) as f64 / (2.0 * p)),
        R::lit((geom.frame_w - 1) as f64 / (2.0 * p)),
    )
}

fn frequencies<R: Real>(bands: usize) -> Vec<R> {
    (0..bands)
        .map(|k| R::lit(SINUSOID_BASE.powf(-(k as f64) / bands as f64)))
        .collect()
}

/// Embedding of one normalized coordinate pair: `[sin y | cos y | sin x | cos x]`,
/// `d/4` bands each.
fn sinusoid_into<R: Real>(uy: R, ux: R, scales: (R, R), freqs: &[R], out: &mut Vec<R>) {
    let sy = uy * scales.0;
    let sx = ux * scales.1;
    for s in [sy, sx] {
        out.extend(freqs.iter().map(|&w| (s * w).sin()));
        out.extend(freqs.iter().map(|&w| (s * w).cos()));
    }
}

fn check_embed_dim(d: usize) -> Result<()> {
    if d == 0 || d % 4 != 0 {
        return Err(GlitrError::Geometry(format!("embedding dim {d} not divisible by 4")));
    }
    Ok(())
}

/// Sinusoidal embedding rows for `[N, 2]` normalized coordinates.
pub fn sinusoid_embedding<R: Real>(centers: &[R], geom: &GlimpseGeometry, d: usize) -> Result<Tensor<R>> {
    check_embed_dim(d)?;
    let freqs = frequencies::<R>(d / 4);
    let scales = axis_scales::<R>(geom);
    let n = centers.len() / 2;
    let mut out = Vec::with_capacity(n * d);
    for pair in centers.chunks_exact(2) {
        sinusoid_into(pair[0], pair[1], scales, &freqs, &mut out);
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

struct SinusoidFn<R> {
    freqs: Vec<R>,
    scales: (R, R),
}

impl<R: Real> Function<R> for SinusoidFn<R> {
    fn name(&self) -> &'static str {
        "sinusoid_embedding"
    }

    fn backward(&self, grad: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, wanted: &[bool]) -> Vec<Option<Tensor<R>>> {
        if !wanted[0] {
            return vec![None];
        }
        let nb = self.freqs.len();
        let d = 4 * nb;
        let centers = inputs[0].data();
        let mut out = Tensor::zeros(inputs[0].shape());
        let o = out.data_mut();
        for (r, pair) in centers.chunks_exact(2).enumerate() {
            let g = &grad.data()[r * d..(r + 1) * d];
            for axis in 0..2 {
                let scale = if axis == 0 { self.scales.0 } else { self.scales.1 };
                let s = pair[axis] * scale;
                let base = axis * 2 * nb;
                let mut acc = R::zero();
                for (k, &w) in self.freqs.iter().enumerate() {
                    let (sin, cos) = (s * w).sin_cos();
                    acc += g[base + k] * w * cos - g[base + nb + k] * w * sin;
                }
                o[2 * r + axis] = acc * scale;
            }
        }
        vec![Some(out)]
    }
}

/// Differentiable sinusoidal embedding of `[N, 2]` normalized coordinates.
pub fn sinusoid_op<R: Real>(tape: &mut Tape<R>, centers: Var, geom: &GlimpseGeometry, d: usize) -> Result<Var> {
    let out = sinusoid_embedding(tape.value(centers).data(), geom, d)?;
    let f = SinusoidFn {
        freqs: frequencies(d / 4),
        scales: axis_scales(geom),
    };
    Ok(tape.custom(&[centers], out, Box::new(f)))
}

/// `[(g/p)^2, d]` embeddings of the patches of a glimpse centered at `center`.
pub fn patch_position_embeddings<R: Real>(center: GlimpseLocation, geom: &GlimpseGeometry, d: usize) -> Result<Tensor<R>> {
    let grid = make_sampling_grid::<R>(center, geom);
    let centers = glimpse_patch_centers(grid.coords.data(), geom);
    sinusoid_embedding(&centers, geom, d)
}

/// `[(H/p)(W/p), d]` embeddings of the full-frame patches.
pub fn frame_position_embeddings<R: Real>(geom: &GlimpseGeometry, d: usize) -> Result<Tensor<R>> {
    sinusoid_embedding(&frame_patch_centers::<R>(geom), geom, d)
}

/// Tokens of one glimpse: `[N, p^2 C]` patches and `[N, d]` position embeddings,
/// both differentiable in `center`.
pub fn glimpse_tokens<R: Real>(
    tape: &mut Tape<R>,
    source: FrameSource<'_, R>,
    center: Var,
    geom: &GlimpseGeometry,
    d: usize,
) -> Result<(Var, Var)> {
    let grid = grid_op(tape, center, geom);
    let img = sample_op(tape, source, grid)?;
    let patches = patchify_op(tape, img, geom.patch_p)?;
    let centers = patch_centers_op(tape, grid, geom);
    let pos = sinusoid_op(tape, centers, geom, d)?;
    Ok((patches, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_at_center_of_small_frame() {
        let geom = GlimpseGeometry {
            frame_h: 4,
            frame_w: 4,
            glimpse_g: 2,
            patch_p: 1,
            channels: 1,
        };
        let grid = make_sampling_grid::<f64>(GlimpseLocation::CENTER, &geom);
        assert_eq!(grid.coords.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn corner_grid_hangs_off_the_frame() {
        let geom = GlimpseGeometry::default();
        let grid = make_sampling_grid::<f64>(GlimpseLocation::new(-1.0, -1.0).unwrap(), &geom);
        let rows_above = (0..24).filter(|&i| grid.coords.data()[i * 48] < 0.0).count();
        assert_eq!(grid.coords.data()[0], -11.5);
        assert_eq!(rows_above, 12);
    }

    #[test]
    fn bottom_left_abuts_corner() {
        let geom = GlimpseGeometry::default();
        let grid = make_sampling_grid::<f64>(geom.bottom_left(), &geom);
        let c = grid.coords.data();
        let last = c.len() - 2;
        assert!((c[0] - 40.0).abs() < 0.7 && c[1].abs() < 0.7);
        assert!((c[last] - 63.0).abs() < 0.7 && (c[last + 1] - 23.0).abs() < 0.7);
    }

    #[test]
    fn location_range_is_checked() {
        assert!(GlimpseLocation::new(1.0, -1.0).is_ok());
        assert!(GlimpseLocation::new(1.01, 0.0).is_err());
        assert!(GlimpseLocation::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(GlimpseGeometry::default().validate().is_ok());
        let bad = GlimpseGeometry {
            glimpse_g: 20,
            ..GlimpseGeometry::default()
        };
        assert!(bad.validate().is_err());
        let big = GlimpseGeometry {
            glimpse_g: 72,
            ..GlimpseGeometry::default()
        };
        assert!(big.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_weight_taps_are_not_read() {
        let geom = GlimpseGeometry {
            frame_h: 8,
            frame_w: 8,
            glimpse_g: 4,
            patch_p: 2,
            channels: 1,
        };
        let data = vec![0.5f32; 64];
        let view = FrameView::new(&data, 1, 8, 8).unwrap();
        let audited = AuditedFrame::new(view);
        let center = geom.normalize(3.5, 3.5);
        let _ = bilinear_sample(&audited, &make_sampling_grid(center, &geom));
        assert_eq!(audited.touched_count(), 16);
    }
}
