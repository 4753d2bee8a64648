//! Differentiable Gaussian splatting rasterizer.
//!
//! Primitives are projected to screen-space ellipses with the EWA
//! linearization, sorted by camera-frame depth (ties by index), and
//! alpha-composited front to back. The forward pass runs over 16x16 tiles;
//! [`render_reference`] is the naive per-pixel version over the full sorted
//! list and produces bit-identical output.
//!
//! Gradients treat the sort order and the culling decisions as constants.

use rayon::prelude::*;

use crate::camera::{CameraView, Mat3, Vec3, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scene::{
    covariance_from_matrix, normalize_quat, quat_to_matrix, quat_to_matrix_vjp, sh_basis, sh_basis_grad,
    sh_coeff_count, squash_opacity, GaussianPrimitive, GaussianScene, Quat,
};

pub const TILE_SIZE: usize = 16;
/// Added to the screen-space covariance diagonal (pixels squared).
pub const COV2D_DILATION: f64 = 0.3;
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
pub const MAX_WEIGHT: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Half of the squared Mahalanobis radius (3 sigma) beyond which a splat is ignored.
const MAX_POWER: f64 = 4.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` of the dilated screen covariance.
    pub cov2d: [f64; 3],
    /// `(a, b, c)` of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub source_index: usize,
    /// Axis-aligned 3 sigma half extent.
    pub radius: f64,
}

impl Splat2D {
    #[inline]
    fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        (0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy, dx, dy)
    }

    fn pixel_range(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.radius * (1.0 + 1e-9) + 1e-9;
        let x0 = (self.mean2d[0] - r - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d[0] + r - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (self.mean2d[1] - r - 0.5).ceil().max(0.0);
        let y1 = (self.mean2d[1] + r - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }
}

struct Projected {
    t: Vec3,
    cov3d: Mat3,
    m: nalgebra::Matrix2x3<f64>,
    raw_color: [f64; 3],
    splat: Splat2D,
}

fn project_full(g: &GaussianPrimitive, degree: usize, index: usize, cam: &CameraView) -> Option<Projected> {
    let pose = &cam.pose;
    let w = pose.rotation().transpose();
    let t = w * (g.mean - pose.center());
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let k = &cam.intrinsics;
    let mean2d = [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy];
    let r = quat_to_matrix(&normalize_quat(&g.rotation));
    let cov3d = covariance_from_matrix(&g.log_scale, &r);
    let iz = 1.0 / t.z;
    let j = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    );
    let m = j * w;
    let c2 = m * cov3d * m.transpose();
    let xx = c2[(0, 0)] + COV2D_DILATION;
    let xy = 0.5 * (c2[(0, 1)] + c2[(1, 0)]);
    let yy = c2[(1, 1)] + COV2D_DILATION;
    let det = xx * yy - xy * xy;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [yy / det, -xy / det, xx / det];
    let mid = 0.5 * (xx + yy);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    if mean2d[0] + radius < 0.0
        || mean2d[0] - radius > cam.width as f64
        || mean2d[1] + radius < 0.0
        || mean2d[1] - radius > cam.height as f64
    {
        return None;
    }
    let view = (g.mean - pose.center()).normalize();
    let basis = sh_basis(degree, &view);
    let mut raw_color = [0.0; 3];
    for (kk, b) in basis.iter().enumerate() {
        for (c, v) in raw_color.iter_mut().enumerate() {
            *v += g.sh[kk * 3 + c] * b;
        }
    }
    let color = raw_color.map(|v| (v + 0.5).clamp(0.0, 1.0));
    Some(Projected {
        t,
        cov3d,
        m,
        raw_color,
        splat: Splat2D {
            mean2d,
            cov2d: [xx, xy, yy],
            conic,
            depth: t.z,
            color,
            alpha: squash_opacity(g.opacity_logit),
            source_index: index,
            radius,
        },
    })
}

/// Projects one primitive; `None` when culled (behind the near plane or
/// with a 3 sigma footprint that misses the image).
pub fn project_gaussian(g: &GaussianPrimitive, sh_degree: usize, cam: &CameraView) -> Option<Splat2D> {
    project_full(g, sh_degree, 0, cam).map(|p| p.splat)
}

/// Visible splats sorted by `(depth, source_index)`.
pub fn project_scene(scene: &GaussianScene, cam: &CameraView) -> Vec<Splat2D> {
    let degree = scene.sh_degree();
    let mut splats: Vec<Splat2D> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, degree, i, cam).map(|p| p.splat))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    splats
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 - T` per pixel.
    pub alpha_map: Vec<f64>,
    pub contrib_count: Vec<u32>,
}

struct PixelResult {
    rgb: [f64; 3],
    transmittance: f64,
    count: u32,
}

#[inline]
fn shade_pixel<'a>(px: f64, py: f64, splats: impl Iterator<Item = &'a Splat2D>, bg: &[f64; 3]) -> PixelResult {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut count = 0;
    for s in splats {
        let (power, _, _) = s.power(px, py);
        if !(power <= MAX_POWER) {
            continue;
        }
        let w = (s.alpha * (-power).exp()).min(MAX_WEIGHT);
        if w < MIN_WEIGHT {
            continue;
        }
        let f = w * t;
        rgb[0] += s.color[0] * f;
        rgb[1] += s.color[1] * f;
        rgb[2] += s.color[2] * f;
        t *= 1.0 - w;
        count += 1;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for c in 0..3 {
        rgb[c] += bg[c] * t;
    }
    PixelResult {
        rgb,
        transmittance: t,
        count,
    }
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    /// Indices into the sorted splat list, per tile, in sorted order.
    lists: Vec<Vec<u32>>,
}

fn bin_tiles(splats: &[Splat2D], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = s.pixel_range(width, height) {
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    TileGrid { tiles_x, tiles_y, lists }
}

fn tile_bounds(tile: usize, grid: &TileGrid, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = tile % grid.tiles_x;
    let ty = tile / grid.tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
}

/// Renders `scene` from `cam` over `background`.
pub fn render(scene: &GaussianScene, cam: &CameraView, background: [f64; 3]) -> RenderOutput {
    let splats = project_scene(scene, cam);
    let (width, height) = (cam.width, cam.height);
    let grid = bin_tiles(&splats, width, height);
    let tiles: Vec<Vec<PixelResult>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(tile, &grid, width, height);
            let list = &grid.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let it = list.iter().map(|&i| &splats[i as usize]);
                    out.push(shade_pixel(x as f64 + 0.5, y as f64 + 0.5, it, &background));
                }
            }
            out
        })
        .collect();
    let mut image = Image::new(width, height);
    let mut alpha_map = vec![0.0; width * height];
    let mut contrib_count = vec![0; width * height];
    for (tile, results) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(tile, &grid, width, height);
        let mut it = results.into_iter();
        for y in y0..y1 {
            for x in x0..x1 {
                let r = it.next().expect("tile result count");
                let p = y * width + x;
                image.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&r.rgb);
                alpha_map[p] = 1.0 - r.transmittance;
                contrib_count[p] = r.count;
            }
        }
    }
    RenderOutput {
        image,
        alpha_map,
        contrib_count,
    }
}

/// Naive single-threaded renderer: every pixel walks the full sorted list.
pub fn render_reference(scene: &GaussianScene, cam: &CameraView, background: [f64; 3]) -> RenderOutput {
    let splats = project_scene(scene, cam);
    let (width, height) = (cam.width, cam.height);
    let mut image = Image::new(width, height);
    let mut alpha_map = vec![0.0; width * height];
    let mut contrib_count = vec![0; width * height];
    for y in 0..height {
        for x in 0..width {
            let r = shade_pixel(x as f64 + 0.5, y as f64 + 0.5, splats.iter(), &background);
            let p = y * width + x;
            image.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&r.rgb);
            alpha_map[p] = 1.0 - r.transmittance;
            contrib_count[p] = r.count;
        }
    }
    RenderOutput {
        image,
        alpha_map,
        contrib_count,
    }
}

/// Per-primitive parameter gradients, laid out like [`GaussianPrimitive`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGradient {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
}

impl PrimitiveGradient {
    pub fn zeros(sh_degree: usize) -> Self {
        PrimitiveGradient {
            mean: Vec3::zeros(),
            log_scale: Vec3::zeros(),
            rotation: [0.0; 4],
            sh: vec![0.0; 3 * sh_coeff_count(sh_degree)],
            opacity_logit: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.log_scale.iter()).all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }

    fn add_assign(&mut self, other: &PrimitiveGradient) {
        self.mean += other.mean;
        self.log_scale += other.log_scale;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
        self.opacity_logit += other.opacity_logit;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub primitives: Vec<PrimitiveGradient>,
}

impl SceneGradients {
    pub fn zeros(scene: &GaussianScene) -> Self {
        SceneGradients {
            primitives: vec![PrimitiveGradient::zeros(scene.sh_degree()); scene.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.primitives.iter().all(PrimitiveGradient::is_finite)
    }

    pub fn add_assign(&mut self, other: &SceneGradients) {
        for (a, b) in self.primitives.iter_mut().zip(&other.primitives) {
            a.add_assign(b);
        }
    }

    /// Flattened in the same order as [`scene_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.primitives {
            out.extend(g.mean.iter());
            out.extend(g.log_scale.iter());
            out.extend(g.rotation.iter());
            out.push(g.opacity_logit);
            out.extend(g.sh.iter());
        }
        out
    }
}

/// Flattened parameter vector: per primitive mean, log_scale, rotation, opacity_logit, sh.
pub fn scene_params(scene: &GaussianScene) -> Vec<f64> {
    let mut out = Vec::new();
    for p in &scene.primitives {
        out.extend(p.mean.iter());
        out.extend(p.log_scale.iter());
        out.extend(p.rotation.iter());
        out.push(p.opacity_logit);
        out.extend(p.sh.iter());
    }
    out
}

/// Inverse of [`scene_params`]. Quaternions are written raw (not renormalized).
pub fn set_scene_params(scene: &mut GaussianScene, params: &[f64]) {
    let mut it = params.iter().copied();
    let mut next = || it.next().expect("parameter vector too short");
    for p in &mut scene.primitives {
        p.mean = Vec3::new(next(), next(), next());
        p.log_scale = Vec3::new(next(), next(), next());
        p.rotation = [next(), next(), next(), next()];
        p.opacity_logit = next();
        for v in p.sh.iter_mut() {
            *v = next();
        }
    }
}

/// Screen-space gradient accumulators for one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    alpha: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.alpha += o.alpha;
    }
}

struct Contribution {
    local: usize,
    w: f64,
    t_before: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

fn backward_tile(
    splats: &[Splat2D],
    list: &[u32],
    bounds: (usize, usize, usize, usize),
    width: usize,
    upstream: &Image,
    bg: &[f64; 3],
) -> Vec<SplatGrad> {
    let (x0, x1, y0, y1) = bounds;
    let mut grads = vec![SplatGrad::default(); list.len()];
    let mut contribs: Vec<Contribution> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * width + x;
            let g = [upstream.data()[p * 3], upstream.data()[p * 3 + 1], upstream.data()[p * 3 + 2]];
            if g == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            for (local, &si) in list.iter().enumerate() {
                let s = &splats[si as usize];
                let (power, dx, dy) = s.power(px, py);
                if !(power <= MAX_POWER) {
                    continue;
                }
                let gauss = (-power).exp();
                let raw = s.alpha * gauss;
                let w = raw.min(MAX_WEIGHT);
                if w < MIN_WEIGHT {
                    continue;
                }
                contribs.push(Contribution {
                    local,
                    w,
                    t_before: t,
                    gauss,
                    clamped: raw > MAX_WEIGHT,
                    dx,
                    dy,
                });
                t *= 1.0 - w;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            // suffix = sum of everything composited behind the current splat
            let mut suffix = [bg[0] * t, bg[1] * t, bg[2] * t];
            for c in contribs.iter().rev() {
                let s = &splats[list[c.local] as usize];
                let acc = &mut grads[c.local];
                let f = c.w * c.t_before;
                let mut d_w = 0.0;
                for ch in 0..3 {
                    acc.color[ch] += g[ch] * f;
                    d_w += g[ch] * (s.color[ch] * c.t_before - suffix[ch] / (1.0 - c.w));
                    suffix[ch] += s.color[ch] * f;
                }
                if c.clamped {
                    continue;
                }
                acc.alpha += d_w * c.gauss;
                let d_power = -d_w * c.w;
                let [a, b, cc] = s.conic;
                acc.mean2d[0] += d_power * -(a * c.dx + b * c.dy);
                acc.mean2d[1] += d_power * -(b * c.dx + cc * c.dy);
                acc.conic[0] += d_power * 0.5 * c.dx * c.dx;
                acc.conic[1] += d_power * c.dx * c.dy;
                acc.conic[2] += d_power * 0.5 * c.dy * c.dy;
            }
        }
    }
    grads
}

fn backward_primitive(
    g: &GaussianPrimitive,
    degree: usize,
    cam: &CameraView,
    proj: &Projected,
    sg: &SplatGrad,
) -> PrimitiveGradient {
    let mut out = PrimitiveGradient::zeros(degree);
    let k = &cam.intrinsics;
    let s = &proj.splat;
    let t = proj.t;

    out.opacity_logit = sg.alpha * s.alpha * (1.0 - s.alpha);

    // Color through clip and SH.
    let dir = g.mean - cam.center();
    let dist = dir.norm();
    let view = dir / dist;
    let basis = sh_basis(degree, &view);
    let mut d_raw = [0.0; 3];
    for ch in 0..3 {
        let v = proj.raw_color[ch] + 0.5;
        if (0.0..=1.0).contains(&v) {
            d_raw[ch] = sg.color[ch];
        }
    }
    for (kk, b) in basis.iter().enumerate() {
        for ch in 0..3 {
            out.sh[kk * 3 + ch] = d_raw[ch] * b;
        }
    }
    let mut d_view = Vec3::zeros();
    if degree > 0 {
        for (kk, db) in sh_basis_grad(degree, &view).iter().enumerate() {
            let coeff: f64 = (0..3).map(|ch| d_raw[ch] * g.sh[kk * 3 + ch]).sum();
            d_view += db * coeff;
        }
    }
    let mut d_mean = (d_view - view * view.dot(&d_view)) / dist;

    // Conic -> dilated 2D covariance.
    let conic = nalgebra::Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_conic = nalgebra::Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(conic * g_conic * conic);

    // cov2 = M cov3 M^T with M = J W.
    let m = &proj.m;
    let w = cam.pose.rotation().transpose();
    let g_cov3 = m.transpose() * g_cov2 * m;
    let g_m = 2.0 * g_cov2 * m * proj.cov3d;
    let g_j = g_m * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vec3::zeros();
    d_t.x += g_j[(0, 2)] * (-k.fx * iz2);
    d_t.y += g_j[(1, 2)] * (-k.fy * iz2);
    d_t.z += g_j[(0, 0)] * (-k.fx * iz2)
        + g_j[(0, 2)] * (2.0 * k.fx * t.x * iz3)
        + g_j[(1, 1)] * (-k.fy * iz2)
        + g_j[(1, 2)] * (2.0 * k.fy * t.y * iz3);
    // Mean through the projected center.
    d_t.x += sg.mean2d[0] * k.fx * iz;
    d_t.y += sg.mean2d[1] * k.fy * iz;
    d_t.z += sg.mean2d[0] * (-k.fx * t.x * iz2) + sg.mean2d[1] * (-k.fy * t.y * iz2);
    d_mean += cam.pose.rotation() * d_t;
    out.mean = d_mean;

    // cov3 = R D R^T.
    let r = quat_to_matrix(&normalize_quat(&g.rotation));
    let var = [
        (2.0 * g.log_scale.x).exp(),
        (2.0 * g.log_scale.y).exp(),
        (2.0 * g.log_scale.z).exp(),
    ];
    let g_sym = 0.5 * (g_cov3 + g_cov3.transpose());
    let rgr = r.transpose() * g_sym * r;
    out.log_scale = Vec3::new(2.0 * var[0] * rgr[(0, 0)], 2.0 * var[1] * rgr[(1, 1)], 2.0 * var[2] * rgr[(2, 2)]);
    let d = Mat3::from_diagonal(&Vec3::new(var[0], var[1], var[2]));
    let g_r = 2.0 * g_sym * r * d;
    out.rotation = quat_to_matrix_vjp(&g.rotation, &g_r);
    out
}

/// Analytic gradients of `sum(upstream * render(scene).image)` with respect
/// to every primitive parameter.
pub fn render_backward(
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
    upstream: &Image,
) -> Result<SceneGradients> {
    if upstream.width() != cam.width || upstream.height() != cam.height {
        return Err(Error::DimensionMismatch(format!(
            "upstream {}x{} vs camera {}x{}",
            upstream.width(),
            upstream.height(),
            cam.width,
            cam.height
        )));
    }
    let degree = scene.sh_degree();
    let mut projected: Vec<Projected> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, degree, i, cam))
        .collect();
    projected.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.splat.source_index.cmp(&b.splat.source_index))
    });
    let splats: Vec<Splat2D> = projected.iter().map(|p| p.splat.clone()).collect();
    let (width, height) = (cam.width, cam.height);
    let grid = bin_tiles(&splats, width, height);
    let tile_grads: Vec<Vec<SplatGrad>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let bounds = tile_bounds(tile, &grid, width, height);
            backward_tile(&splats, &grid.lists[tile], bounds, width, upstream, &background)
        })
        .collect();
    // Merge in tile order so the sum is independent of scheduling.
    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (local, g) in grads.iter().enumerate() {
            splat_grads[grid.lists[tile][local] as usize].add(g);
        }
    }
    let per_splat: Vec<(usize, PrimitiveGradient)> = projected
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(p, sg)| {
            let i = p.splat.source_index;
            (i, backward_primitive(&scene.primitives[i], degree, cam, p, sg))
        })
        .collect();
    let mut grads = SceneGradients::zeros(scene);
    for (i, g) in per_splat {
        grads.primitives[i] = g;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::scene::{dc_from_color, IDENTITY_QUAT};

    fn cam(w: usize, h: usize, f: f64) -> CameraView {
        CameraView::new(
            Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0).unwrap(),
            Pose::identity(),
            w,
            h,
        )
        .unwrap()
    }

    fn prim(mean: [f64; 3], sigma: f64, color: [f64; 3], logit: f64) -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vec3::from(mean),
            Vec3::repeat(sigma.ln()),
            IDENTITY_QUAT,
            color.iter().map(|&c| dc_from_color(c)).collect(),
            logit,
        )
        .unwrap()
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let c = cam(64, 64, 50.0);
        let g = prim([0.0, 0.0, 4.0], 0.1, [0.5; 3], 0.0);
        let s = project_gaussian(&g, 0, &c).unwrap();
        let expect = (50.0 * 0.1 / 4.0f64).powi(2) + 0.3;
        assert!((s.cov2d[0] - expect).abs() < 1e-12);
        assert!((s.cov2d[2] - expect).abs() < 1e-12);
        assert!(s.cov2d[1].abs() < 1e-15);
    }

    #[test]
    fn off_axis_covariance_matches_numeric_jacobian() {
        let mut c = cam(64, 48, 60.0);
        c.pose = Pose::look_at(Vec3::new(0.3, -0.2, -2.0), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)).unwrap();
        let g = GaussianPrimitive::new(
            Vec3::new(0.4, 0.2, 0.3),
            Vec3::new(-2.0, -2.5, -1.8),
            [0.8, 0.3, -0.2, 0.4],
            vec![0.0; 3],
            0.0,
        )
        .unwrap();
        let s = project_gaussian(&g, 0, &c).unwrap();
        // Jacobian of the pixel projection by central differences.
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let p = c.project(&(g.mean + e)).pixel;
            let m = c.project(&(g.mean - e)).pixel;
            jac[(0, a)] = (p[0] - m[0]) / (2.0 * h);
            jac[(1, a)] = (p[1] - m[1]) / (2.0 * h);
        }
        let cov = jac * g.covariance().unwrap() * jac.transpose();
        assert!((cov[(0, 0)] + 0.3 - s.cov2d[0]).abs() < 1e-6);
        assert!((cov[(0, 1)] - s.cov2d[1]).abs() < 1e-6);
        assert!((cov[(1, 1)] + 0.3 - s.cov2d[2]).abs() < 1e-6);
    }

    #[test]
    fn culling() {
        let c = cam(32, 32, 30.0);
        assert!(project_gaussian(&prim([0.0, 0.0, -1.0], 0.1, [0.5; 3], 0.0), 0, &c).is_none());
        assert!(project_gaussian(&prim([0.0, 0.0, 0.00005], 0.1, [0.5; 3], 0.0), 0, &c).is_none());
        // 1000 px to the right of the image at depth 1.
        let far = prim([1000.0 / 30.0, 0.0, 1.0], 1e-4, [0.5; 3], 0.0);
        assert!(project_gaussian(&far, 0, &c).is_none());
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cam(20, 10, 20.0);
        let out = render(&GaussianScene::new(0).unwrap(), &c, [0.1, 0.2, 0.3]);
        assert!(out.image.data().chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
        assert!(out.alpha_map.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn opaque_white_gaussian_covers_pixel() {
        let c = cam(16, 16, 16.0);
        // centered on pixel (8, 8) whose center is (8.5, 8.5)
        let mut g = prim([0.0, 0.0, 2.0], 0.5, [1.0; 3], 12.0);
        g.mean = c.back_project([8.5, 8.5], 2.0).unwrap();
        let scene = GaussianScene::with_primitives(0, vec![g]).unwrap();
        let out = render(&scene, &c, [0.0; 3]);
        // direct evaluation: power 0 -> w = min(sigmoid(12), 0.999)
        let w = squash_opacity(12.0).min(MAX_WEIGHT);
        assert!((out.image.get(8, 8, 0) - w).abs() < 1e-12);
        assert!(out.image.get(8, 8, 0) >= 0.99);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cam(16, 16, 16.0);
        let scene = GaussianScene::with_primitives(0, vec![prim([0.0, 0.0, 2.0], 0.3, [0.7; 3], 0.5)]).unwrap();
        let g = render_backward(&scene, &c, [0.0; 3], &Image::new(16, 16)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(render_backward(&scene, &c, [0.0; 3], &Image::new(8, 16)).is_err());
    }

    #[test]
    fn params_round_trip() {
        let scene = GaussianScene::with_primitives(
            0,
            vec![prim([0.1, 0.2, 2.0], 0.3, [0.7, 0.1, 0.2], 0.5), prim([0.0, 0.0, 3.0], 0.2, [0.2; 3], -1.0)],
        )
        .unwrap();
        let p = scene_params(&scene);
        assert_eq!(p.len(), 2 * GaussianPrimitive::param_count(0));
        let mut other = scene.clone();
        set_scene_params(&mut other, &p);
        assert_eq!(other, scene);
    }
}
