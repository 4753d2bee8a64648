//! Two-view reconstruction: plane-sweep cost volume, depth selection,
//! Gaussian initialization by back-projection, and per-scene refinement of
//! the rendered-image objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, AdapterParams};
use crate::camera::{CameraView, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::imaging::{pixel_loss, psnr, ssim_loss, Image, PixelLossKind, SSIM_WINDOW};
use crate::render::{render, render_backward, SceneGradients};
use crate::scene::{
    dc_from_color, inverse_squash, normalize_quat, sh_coeff_count, GaussianPrimitive, GaussianScene, IDENTITY_QUAT,
};

/// Background color composited behind every render of a reconstruction.
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.3; 3];

/// Cost stored for plane hypotheses that reproject outside the source image.
pub const INVALID_COST: f64 = 1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaneSpacing {
    LinearDepth,
    InverseDepth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPlanes {
    values: Vec<f64>,
    spacing: PlaneSpacing,
}

impl DepthPlanes {
    pub fn new(near: f64, far: f64, count: usize, spacing: PlaneSpacing) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid(format!("need at least two depth planes, got {count}")));
        }
        if !(near > NEAR_PLANE && far > near && far.is_finite()) {
            return Err(Error::invalid(format!("invalid depth range ({near}, {far})")));
        }
        let last = (count - 1) as f64;
        let values = (0..count)
            .map(|i| {
                let t = i as f64 / last;
                match spacing {
                    PlaneSpacing::LinearDepth => near + t * (far - near),
                    PlaneSpacing::InverseDepth => 1.0 / (1.0 / near + t * (1.0 / far - 1.0 / near)),
                }
            })
            .collect();
        DepthPlanes::from_values(values, spacing)
    }

    pub fn from_values(values: Vec<f64>, spacing: PlaneSpacing) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("need at least two depth planes"));
        }
        if !values.windows(2).all(|w| w[1] > w[0]) || !(values[0] > NEAR_PLANE) {
            return Err(Error::invalid("depth planes must be strictly increasing and beyond the near plane"));
        }
        Ok(DepthPlanes { values, spacing })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> PlaneSpacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Index of the plane closest to `depth`.
    pub fn nearest(&self, depth: f64) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if (v - depth).abs() < (self.values[best] - depth).abs() {
                best = i;
            }
        }
        best
    }

    /// Larger of the two gaps adjacent to the plane nearest `depth`.
    pub fn local_spacing(&self, depth: f64) -> f64 {
        let i = self.nearest(depth);
        let lo = if i > 0 { self.values[i] - self.values[i - 1] } else { 0.0 };
        let hi = if i + 1 < self.values.len() {
            self.values[i + 1] - self.values[i]
        } else {
            0.0
        };
        lo.max(hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// Patch mean of squared differences.
    Ssd,
    /// `1 - NCC` over the RGB patch.
    Ncc,
}

#[derive(Clone, Debug)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    /// `cost[(y * width + x) * planes + d]`.
    pub cost: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    pub fn index(&self, x: usize, y: usize, d: usize) -> usize {
        (y * self.width + x) * self.planes + d
    }

    pub fn pixel_costs(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.cost[i..i + self.planes]
    }

    pub fn pixel_valid(&self, x: usize, y: usize) -> &[bool] {
        let i = self.index(x, y, 0);
        &self.valid[i..i + self.planes]
    }
}

fn patch_cost(a: &[f64], b: &[f64], kind: CostKind) -> f64 {
    match kind {
        CostKind::Ssd => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (a.len() / 3) as f64,
        CostKind::Ncc => {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                let (da, db) = (x - ma, y - mb);
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            let denom = (saa * sbb).sqrt();
            let ncc = if denom > 1e-12 { (sab / denom).clamp(-1.0, 1.0) } else { 0.0 };
            1.0 - ncc
        }
    }
}

/// Sweeps `planes` through `ref_cam`, warping `src` onto each hypothesis.
pub fn build_cost_volume(
    ref_img: &Image,
    src_img: &Image,
    ref_cam: &CameraView,
    src_cam: &CameraView,
    planes: &DepthPlanes,
    kind: CostKind,
    patch_radius: usize,
) -> Result<CostVolume> {
    if (ref_cam.center() - src_cam.center()).norm() < 1e-12 {
        return Err(Error::DegenerateGeometry("reference and source cameras share a center".into()));
    }
    if ref_img.width() != ref_cam.width || ref_img.height() != ref_cam.height {
        return Err(Error::DimensionMismatch("reference image does not match its camera".into()));
    }
    if src_img.width() != src_cam.width || src_img.height() != src_cam.height {
        return Err(Error::DimensionMismatch("source image does not match its camera".into()));
    }
    let (w, h) = (ref_img.width(), ref_img.height());
    let d = planes.len();
    let r = patch_radius as isize;
    let side = 2 * patch_radius + 1;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut cost = vec![INVALID_COST; w * d];
            let mut valid = vec![false; w * d];
            let mut ref_patch = Vec::with_capacity(side * side * 3);
            let mut src_patch = Vec::with_capacity(side * side * 3);
            for x in 0..w {
                ref_patch.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        ref_patch.extend_from_slice(&ref_img.pixel(sx, sy));
                    }
                }
                let u = CameraView::pixel_center(x, y);
                let (origin, ray) = ref_cam.ray_for_pixel(u);
                'plane: for (k, depth) in planes.values().iter().enumerate() {
                    let p = origin + ray * *depth;
                    let proj = src_cam.project(&p);
                    if !proj.visible {
                        continue;
                    }
                    src_patch.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            match src_img.sample_bilinear(proj.pixel[0] + dx as f64, proj.pixel[1] + dy as f64) {
                                Some(px) => src_patch.extend_from_slice(&px),
                                None => continue 'plane,
                            }
                        }
                    }
                    cost[x * d + k] = patch_cost(&ref_patch, &src_patch, kind);
                    valid[x * d + k] = true;
                }
            }
            (cost, valid)
        })
        .collect();
    let mut cost = Vec::with_capacity(w * h * d);
    let mut valid = Vec::with_capacity(w * h * d);
    for (c, v) in rows {
        cost.extend(c);
        valid.extend(v);
    }
    Ok(CostVolume {
        width: w,
        height: h,
        planes: d,
        cost,
        valid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DepthMode {
    Argmin,
    SoftArgmin { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.depth[i], self.confidence[i])
    }

    pub fn constant(width: usize, height: usize, depth: f64, confidence: f64) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![depth; width * height],
            confidence: vec![confidence; width * height],
        }
    }
}

fn select_depth(costs: &[f64], valid: &[bool], planes: &DepthPlanes, mode: DepthMode) -> (f64, f64) {
    let mid = 0.5 * (planes.min() + planes.max());
    if !valid.iter().any(|&v| v) {
        return (mid, 0.0);
    }
    match mode {
        DepthMode::Argmin => {
            let mut best: Option<usize> = None;
            for (i, (&c, &ok)) in costs.iter().zip(valid).enumerate() {
                if ok && best.is_none_or(|b| c < costs[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("at least one valid plane");
            // Runner-up outside the immediate neighbourhood of the winner.
            let second = costs
                .iter()
                .zip(valid)
                .enumerate()
                .filter(|(i, (_, &ok))| ok && i.abs_diff(b) > 1)
                .map(|(_, (&c, _))| c)
                .fold(f64::INFINITY, f64::min);
            let confidence = if second.is_finite() && second > 0.0 {
                ((second - costs[b]) / second).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (planes.values()[b], confidence)
        }
        DepthMode::SoftArgmin { temperature } => {
            let tau = temperature.max(1e-300);
            let min_cost = costs
                .iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(&c, _)| c)
                .fold(f64::INFINITY, f64::min);
            let mut wsum = 0.0;
            let mut dsum = 0.0;
            let mut wmax: f64 = 0.0;
            for ((&c, &ok), &d) in costs.iter().zip(valid).zip(planes.values()) {
                if !ok {
                    continue;
                }
                let wgt = (-(c - min_cost) / tau).exp();
                wsum += wgt;
                dsum += wgt * d;
                wmax = wmax.max(wgt);
            }
            ((dsum / wsum).clamp(planes.min(), planes.max()), (wmax / wsum).clamp(0.0, 1.0))
        }
    }
}

pub fn depth_from_cost_volume(cv: &CostVolume, planes: &DepthPlanes, mode: DepthMode) -> Result<DepthMap> {
    if cv.planes != planes.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost volume has {} planes, plane set has {}",
            cv.planes,
            planes.len()
        )));
    }
    let n = cv.width * cv.height;
    let (depth, confidence): (Vec<f64>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|p| {
            let i = p * cv.planes;
            select_depth(&cv.cost[i..i + cv.planes], &cv.valid[i..i + cv.planes], planes, mode)
        })
        .unzip();
    Ok(DepthMap {
        width: cv.width,
        height: cv.height,
        depth,
        confidence,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianInit {
    pub sh_degree: usize,
    pub min_confidence: f64,
    pub max_confidence: f64,
    /// World-space sigma is `footprint * stride * depth / fx`.
    pub footprint: f64,
}

impl Default for GaussianInit {
    fn default() -> Self {
        GaussianInit {
            sh_degree: 1,
            min_confidence: 0.05,
            max_confidence: 0.95,
            footprint: 0.5,
        }
    }
}

/// One primitive per `stride x stride` cell, back-projected along the cell
/// center's ray to the depth of the cell's most confident pixel.
pub fn gaussians_from_depth(
    view: &Image,
    depth: &DepthMap,
    cam: &CameraView,
    stride: usize,
    init: &GaussianInit,
) -> Result<GaussianScene> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if view.width() != depth.width || view.height() != depth.height {
        return Err(Error::DimensionMismatch("view and depth map sizes differ".into()));
    }
    if view.width() != cam.width || view.height() != cam.height {
        return Err(Error::DimensionMismatch("view does not match its camera".into()));
    }
    let mut scene = GaussianScene::new(init.sh_degree)?;
    let n_sh = 3 * sh_coeff_count(init.sh_degree);
    let (w, h) = (view.width(), view.height());
    for y0 in (0..h).step_by(stride) {
        for x0 in (0..w).step_by(stride) {
            let x1 = (x0 + stride).min(w);
            let y1 = (y0 + stride).min(h);
            let mut color = [0.0; 3];
            let mut best = (f64::NAN, -1.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = view.pixel(x, y);
                    for c in 0..3 {
                        color[c] += px[c];
                    }
                    let (d, conf) = depth.at(x, y);
                    if conf > best.1 {
                        best = (d, conf);
                    }
                }
            }
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            let center = [0.5 * (x0 + x1) as f64, 0.5 * (y0 + y1) as f64];
            let (d, conf) = best;
            let mean = cam.back_project(center, d)?;
            let sigma = init.footprint * stride as f64 * d / cam.intrinsics.fx;
            let mut sh = vec![0.0; n_sh];
            for c in 0..3 {
                sh[c] = dc_from_color(color[c] / count);
            }
            let alpha = conf.clamp(init.min_confidence, init.max_confidence);
            scene.push(GaussianPrimitive {
                mean,
                log_scale: crate::camera::Vec3::repeat(sigma.ln()),
                rotation: IDENTITY_QUAT,
                sh,
                opacity_logit: inverse_squash(alpha),
            })?;
        }
    }
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    pub lambda_per: f64,
    pub pixel_loss: PixelLossKind,
    pub background: [f64; 3],
    /// Mean step, multiplied by the scene extent.
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub decay: f64,
    pub patience: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 100,
            lambda_per: 0.2,
            pixel_loss: PixelLossKind::L2,
            background: DEFAULT_BACKGROUND,
            lr_mean: 2e-3,
            lr_log_scale: 2e-2,
            lr_rotation: 2e-2,
            lr_sh: 0.5,
            lr_opacity: 0.5,
            decay: 0.5,
            patience: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub scene: GaussianScene,
    pub trace: Vec<TraceEntry>,
    pub best_loss: f64,
}

/// Objective averaged over supervising views, with scene gradients and mean PSNR.
pub fn scene_objective(
    scene: &GaussianScene,
    views: &[(Image, CameraView)],
    cfg: &RefineConfig,
) -> Result<(f64, SceneGradients, f64)> {
    let n = views.len() as f64;
    let mut total = 0.0;
    let mut psnr_sum = 0.0;
    let mut grads = SceneGradients::zeros(scene);
    for (target, cam) in views {
        let out = render(scene, cam, cfg.background);
        let pl = pixel_loss(&out.image, target, cfg.pixel_loss)?;
        let mut value = pl.value;
        let mut up = pl.gradient;
        if cfg.lambda_per != 0.0 && target.width() >= SSIM_WINDOW && target.height() >= SSIM_WINDOW {
            let sl = ssim_loss(&out.image, target)?;
            value += cfg.lambda_per * sl.value;
            for (u, g) in up.data_mut().iter_mut().zip(sl.gradient.data()) {
                *u += cfg.lambda_per * g;
            }
        }
        for u in up.data_mut() {
            *u /= n;
        }
        total += value / n;
        psnr_sum += psnr(&out.image, target)?;
        let g = render_backward(scene, cam, cfg.background, &up)?;
        grads.add_assign(&g);
    }
    Ok((total, grads, psnr_sum / n))
}

fn scene_extent(scene: &GaussianScene) -> f64 {
    if scene.is_empty() {
        return 1.0;
    }
    let mut lo = scene.primitives[0].mean;
    let mut hi = lo;
    for p in &scene.primitives {
        lo = lo.inf(&p.mean);
        hi = hi.sup(&p.mean);
    }
    (hi - lo).max().max(1e-6)
}

/// Gradient descent on every primitive parameter. Step sizes are given per
/// value of the per-pixel objective; they are multiplied by the number of
/// supervised pixel values so that they do not depend on resolution.
pub fn refine_scene(
    scene: &GaussianScene,
    views: &[(Image, CameraView)],
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    if views.is_empty() {
        return Err(Error::EmptyInput("refinement needs at least one supervising view".into()));
    }
    let pixels = views.iter().map(|(img, _)| img.data().len()).sum::<usize>() as f64 / views.len() as f64;
    let extent = scene_extent(scene);
    let mut current = scene.clone();
    let mut best = (f64::INFINITY, current.clone());
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut scale = pixels;
    let mut since_best = 0;
    for step in 0..=cfg.steps {
        let (loss, grads, ps) = scene_objective(&current, views, cfg)?;
        trace.push(TraceEntry { step, loss, psnr: ps });
        if loss < best.0 {
            best = (loss, current.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                scale *= cfg.decay;
                since_best = 0;
                // Restart from the best iterate with the smaller step.
                current = best.1.clone();
                continue;
            }
        }
        if step == cfg.steps {
            break;
        }
        for (p, g) in current.primitives.iter_mut().zip(&grads.primitives) {
            p.mean -= g.mean * (cfg.lr_mean * extent * scale);
            p.log_scale -= g.log_scale * (cfg.lr_log_scale * scale);
            for i in 0..4 {
                p.rotation[i] -= g.rotation[i] * cfg.lr_rotation * scale;
            }
            p.rotation = normalize_quat(&p.rotation);
            for (s, gs) in p.sh.iter_mut().zip(&g.sh) {
                *s -= gs * cfg.lr_sh * scale;
            }
            p.opacity_logit -= g.opacity_logit * cfg.lr_opacity * scale;
        }
        if !current.is_finite() {
            current = best.1.clone();
            scale *= cfg.decay;
        }
    }
    Ok(RefineOutcome {
        scene: best.1,
        trace,
        best_loss: best.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub depth_near: f64,
    pub depth_far: f64,
    pub num_planes: usize,
    pub plane_spacing: PlaneSpacing,
    pub cost: CostKind,
    pub patch_radius: usize,
    pub depth_mode: DepthMode,
    pub stride: usize,
    pub init: GaussianInit,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            depth_near: 1.0,
            depth_far: 6.0,
            num_planes: 64,
            plane_spacing: PlaneSpacing::InverseDepth,
            cost: CostKind::Ncc,
            patch_radius: 2,
            depth_mode: DepthMode::Argmin,
            stride: 2,
            init: GaussianInit::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn planes(&self) -> Result<DepthPlanes> {
        DepthPlanes::new(self.depth_near, self.depth_far, self.num_planes, self.plane_spacing)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub scene: GaussianScene,
    pub adapted: Vec<Image>,
    pub depth: Vec<DepthMap>,
    pub trace: Vec<TraceEntry>,
}

/// Adapter -> two-way plane sweep -> back-projected Gaussians -> refinement.
///
/// Refinement is supervised by the adapted contexts unless `supervision`
/// supplies other (clean) views.
pub fn reconstruct(
    contexts: &[(Image, CameraView)],
    adapter: Option<&AdapterParams>,
    cfg: &PipelineConfig,
    supervision: Option<&[(Image, CameraView)]>,
) -> Result<Reconstruction> {
    if contexts.len() != 2 {
        return Err(Error::invalid(format!("reconstruction takes exactly two context views, got {}", contexts.len())));
    }
    let adapted: Vec<Image> = contexts
        .iter()
        .map(|(img, _)| match adapter {
            Some(p) => adapt(img, p),
            None => Ok(img.clone()),
        })
        .collect::<Result<_>>()?;
    let planes = cfg.planes()?;
    let mut depth = Vec::with_capacity(2);
    let mut scene = GaussianScene::new(cfg.init.sh_degree)?;
    for (r, s) in [(0usize, 1usize), (1, 0)] {
        let cv = build_cost_volume(
            &adapted[r],
            &adapted[s],
            &contexts[r].1,
            &contexts[s].1,
            &planes,
            cfg.cost,
            cfg.patch_radius,
        )?;
        let dm = depth_from_cost_volume(&cv, &planes, cfg.depth_mode)?;
        scene.extend(gaussians_from_depth(&adapted[r], &dm, &contexts[r].1, cfg.stride, &cfg.init)?)?;
        depth.push(dm);
    }
    let own: Vec<(Image, CameraView)> = adapted
        .iter()
        .zip(contexts)
        .map(|(img, (_, cam))| (img.clone(), *cam))
        .collect();
    let views = supervision.unwrap_or(&own);
    let refined = refine_scene(&scene, views, &cfg.refine)?;
    Ok(Reconstruction {
        scene: refined.scene,
        adapted,
        depth,
        trace: refined.trace,
    })
}
