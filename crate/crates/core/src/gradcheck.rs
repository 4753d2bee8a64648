//! Central finite-difference checks of every analytic gradient, as run by
//! the `gradcheck` command.

use serde::Serialize;

use crate::adapter::{adapt, adapt_backward, AdapterArch, AdapterParams};
use crate::camera::{CameraView, Intrinsics, Pose, Vec3};
use crate::error::Result;
use crate::imaging::{pixel_loss, ssim_loss, Image, LossValue, PixelLossKind};
use crate::render::{render, render_backward, scene_params, set_scene_params};
use crate::rng::SeededRng;
use crate::scene::{sh_coeff_count, GaussianPrimitive, GaussianScene};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack for gradients that are zero up to round-off.
pub const ABS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suite: String,
    pub checked: usize,
    pub passed: usize,
}

impl GradcheckReport {
    pub fn rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_TOL
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_image(r: &mut SeededRng, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(w, h, |_, _| [r.uniform(lo, hi), r.uniform(lo, hi), r.uniform(lo, hi)])
}

fn random_scene(r: &mut SeededRng, n: usize, degree: usize) -> Result<GaussianScene> {
    let mut scene = GaussianScene::new(degree)?;
    for _ in 0..n {
        let z = r.uniform(2.0, 4.0);
        let mean = Vec3::new(r.uniform(-0.4, 0.4) * z, r.uniform(-0.4, 0.4) * z, z);
        let ls = |r: &mut SeededRng| r.uniform(0.04f64.ln(), 0.25f64.ln());
        let log_scale = Vec3::new(ls(r), ls(r), ls(r));
        let q = [r.normal(), r.normal(), r.normal(), r.normal()];
        let sh = (0..3 * sh_coeff_count(degree)).map(|_| r.uniform(-0.6, 0.6)).collect();
        scene.push(GaussianPrimitive::new(mean, log_scale, q, sh, r.uniform(-1.0, 2.0))?)?;
    }
    Ok(scene)
}

/// Renderer gradients of `<upstream, render(scene)>` on `scenes` random
/// scenes of up to `max_prims` primitives.
pub fn renderer(seed: u64, scenes: usize, max_prims: usize, size: usize, samples: usize) -> Result<GradcheckReport> {
    let f = size as f64;
    let cam = CameraView::new(Intrinsics::new(f, f, f / 2.0, f / 2.0)?, Pose::identity(), size, size)?;
    let bg = [0.1, 0.2, 0.3];
    let (mut checked, mut passed) = (0, 0);
    for k in 0..scenes {
        let mut r = SeededRng::for_view(seed, "gradcheck-renderer", k as u64);
        let n = 1 + r.below(max_prims.max(1));
        let scene = random_scene(&mut r, n, 1 + k % 2)?;
        let up = random_image(&mut r, size, size, -1.0, 1.0);
        let grads = render_backward(&scene, &cam, bg, &up)?.flatten();
        let params = scene_params(&scene);
        let mut probe = scene.clone();
        for _ in 0..samples {
            let i = r.below(params.len());
            let mut p = params.clone();
            p[i] += FD_STEP;
            set_scene_params(&mut probe, &p);
            let fp = dot(&render(&probe, &cam, bg).image, &up);
            p[i] -= 2.0 * FD_STEP;
            set_scene_params(&mut probe, &p);
            let fm = dot(&render(&probe, &cam, bg).image, &up);
            checked += 1;
            passed += agrees(grads[i], (fp - fm) / (2.0 * FD_STEP)) as usize;
        }
    }
    Ok(GradcheckReport {
        suite: "renderer".into(),
        checked,
        passed,
    })
}

/// Adapter parameter gradients of `<upstream, adapt(img)>`.
pub fn adapter(seed: u64, samples: usize) -> Result<GradcheckReport> {
    let mut r = SeededRng::for_view(seed, "gradcheck-adapter", 0);
    let arch = AdapterArch::Residual {
        width: 4,
        kernel: 3,
        blocks: 1,
    };
    let mut params = AdapterParams::init(arch, 0.5, seed)?;
    // A non-zero head so every layer receives gradient.
    let mut flat = params.flatten();
    for v in flat.iter_mut() {
        *v = r.uniform(-0.3, 0.3);
    }
    params.set_flat(&flat)?;
    let img = random_image(&mut r, 12, 10, 0.05, 0.95);
    let up = random_image(&mut r, 12, 10, -1.0, 1.0);
    let grads = adapt_backward(&img, &params, &up)?.0.flatten();
    let (mut checked, mut passed) = (0, 0);
    let mut probe = params.clone();
    for _ in 0..samples {
        let i = r.below(flat.len());
        let mut p = flat.clone();
        p[i] += FD_STEP;
        probe.set_flat(&p)?;
        let fp = dot(&adapt(&img, &probe)?, &up);
        p[i] -= 2.0 * FD_STEP;
        probe.set_flat(&p)?;
        let fm = dot(&adapt(&img, &probe)?, &up);
        checked += 1;
        passed += agrees(grads[i], (fp - fm) / (2.0 * FD_STEP)) as usize;
    }
    Ok(GradcheckReport {
        suite: "adapter".into(),
        checked,
        passed,
    })
}

/// Input gradients of the L2, Charbonnier and SSIM losses.
pub fn losses(seed: u64, samples: usize) -> Result<GradcheckReport> {
    let mut r = SeededRng::for_view(seed, "gradcheck-losses", 0);
    let pred = random_image(&mut r, 16, 16, 0.1, 0.9);
    let target = random_image(&mut r, 16, 16, 0.1, 0.9);
    type LossFn = fn(&Image, &Image) -> Result<LossValue>;
    let fns: [LossFn; 3] = [
        |a, b| pixel_loss(a, b, PixelLossKind::L2),
        |a, b| pixel_loss(a, b, PixelLossKind::Charbonnier { eps: 1e-3 }),
        ssim_loss,
    ];
    let (mut checked, mut passed) = (0, 0);
    for f in fns {
        let g = f(&pred, &target)?.gradient;
        for _ in 0..samples / 3 {
            let i = r.below(pred.data().len());
            let mut p = pred.clone();
            p.data_mut()[i] += FD_STEP;
            let fp = f(&p, &target)?.value;
            p.data_mut()[i] -= 2.0 * FD_STEP;
            let fm = f(&p, &target)?.value;
            checked += 1;
            passed += agrees(g.data()[i], (fp - fm) / (2.0 * FD_STEP)) as usize;
        }
    }
    Ok(GradcheckReport {
        suite: "losses".into(),
        checked,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for rep in [renderer(1, 2, 5, 16, 20).unwrap(), adapter(1, 40).unwrap(), losses(1, 60).unwrap()] {
            assert!(rep.rate() >= 0.95, "{rep:?}");
        }
    }
}
