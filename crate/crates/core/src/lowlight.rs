//! Controllable lowlight degradation: gamma darkening, exposure scaling,
//! per-channel color shift and Gaussian blur, applied in that order with
//! per-image probability `p`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{convolve2d, gaussian_kernel, BorderMode, Image};
use crate::rng::{SeededRng, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub gamma: bool,
    pub exposure: bool,
    pub shift: bool,
    pub blur: bool,
}

impl StageToggles {
    pub const ALL: StageToggles = StageToggles {
        gamma: true,
        exposure: true,
        shift: true,
        blur: true,
    };
    pub const NONE: StageToggles = StageToggles {
        gamma: false,
        exposure: false,
        shift: false,
        blur: false,
    };
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowlightConfig {
    pub gamma_range: (f64, f64),
    pub exposure_range: (f64, f64),
    pub shift_radius: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_kernel: usize,
    pub probability: f64,
    pub stages: StageToggles,
}

impl Default for LowlightConfig {
    fn default() -> Self {
        LowlightConfig {
            gamma_range: (2.0, 5.0),
            exposure_range: (0.10, 0.50),
            shift_radius: 0.10,
            blur_sigma_range: (0.5, 1.5),
            blur_kernel: 5,
            probability: 1.0,
            stages: StageToggles::ALL,
        }
    }
}

impl LowlightConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (g0, g1) = self.gamma_range;
        if !(1.0 < g0 && g0 <= g1 && g1.is_finite()) {
            return bad(format!("gamma range must satisfy 1 < min <= max, got ({g0}, {g1})"));
        }
        let (s0, s1) = self.exposure_range;
        if !(0.0 < s0 && s0 <= s1 && s1 < 1.0) {
            return bad(format!("exposure range must satisfy 0 < min <= max < 1, got ({s0}, {s1})"));
        }
        if !(self.shift_radius >= 0.0 && self.shift_radius <= 1.0) {
            return bad(format!("shift radius must lie in [0, 1], got {}", self.shift_radius));
        }
        let (b0, b1) = self.blur_sigma_range;
        if !(0.0 < b0 && b0 <= b1 && b1.is_finite()) {
            return bad(format!("blur sigma range must satisfy 0 < min <= max, got ({b0}, {b1})"));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return bad(format!("blur kernel must be odd, got {}", self.blur_kernel));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability must lie in [0, 1], got {}", self.probability));
        }
        Ok(())
    }
}

/// One concrete draw of the degradation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub applied: bool,
    pub gamma: f64,
    pub exposure: f64,
    pub shift: [f64; 3],
    pub sigma: f64,
    pub kernel: usize,
}

impl DegradeParams {
    /// Parameters under which every stage is the identity.
    pub fn identity() -> Self {
        DegradeParams {
            applied: true,
            gamma: 1.0,
            exposure: 1.0,
            shift: [0.0; 3],
            sigma: 1.0,
            kernel: 1,
        }
    }
}

/// `I <- I^gamma`.
pub fn gamma_darken(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 1.0) {
        return Err(Error::invalid(format!("gamma must exceed 1, got {gamma}")));
    }
    Ok(img.map(|v| v.powf(gamma)))
}

/// `I <- s I`.
pub fn exposure_scale(img: &Image, s: f64) -> Result<Image> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("exposure must lie in (0, 1), got {s}")));
    }
    Ok(img.map(|v| s * v))
}

/// `I_c <- clip((1 + delta_c) I_c, 0, 1)`.
pub fn channel_shift(img: &Image, delta: [f64; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((1.0 + delta[c]) * px[c]).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn blur(img: &Image, sigma: f64, k: usize) -> Result<Image> {
    let kernel = gaussian_kernel(sigma, k)?;
    Ok(convolve2d(img, &kernel, BorderMode::Replicate))
}

/// Draw order: applied, gamma, exposure, shift R, G, B, sigma. All draws are
/// consumed whether or not the image ends up degraded.
pub fn sample_params(cfg: &LowlightConfig, rng: &mut SeededRng) -> DegradeParams {
    let applied = rng.bernoulli(cfg.probability);
    let gamma = rng.uniform(cfg.gamma_range.0, cfg.gamma_range.1);
    let exposure = rng.uniform(cfg.exposure_range.0, cfg.exposure_range.1);
    let r = cfg.shift_radius;
    let shift = [rng.uniform(-r, r), rng.uniform(-r, r), rng.uniform(-r, r)];
    let sigma = rng.uniform(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    DegradeParams {
        applied,
        gamma,
        exposure,
        shift,
        sigma,
        kernel: cfg.blur_kernel,
    }
}

/// Applies the enabled stages in order; identity when `params.applied` is false.
pub fn degrade(img: &Image, params: &DegradeParams, stages: StageToggles) -> Result<Image> {
    if !params.applied {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    if stages.gamma {
        let g = params.gamma;
        out = out.map(|v| v.powf(g));
    }
    if stages.exposure {
        let s = params.exposure;
        out = out.map(|v| s * v);
    }
    if stages.shift {
        out = channel_shift(&out, params.shift);
    }
    if stages.blur {
        out = blur(&out, params.sigma, params.kernel)?;
    }
    Ok(out.clipped())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Context,
    Target,
}

/// Degraded view plus its provenance; `params` is `None` for target views.
#[derive(Clone, Debug)]
pub struct DegradedView {
    pub image: Image,
    pub params: Option<DegradeParams>,
    pub stream: StreamId,
}

/// Degrades context views on their own `(seed, scene_id, view index)`
/// streams and passes target views through untouched.
pub fn degrade_context_views(
    views: &[(Image, Role)],
    cfg: &LowlightConfig,
    seed: u64,
    scene_id: &str,
) -> Result<Vec<DegradedView>> {
    cfg.validate()?;
    views
        .par_iter()
        .enumerate()
        .map(|(i, (img, role))| {
            let stream = StreamId::new(scene_id, i as u64);
            match role {
                Role::Target => Ok(DegradedView {
                    image: img.clone(),
                    params: None,
                    stream,
                }),
                Role::Context => {
                    let mut rng = SeededRng::new(seed, stream.clone());
                    let params = sample_params(cfg, &mut rng);
                    let image = degrade(img, &params, cfg.stages)?;
                    Ok(DegradedView {
                        image,
                        params: Some(params),
                        stream,
                    })
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(6, 5, |x, y| {
            let v = (x + 6 * y) as f64 / 29.0;
            [v, 1.0 - v, 0.5 * v]
        })
    }

    #[test]
    fn gamma_closed_form_and_fixed_points() {
        let img = Image::from_vec(1, 1, vec![0.5, 0.0, 1.0]).unwrap();
        let out = gamma_darken(&img, 2.0).unwrap();
        assert_eq!(out.data(), &[0.25, 0.0, 1.0]);
        assert!(gamma_darken(&img, 1.0).is_err());
        let r = ramp();
        let d = gamma_darken(&r, 3.3).unwrap();
        for (o, i) in d.data().iter().zip(r.data()) {
            if *i > 0.0 && *i < 1.0 {
                assert!(o < i);
            }
        }
    }

    #[test]
    fn exposure_closed_form() {
        let img = Image::from_vec(1, 1, vec![1.0, 0.0, 0.4]).unwrap();
        let out = exposure_scale(&img, 0.3).unwrap();
        assert_eq!(out.data()[0], 0.3);
        assert_eq!(out.data()[1], 0.0);
        assert!(exposure_scale(&img, 1.0).is_err());
        assert!(exposure_scale(&img, 0.0).is_err());
        let r = ramp();
        let m = exposure_scale(&r, 0.25).unwrap().mean();
        assert!((m - 0.25 * r.mean()).abs() < 1e-15);
    }

    #[test]
    fn shift_closed_form_and_clip() {
        let img = Image::from_vec(1, 1, vec![0.5, 0.9, 0.3]).unwrap();
        let out = channel_shift(&img, [-0.1, 0.2, 0.0]);
        assert!((out.data()[0] - 0.45).abs() < 1e-15);
        assert_eq!(out.data()[1], 1.0);
        assert_eq!(out.data()[2], 0.3);
        assert_eq!(channel_shift(&ramp(), [0.0; 3]), ramp());
    }

    #[test]
    fn blur_k1_identity() {
        assert_eq!(blur(&ramp(), 1.0, 1).unwrap(), ramp());
        assert!(blur(&ramp(), 1.0, 2).is_err());
    }

    #[test]
    fn degrade_composition() {
        let img = Image::filled(3, 3, [1.0; 3]);
        let params = DegradeParams {
            applied: true,
            gamma: 2.0,
            exposure: 0.3,
            shift: [0.0; 3],
            sigma: 1.0,
            kernel: 1,
        };
        let out = degrade(&img, &params, StageToggles::ALL).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let off = DegradeParams { applied: false, ..params.clone() };
        assert_eq!(degrade(&ramp(), &off, StageToggles::ALL).unwrap(), ramp());
        assert_eq!(degrade(&ramp(), &params, StageToggles::NONE).unwrap(), ramp());
    }

    #[test]
    fn identity_parameters_equal_disabled_stages() {
        let r = ramp();
        let id = DegradeParams::identity();
        assert_eq!(degrade(&r, &id, StageToggles::ALL).unwrap(), r);
    }

    #[test]
    fn sampling_extremes_of_p() {
        let mut cfg = LowlightConfig::default();
        let mut rng = SeededRng::for_view(3, "s", 0);
        for _ in 0..200 {
            assert!(sample_params(&cfg, &mut rng).applied);
        }
        cfg.probability = 0.0;
        for _ in 0..200 {
            assert!(!sample_params(&cfg, &mut rng).applied);
        }
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let cfg = LowlightConfig::default();
        let mut rng = SeededRng::for_view(11, "s", 2);
        for _ in 0..1000 {
            let p = sample_params(&cfg, &mut rng);
            assert!((2.0..=5.0).contains(&p.gamma));
            assert!((0.1..=0.5).contains(&p.exposure));
            assert!(p.shift.iter().all(|d| d.abs() <= 0.1));
            assert!((0.5..=1.5).contains(&p.sigma));
            assert_eq!(p.kernel, 5);
        }
    }

    #[test]
    fn config_validation() {
        let ok = LowlightConfig::default();
        assert!(ok.validate().is_ok());
        let bad_gamma = LowlightConfig {
            gamma_range: (1.0, 2.0),
            ..ok.clone()
        };
        assert!(bad_gamma.validate().is_err());
        let bad_exposure = LowlightConfig {
            exposure_range: (0.2, 1.0),
            ..ok.clone()
        };
        assert!(bad_exposure.validate().is_err());
        let bad_kernel = LowlightConfig { blur_kernel: 4, ..ok.clone() };
        assert!(bad_kernel.validate().is_err());
        let bad_p = LowlightConfig { probability: 1.5, ..ok };
        assert!(bad_p.validate().is_err());
    }

    #[test]
    fn context_views_only() {
        let views = vec![(ramp(), Role::Target), (ramp(), Role::Context), (ramp(), Role::Context)];
        let cfg = LowlightConfig::default();
        let out = degrade_context_views(&views, &cfg, 5, "scene").unwrap();
        assert_eq!(out[0].image, ramp());
        assert!(out[0].params.is_none());
        assert!(out[1].params.as_ref().unwrap().applied);
        assert!(out[2].params.as_ref().unwrap().applied);
        let again = degrade_context_views(&views, &cfg, 5, "scene").unwrap();
        for (a, b) in out.iter().zip(&again) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.params, b.params);
        }
        let targets = vec![(ramp(), Role::Target); 2];
        let t = degrade_context_views(&targets, &cfg, 5, "scene").unwrap();
        assert!(t.iter().all(|v| v.image == ramp()));
    }
}
