//! Gaussian scene representation.
//!
//! Each primitive stores a mean, per-axis log standard deviations, a unit
//! quaternion `(w, x, y, z)`, an opacity logit and a block of real spherical
//! harmonic coefficients. Covariance and opacity are always derived from
//! these factors, never stored.
//!
//! SH coefficients are stored coefficient-major: `sh[k * 3 + c]` is basis
//! function `k` for channel `c`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::camera::{Mat3, Vec3};
use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 2;
pub const DEFAULT_SH_DEGREE: usize = 1;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

const QUAT_TOL: f64 = 1e-9;
const SCENE_MAGIC: &str = "lowsplat-scene";

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub type Quat = [f64; 4];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize_quat(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the *raw* quaternion,
/// including the normalization step.
pub fn quat_to_matrix_vjp(raw: &Quat, d_r: &Mat3) -> Quat {
    let n = quat_norm(raw);
    let q = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let [w, x, y, z] = q;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dq = [dw, dx, dy, dz];
    let dot: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
    [
        (dq[0] - dot * q[0]) / n,
        (dq[1] - dot * q[1]) / n,
        (dq[2] - dot * q[2]) / n,
        (dq[3] - dot * q[3]) / n,
    ]
}

/// `R diag(exp(2 log_scale)) R^T` for the normalized quaternion.
pub fn covariance_from_scale_rotation(log_scale: &Vec3, rotation: &Quat) -> Result<Mat3> {
    if !log_scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite scale or rotation"));
    }
    let n = quat_norm(rotation);
    if !(n > 0.0) {
        return Err(Error::invalid("zero quaternion"));
    }
    let r = quat_to_matrix(&normalize_quat(rotation));
    Ok(covariance_from_matrix(log_scale, &r))
}

pub(crate) fn covariance_from_matrix(log_scale: &Vec3, r: &Mat3) -> Mat3 {
    let var = Vec3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    );
    let mut s = Mat3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = r[(i, 0)] * var.x * r[(j, 0)] + r[(i, 1)] * var.y * r[(j, 1)] + r[(i, 2)] * var.z * r[(j, 2)];
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Logistic sigmoid, kept inside the open interval `(0, 1)` where it would
/// round to an endpoint.
#[inline]
pub fn squash_opacity(logit: f64) -> f64 {
    let a = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    a.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[inline]
pub fn inverse_squash(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

/// Real SH basis values for all bands up to `degree` at unit direction `d`.
pub fn sh_basis(degree: usize, d: &Vec3) -> Vec<f64> {
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(SH_C0);
    if degree >= 1 {
        out.extend_from_slice(&[-SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]);
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        out.extend_from_slice(&[
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]);
    }
    out
}

/// Derivatives of each basis function w.r.t. `(x, y, z)` of the direction.
pub fn sh_basis_grad(degree: usize, d: &Vec3) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(Vec3::zeros());
    if degree >= 1 {
        out.push(Vec3::new(0.0, -SH_C1, 0.0));
        out.push(Vec3::new(0.0, 0.0, SH_C1));
        out.push(Vec3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        out.push(SH_C2[0] * Vec3::new(y, x, 0.0));
        out.push(SH_C2[1] * Vec3::new(0.0, z, y));
        out.push(SH_C2[2] * Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z));
        out.push(SH_C2[3] * Vec3::new(z, 0.0, x));
        out.push(SH_C2[4] * Vec3::new(2.0 * x, -2.0 * y, 0.0));
    }
    out
}

/// Raw (unshifted, unclipped) SH color.
pub fn eval_sh_raw(sh: &[f64], degree: usize, dir: &Vec3) -> [f64; 3] {
    let basis = sh_basis(degree, dir);
    let mut rgb = [0.0; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += sh[k * 3 + c] * b;
        }
    }
    rgb
}

/// View-dependent color: raw SH value shifted by +0.5 and clipped to `[0, 1]`.
pub fn eval_sh(sh: &[f64], degree: usize, dir: &Vec3) -> Result<[f64; 3]> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::invalid(format!("sh degree {degree} exceeds {MAX_SH_DEGREE}")));
    }
    if sh.len() != 3 * sh_coeff_count(degree) {
        return Err(Error::DimensionMismatch(format!(
            "degree {degree} needs {} sh values, got {}",
            3 * sh_coeff_count(degree),
            sh.len()
        )));
    }
    if (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("view direction is not unit length (norm {})", dir.norm())));
    }
    Ok(eval_sh_raw(sh, degree, dir).map(|v| (v + 0.5).clamp(0.0, 1.0)))
}

/// Degree-0 coefficient that renders as color `c`.
#[inline]
pub fn dc_from_color(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
}

impl GaussianPrimitive {
    /// Builds a primitive, renormalizing the quaternion.
    pub fn new(mean: Vec3, log_scale: Vec3, rotation: Quat, sh: Vec<f64>, opacity_logit: f64) -> Result<Self> {
        let n = quat_norm(&rotation);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("quaternion must be finite and nonzero"));
        }
        Ok(GaussianPrimitive {
            mean,
            log_scale,
            rotation: normalize_quat(&rotation),
            sh,
            opacity_logit,
        })
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance_from_scale_rotation(&self.log_scale, &self.rotation)
    }

    pub fn opacity(&self) -> f64 {
        squash_opacity(self.opacity_logit)
    }

    /// Number of scalar parameters for SH degree `degree`.
    pub fn param_count(degree: usize) -> usize {
        3 + 3 + 4 + 1 + 3 * sh_coeff_count(degree)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    sh_degree: usize,
    pub primitives: Vec<GaussianPrimitive>,
}

impl GaussianScene {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::invalid(format!("sh degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
        }
        Ok(GaussianScene {
            sh_degree,
            primitives: Vec::new(),
        })
    }

    pub fn with_primitives(sh_degree: usize, primitives: Vec<GaussianPrimitive>) -> Result<Self> {
        let mut scene = GaussianScene::new(sh_degree)?;
        for p in primitives {
            scene.push(p)?;
        }
        Ok(scene)
    }

    pub fn push(&mut self, p: GaussianPrimitive) -> Result<()> {
        let want = 3 * sh_coeff_count(self.sh_degree);
        if p.sh.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "primitive has {} sh values, scene degree {} needs {want}",
                p.sh.len(),
                self.sh_degree
            )));
        }
        self.primitives.push(p);
        Ok(())
    }

    pub fn extend(&mut self, other: GaussianScene) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::invalid("cannot merge scenes with different sh degree"));
        }
        self.primitives.extend(other.primitives);
        Ok(())
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.primitives.iter().all(|p| {
            p.mean.iter().chain(p.log_scale.iter()).all(|v| v.is_finite())
                && p.rotation.iter().all(|v| v.is_finite())
                && p.sh.iter().all(|v| v.is_finite())
                && p.opacity_logit.is_finite()
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{SCENE_MAGIC} v1 sh_degree={} count={}",
            self.sh_degree,
            self.primitives.len()
        );
        for p in &self.primitives {
            let fields = p
                .mean
                .iter()
                .chain(p.log_scale.iter())
                .chain(p.rotation.iter())
                .chain(std::iter::once(&p.opacity_logit))
                .chain(p.sh.iter());
            let line: Vec<String> = fields.map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::MalformedRecord {
            line: 1,
            reason: "empty file".into(),
        })?;
        let (degree, count) = parse_header(header)?;
        let mut scene = GaussianScene::new(degree).map_err(|e| Error::MalformedRecord {
            line: 1,
            reason: e.to_string(),
        })?;
        let n_sh = 3 * sh_coeff_count(degree);
        let expected = 11 + n_sh;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_ascii_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::MalformedRecord {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            if vals.len() != expected {
                return Err(Error::MalformedRecord {
                    line: lineno,
                    reason: format!(
                        "expected {expected} values for sh degree {degree}, got {} (degree mismatch?)",
                        vals.len()
                    ),
                });
            }
            let mut rotation = [vals[6], vals[7], vals[8], vals[9]];
            let n = quat_norm(&rotation);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::MalformedRecord {
                    line: lineno,
                    reason: "degenerate quaternion".into(),
                });
            }
            if (n - 1.0).abs() > QUAT_TOL {
                log::warn!("line {lineno}: quaternion norm {n} renormalized");
                rotation = normalize_quat(&rotation);
            }
            scene.primitives.push(GaussianPrimitive {
                mean: Vec3::new(vals[0], vals[1], vals[2]),
                log_scale: Vec3::new(vals[3], vals[4], vals[5]),
                rotation,
                opacity_logit: vals[10],
                sh: vals[11..].to_vec(),
            });
        }
        if scene.primitives.len() != count {
            return Err(Error::MalformedRecord {
                line: 1,
                reason: format!("header declares {count} primitives, found {}", scene.primitives.len()),
            });
        }
        Ok(scene)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let bad = |reason: &str| Error::MalformedRecord {
        line: 1,
        reason: reason.to_string(),
    };
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(SCENE_MAGIC) || parts.next() != Some("v1") {
        return Err(bad("expected `lowsplat-scene v1` header"));
    }
    let mut degree = None;
    let mut count = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("sh_degree", v)) => degree = v.parse::<usize>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(bad(&format!("unexpected header field `{kv}`"))),
        }
    }
    Ok((degree.ok_or_else(|| bad("missing sh_degree"))?, count.ok_or_else(|| bad("missing count"))?))
}

pub fn scene_write(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene.to_text()).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn scene_read(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GaussianScene::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_closed_forms() {
        let id = covariance_from_scale_rotation(&Vec3::zeros(), &IDENTITY_QUAT).unwrap();
        assert!((id - Mat3::identity()).abs().max() < 1e-15);
        let ls = Vec3::new(2f64.ln(), 0.0, 0.0);
        let d = covariance_from_scale_rotation(&ls, &IDENTITY_QUAT).unwrap();
        assert!((d - Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).abs().max() < 1e-14);
        let h = std::f64::consts::FRAC_PI_4;
        let rz = [h.cos(), 0.0, 0.0, h.sin()];
        let rot = covariance_from_scale_rotation(&ls, &rz).unwrap();
        // Oracle: explicit 90 degree z-rotation matrix product.
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expect = r * Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!((rot - expect).abs().max() < 1e-14);
        assert!((rot - Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0))).abs().max() < 1e-14);
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(covariance_from_scale_rotation(&Vec3::new(f64::NAN, 0.0, 0.0), &IDENTITY_QUAT).is_err());
        assert!(covariance_from_scale_rotation(&Vec3::zeros(), &[f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn squash_closed_forms() {
        assert_eq!(squash_opacity(0.0), 0.5);
        let hi = squash_opacity(40.0);
        assert!(hi < 1.0 && hi >= 1.0 - 1e-15);
        assert!((squash_opacity(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(squash_opacity(-800.0) > 0.0);
        assert!(squash_opacity(800.0) < 1.0);
        assert!((inverse_squash(squash_opacity(1.7)) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn sh_degree0_constant() {
        let sh = vec![0.4, -0.2, 1.0];
        let a = eval_sh(&sh, 0, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let b = eval_sh(&sh, 0, &Vec3::new(0.6, 0.0, 0.8)).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert!((a[c] - (sh[c] * 0.28209479177387814 + 0.5).clamp(0.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn sh_degree1_z_band_is_odd() {
        let mut sh = vec![0.0; 12];
        sh[2 * 3] = 0.7;
        let up = eval_sh_raw(&sh, 1, &Vec3::new(0.0, 0.0, 1.0));
        let down = eval_sh_raw(&sh, 1, &Vec3::new(0.0, 0.0, -1.0));
        assert!(up[0] > 0.0 && down[0] < 0.0);
        assert_eq!(up[0], -down[0]);
    }

    #[test]
    fn sh_rejects_non_unit_direction() {
        assert!(eval_sh(&[0.0; 3], 0, &Vec3::new(0.0, 0.0, 2.0)).is_err());
        assert!(eval_sh(&[0.0; 3], 1, &Vec3::new(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let q = [0.9, -0.3, 0.25, 0.4];
        let g = Mat3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let f = |q: &Quat| (quat_to_matrix(&normalize_quat(q)).component_mul(&g)).sum();
        let analytic = quat_to_matrix_vjp(&q, &g);
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += 1e-6;
            qm[i] -= 1e-6;
            let fd = (f(&qp) - f(&qm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn text_format_header_and_errors() {
        let scene = GaussianScene::new(0).unwrap();
        assert_eq!(scene.to_text(), "lowsplat-scene v1 sh_degree=0 count=0\n");
        assert_eq!(GaussianScene::from_text(&scene.to_text()).unwrap(), scene);
        assert!(GaussianScene::from_text("garbage").is_err());
        let wrong = "lowsplat-scene v1 sh_degree=1 count=1\n0 0 0 0 0 0 1 0 0 0 0 0.1 0.2 0.3\n";
        assert!(matches!(GaussianScene::from_text(wrong), Err(Error::MalformedRecord { line: 2, .. })));
        let short = "lowsplat-scene v1 sh_degree=0 count=2\n0 0 0 0 0 0 1 0 0 0 0 0.1 0.2 0.3\n";
        assert!(GaussianScene::from_text(short).is_err());
    }

    #[test]
    fn non_unit_quaternion_is_renormalized_on_read() {
        let text = "lowsplat-scene v1 sh_degree=0 count=1\n0 0 0 0 0 0 2 0 0 0 0 0.1 0.2 0.3\n";
        let scene = GaussianScene::from_text(text).unwrap();
        assert_eq!(scene.primitives[0].rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn push_checks_sh_length() {
        let mut scene = GaussianScene::new(1).unwrap();
        let p = GaussianPrimitive::new(Vec3::zeros(), Vec3::zeros(), IDENTITY_QUAT, vec![0.0; 3], 0.0).unwrap();
        assert!(scene.push(p).is_err());
        assert!(GaussianScene::new(3).is_err());
    }
}
