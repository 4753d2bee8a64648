#![allow(dead_code)]

use lowsplat::camera::{CameraView, Intrinsics, Pose, Vec3};
use lowsplat::imaging::Image;
use lowsplat::rng::SeededRng;
use lowsplat::scene::{sh_coeff_count, GaussianPrimitive, GaussianScene};

pub fn rng(seed: u64, tag: &str) -> SeededRng {
    SeededRng::for_view(seed, tag, 0)
}

pub fn test_camera(size: usize) -> CameraView {
    let f = size as f64;
    CameraView::new(
        Intrinsics::new(f, f, size as f64 / 2.0, size as f64 / 2.0).unwrap(),
        Pose::identity(),
        size,
        size,
    )
    .unwrap()
}

pub fn random_quat(r: &mut SeededRng) -> [f64; 4] {
    [r.normal(), r.normal(), r.normal(), r.normal()]
}

/// Random primitives in front of an identity camera at the origin.
pub fn random_scene(seed: u64, n: usize, degree: usize) -> GaussianScene {
    let mut r = rng(seed, "random-scene");
    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let z = r.uniform(2.0, 4.0);
        let mean = Vec3::new(r.uniform(-0.4, 0.4) * z, r.uniform(-0.4, 0.4) * z, z);
        let log_scale = Vec3::new(
            r.uniform(0.04f64.ln(), 0.25f64.ln()),
            r.uniform(0.04f64.ln(), 0.25f64.ln()),
            r.uniform(0.04f64.ln(), 0.25f64.ln()),
        );
        let sh = (0..3 * sh_coeff_count(degree)).map(|_| r.uniform(-0.6, 0.6)).collect();
        prims.push(GaussianPrimitive::new(mean, log_scale, random_quat(&mut r), sh, r.uniform(-1.0, 2.0)).unwrap());
    }
    GaussianScene::with_primitives(degree, prims).unwrap()
}

pub fn random_image(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut r = rng(seed, "random-image");
    Image::from_fn(w, h, |_, _| [r.uniform(lo, hi), r.uniform(lo, hi), r.uniform(lo, hi)])
}

pub fn dot(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative agreement test shared by all finite-difference suites.
pub fn grads_agree(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs_floor
}

/// Smooth value-noise texture on the plane, cell size `cell` in world units.
pub fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> [f64; 3] {
    fn hash(i: i64, j: i64, c: u64, seed: u64) -> f64 {
        let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ c.wrapping_mul(0x1656_67B1_9E37_79F9)
            ^ seed.wrapping_mul(0x27D4_EB2F_1656_67C5);
        h ^= h >> 31;
        h = h.wrapping_mul(0x7FB5_D329_728E_A185);
        h ^= h >> 27;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
    let (u, v) = (x / cell, y / cell);
    let (i, j) = (u.floor() as i64, v.floor() as i64);
    let (fu, fv) = (u - u.floor(), v - v.floor());
    let (su, sv) = (fu * fu * (3.0 - 2.0 * fu), fv * fv * (3.0 - 2.0 * fv));
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let c = c as u64;
        let a = hash(i, j, c, seed) * (1.0 - su) + hash(i + 1, j, c, seed) * su;
        let b = hash(i, j + 1, c, seed) * (1.0 - su) + hash(i + 1, j + 1, c, seed) * su;
        *o = 0.1 + 0.8 * (a * (1.0 - sv) + b * sv);
    }
    out
}

/// Ray-traces the plane `n·X = offset` textured with [`value_noise`] (in the
/// plane's world x/y coordinates). Returns the image and per-pixel true ray
/// distance (infinite where the ray misses).
pub fn render_plane(cam: &CameraView, normal: Vec3, offset: f64, cell: f64, seed: u64) -> (Image, Vec<f64>) {
    let mut depth = vec![f64::INFINITY; cam.width * cam.height];
    let img = Image::from_fn(cam.width, cam.height, |x, y| {
        let (o, d) = cam.ray_for_pixel(CameraView::pixel_center(x, y));
        let denom = normal.dot(&d);
        if denom.abs() < 1e-12 {
            return [0.0; 3];
        }
        let t = (offset - normal.dot(&o)) / denom;
        if t <= 0.0 {
            return [0.0; 3];
        }
        depth[y * cam.width + x] = t * d.norm();
        let p = o + d * t;
        value_noise(p.x, p.y, cell, seed)
    });
    (img, depth)
}

/// Orbit of cameras on a circle of `radius` around `target`, spanning `arc`
/// radians, all looking at the target.
pub fn orbit_cameras(n: usize, size: usize, radius: f64, arc: f64, target: Vec3, fov_deg: f64) -> Vec<CameraView> {
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
            let a = t * arc;
            let eye = target + Vec3::new(radius * a.sin(), -0.2 * radius, -radius * a.cos());
            let pose = Pose::look_at(eye, target, Vec3::new(0.0, -1.0, 0.0)).unwrap();
            CameraView::with_fov(pose, size, size, fov_deg).unwrap()
        })
        .collect()
}
