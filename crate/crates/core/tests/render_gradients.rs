mod common;

use common::*;
use lowsplat::render::{render, render_backward, scene_params, set_scene_params};

const STEP: f64 = 1e-4;

/// Fraction of sampled parameters whose analytic gradient matches central differences.
fn pass_rate(seed: u64, n: usize, degree: usize, samples: usize) -> (usize, usize) {
    let scene = random_scene(seed, n, degree);
    let cam = test_camera(32);
    let bg = [0.1, 0.2, 0.3];
    let up = random_image(32, 32, seed + 1000, -1.0, 1.0);
    let grads = render_backward(&scene, &cam, bg, &up).unwrap().flatten();
    let params = scene_params(&scene);
    assert_eq!(grads.len(), params.len());
    let significant = grads.iter().filter(|g| g.abs() > 1e-3).count();
    assert!(significant * 2 > grads.len(), "gradients mostly vanish: {significant}/{}", grads.len());
    let mut r = rng(seed, "fd-sample");
    let mut ok = 0;
    let count = samples.min(params.len());
    for s in 0..count {
        let i = if samples >= params.len() { s } else { r.below(params.len()) };
        let mut p = params.clone();
        let mut probe = scene.clone();
        p[i] += STEP;
        set_scene_params(&mut probe, &p);
        let fp = dot(&render(&probe, &cam, bg).image, &up);
        p[i] -= 2.0 * STEP;
        set_scene_params(&mut probe, &p);
        let fm = dot(&render(&probe, &cam, bg).image, &up);
        let fd = (fp - fm) / (2.0 * STEP);
        if grads_agree(grads[i], fd, 1e-3, 1e-6) {
            ok += 1;
        } else {
            eprintln!("seed {seed} param {i} (prim {}, slot {}): analytic {} fd {}", i / (11 + 3 * (degree + 1) * (degree + 1)), i % (11 + 3 * (degree + 1) * (degree + 1)), grads[i], fd);
        }
    }
    (ok, count)
}

#[test]
fn single_gaussian_all_parameters() {
    for seed in 0..5 {
        let (ok, n) = pass_rate(seed, 1, 2, usize::MAX);
        assert!(ok as f64 >= 0.95 * n as f64, "seed {seed}: {ok}/{n}");
    }
}

#[test]
fn multi_gaussian_sampled_parameters() {
    let mut ok = 0;
    let mut n = 0;
    for seed in 10..14 {
        let (a, b) = pass_rate(seed, 30, 1, 200);
        ok += a;
        n += b;
    }
    assert!(ok as f64 >= 0.95 * n as f64, "{ok}/{n}");
}
