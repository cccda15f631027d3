//! The one-tailed p-value checked against direct numerical integration of
//! the Student-t density. Nothing here calls into the library's special
//! functions.

use std::f64::consts::PI;

use dovmm::stats::{incomplete_beta_reg, paired_ttest_one_tailed, student_t_sf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    adapt(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + adapt(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    adapt(f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), 1e-13, 40)
}

/// Γ(x) for positive integers and half-integers by the recurrence.
fn gamma_half_integer(x: f64) -> f64 {
    let (mut g, mut y) = if x.fract() == 0.0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while y < x {
        g *= y;
        y += 1.0;
    }
    g
}

fn t_density(nu: u32) -> impl Fn(f64) -> f64 {
    let v = f64::from(nu);
    // Ratio of gammas built as a product to stay finite for large ν.
    let ratio = if nu <= 300 {
        gamma_half_integer((v + 1.0) / 2.0) / gamma_half_integer(v / 2.0)
    } else {
        // Asymptotic series of Γ(z + 1/2)/Γ(z) at z = ν/2.
        let z = v / 2.0;
        z.sqrt() * (1.0 - 1.0 / (8.0 * z) + 1.0 / (128.0 * z * z) + 5.0 / (1024.0 * z * z * z))
    };
    let c = ratio / (v * PI).sqrt();
    move |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

/// `P(T > t)` by integrating the density over `[0, |t|]`.
fn oracle_sf(t: f64, nu: u32) -> f64 {
    let f = t_density(nu);
    let mass = integrate(&f, 0.0, t.abs());
    if t >= 0.0 {
        0.5 - mass
    } else {
        0.5 + mass
    }
}

#[test]
fn random_paired_series_match_the_integration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let k = rng.gen_range(2..=50);
        let shift = rng.gen_range(-1.0..1.0);
        let spread = rng.gen_range(0.05..3.0);
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| x - shift * 0.3 + spread * rng.gen_range(-0.5..0.5))
            .collect();
        let r = paired_ttest_one_tailed(&a, &b, 0.05).unwrap();

        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let kf = k as f64;
        let mean = d.iter().sum::<f64>() / kf;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (kf - 1.0)).sqrt();
        let t = mean / (sd / kf.sqrt());
        let want = oracle_sf(t, k as u32 - 1);
        assert!((r.t - t).abs() <= 1e-9 * t.abs().max(1.0), "case {case}: t {} vs {t}", r.t);
        let err = (r.p - want).abs();
        worst = worst.max(err);
        assert!(err < 1e-9, "case {case}: K = {k}, t = {t}, p = {} vs oracle {want}", r.p);
    }
    eprintln!("worst |p - oracle| = {worst:e}");
}

#[test]
fn hand_worked_example_against_the_oracle() {
    let r = paired_ttest_one_tailed(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], 0.05).unwrap();
    let want = oracle_sf(18f64.sqrt(), 4);
    assert!((r.p - want).abs() < 1e-12);
    assert!((r.p - 0.00661).abs() < 1e-5);
}

#[test]
fn closed_forms() {
    for nu in [1.0, 2.0, 3.0, 7.0, 30.0, 1000.0] {
        assert!((student_t_sf(0.0, nu).unwrap() - 0.5).abs() < 1e-12);
    }
    assert!((student_t_sf(1.0, 1.0).unwrap() - 0.25).abs() < 1e-12);
    assert!((oracle_sf(1.0, 1) - 0.25).abs() < 1e-12);
}

#[test]
fn incomplete_beta_by_integration() {
    // Beta(2, 3) density is 12 x (1 - x)^2.
    let mass = integrate(&|x: f64| 12.0 * x * (1.0 - x).powi(2), 0.0, 0.25);
    assert!((mass - 0.26171875).abs() < 1e-13);
    assert!((incomplete_beta_reg(0.25, 2.0, 3.0).unwrap() - mass).abs() < 1e-12);
}

#[test]
fn large_dof_approaches_the_normal_tail() {
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let normal_sf = 0.5 - integrate(&phi, 0.0, 1.96);
    assert!((normal_sf - 0.0249979).abs() < 1e-6);
    let sf = student_t_sf(1.96, 10000.0).unwrap();
    assert!((sf - normal_sf).abs() < 1e-4);
    assert!((sf - 0.0250).abs() < 1e-4);
    assert!((oracle_sf(1.96, 10000) - sf).abs() < 1e-9);
}
