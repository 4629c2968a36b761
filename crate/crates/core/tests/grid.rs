use gfdm::grid::{kernel_covariance, node_and_weight};
use gfdm::{HurstIndex, SpaceGrid};
use proptest::prelude::*;

/// Adaptive Simpson on [a, b].
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn density(h: f64) -> impl Fn(f64) -> f64 {
    move |x: f64| {
        if h < 0.5 {
            x.powf(-(0.5 + h)) / (libm_gamma(h + 0.5) * libm_gamma(0.5 - h))
        } else {
            x.powf(0.5 - h) / (libm_gamma(h + 0.5) * libm_gamma(1.5 - h))
        }
    }
}

// Lanczos approximation, independent of the library's Gamma.
fn libm_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * libm_gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + G + 0.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

#[test]
fn node_and_weight_match_quadrature() {
    for &h in &[0.05, 0.1, 0.25, 0.45, 0.55, 0.75, 0.9] {
        for &(lo, hi) in &[(1.0, 1.35), (0.0025, 0.0034), (200.0, 350.0), (0.5, 0.9)] {
            let (x, q) = node_and_weight(HurstIndex::new(h).unwrap(), lo, hi).unwrap();
            let nu = density(h);
            let mass = adaptive(&nu, lo, hi, 1e-15 * hi);
            let first = adaptive(&|v| v * nu(v), lo, hi, 1e-15 * hi * hi);
            assert!(((q - mass) / mass).abs() <= 1e-10, "H={h} ({lo},{hi}): q {q} vs {mass}");
            assert!(((x - first / mass) / x).abs() <= 1e-10, "H={h}: x {x} vs {}", first / mass);
            assert!(lo < x && x < hi);
        }
    }
}

#[test]
fn rescaled_terminal_variance_is_one_on_lattice() {
    for k in 1..20 {
        let h = 0.05 * k as f64;
        if (h - 0.5).abs() < 1e-9 {
            continue;
        }
        for &(m, r) in &[(8usize, 1.5), (40, 1.35)] {
            let g = SpaceGrid::build(HurstIndex::new(h).unwrap(), m, r, 1.0).unwrap();
            let kernel = |s: f64| g.kernel(1.0, s).powi(2);
            // kernel² has a boundary layer of width 1/(2 x_max) at s = 1
            let var = adaptive(&kernel, 0.0, 0.9, 1e-14) + adaptive(&kernel, 0.9, 1.0, 1e-14);
            assert!((var - 1.0).abs() <= 1e-6, "H={h} m={m}: {var}");
            assert!((g.covariance(1.0, 1.0) - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn default_grids_have_unit_variance() {
    for h in [0.1, 0.9] {
        let g = SpaceGrid::<f64>::with_defaults(HurstIndex::new(h).unwrap(), 1.0).unwrap();
        assert_eq!(g.m, 40);
        assert!((g.covariance(1.0, 1.0) - 1.0).abs() <= 1e-6);
        for (i, w) in g.eta.windows(2).enumerate() {
            assert!(w[0] < g.x[i] && g.x[i] < w[1]);
            assert_eq!(g.q[i], g.q_raw[i] / g.rescale_a);
        }
        assert!(g.x.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn covariance_closed_form_matches_quadrature_off_diagonal() {
    for h in [0.1, 0.75] {
        let g = SpaceGrid::build(HurstIndex::new(h).unwrap(), 40, 1.35, 1.0).unwrap();
        let f = |u: f64| g.kernel(0.5, u) * g.kernel(1.0, u);
        let want = adaptive(&f, 0.0, 0.45, 1e-14) + adaptive(&f, 0.45, 0.5, 1e-14);
        assert!((g.covariance(0.5, 1.0) - want).abs() < 1e-9, "H={h}");
    }
}

#[test]
fn brownian_grid_variance_is_t() {
    let g = SpaceGrid::build(HurstIndex::new(0.5).unwrap(), 40, 1.35, 1.0).unwrap();
    for t in [0.0, 0.25, 0.7, 1.0] {
        assert_eq!(g.covariance(t, t), t);
    }
}

proptest! {
    #[test]
    fn node_lies_inside_interval(h in 0.01f64..0.99, lo in 1e-3f64..100.0, ratio in 1.0001f64..3.0) {
        prop_assume!((h - 0.5).abs() > 1e-6);
        let (x, q) = node_and_weight(HurstIndex::new(h).unwrap(), lo, lo * ratio).unwrap();
        prop_assert!(lo < x && x < lo * ratio);
        prop_assert!(q > 0.0);
    }

    #[test]
    fn variance_scales_quadratically_in_weights(h in 0.05f64..0.95, kappa in 0.1f64..10.0) {
        prop_assume!((h - 0.5).abs() > 1e-3);
        let hi = HurstIndex::new(h).unwrap();
        let g = SpaceGrid::build(hi, 8, 1.5, 1.0).unwrap();
        let scaled: Vec<f64> = g.q_raw.iter().map(|q| kappa * q).collect();
        let a = kernel_covariance(hi, &g.x, &g.q_raw, 1.0, 1.0);
        let b = kernel_covariance(hi, &g.x, &scaled, 1.0, 1.0);
        prop_assert!((b / a - kappa * kappa).abs() < 1e-10 * kappa * kappa);
    }
}
