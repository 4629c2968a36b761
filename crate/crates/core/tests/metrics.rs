use gfdm::datasets::half_moons;
use gfdm::metrics::{evaluate, improved_precision_recall, sliced_wasserstein, vendi_score, Bandwidth, MetricConfig};
use gfdm::rng::{normal, substream};
use ndarray::{Array2, Axis};

fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
    let mut rng = substream(seed, 0);
    Array2::from_shape_fn((n, d), |_| shift + normal::<f64>(&mut rng))
}

/// Independent double-loop precision: fraction of `q` inside some k-NN ball of `s`.
fn brute_coverage(s: &Array2<f64>, q: &Array2<f64>, k: usize) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let rows_s: Vec<Vec<f64>> = s.rows().into_iter().map(|r| r.to_vec()).collect();
    let radius: Vec<f64> = rows_s
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = rows_s.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| dist(a, b)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let hits = q
        .rows()
        .into_iter()
        .filter(|p| rows_s.iter().zip(&radius).any(|(a, &rad)| dist(a, p.as_slice().unwrap()) <= rad))
        .count();
    hits as f64 / q.nrows() as f64
}

#[test]
fn wasserstein_identity_shift_and_symmetry() {
    let a = gauss(500, 2, 0.0, 1);
    assert_eq!(sliced_wasserstein(a.view(), a.view(), 64, &mut substream(0, 0)).unwrap(), 0.0);

    let (p, q) = (gauss(100_000, 1, 0.0, 2), gauss(100_000, 1, 0.5, 3));
    let w = sliced_wasserstein(p.view(), q.view(), 4, &mut substream(0, 0)).unwrap();
    assert!((w - 0.5).abs() <= 0.02, "{w}");

    let b = gauss(300, 2, 0.3, 4);
    let ab = sliced_wasserstein(a.view(), b.view(), 32, &mut substream(7, 0)).unwrap();
    let ba = sliced_wasserstein(b.view(), a.view(), 32, &mut substream(7, 0)).unwrap();
    assert_eq!(ab, ba);
    assert!(sliced_wasserstein(a.view(), gauss(5, 3, 0.0, 0).view(), 8, &mut substream(0, 0)).is_err());
}

#[test]
fn precision_recall_reference_cases() {
    let real = gauss(400, 2, 0.0, 5);
    assert_eq!(improved_precision_recall(real.view(), real.view(), 3).unwrap(), (1.0, 1.0));

    let collapsed = Array2::from_shape_fn((400, 2), |(_, j)| real[[17, j]]);
    let (ip, ir) = improved_precision_recall(real.view(), collapsed.view(), 3).unwrap();
    assert_eq!(ip, 1.0);
    assert_eq!(ir, brute_coverage(&collapsed, &real, 3));
    assert!(ir < 0.01);

    let far = gauss(400, 2, 100.0, 6);
    assert_eq!(improved_precision_recall(real.view(), far.view(), 3).unwrap(), (0.0, 0.0));
    assert!(improved_precision_recall(real.view(), gauss(3, 2, 0.0, 1).view(), 3).is_err());
}

#[test]
fn precision_recall_match_double_loop() {
    for seed in 0..5 {
        let real = gauss(50, 2, 0.0, 10 + seed);
        let gen = gauss(40, 2, 0.4, 20 + seed);
        let (ip, ir) = improved_precision_recall(real.view(), gen.view(), 3).unwrap();
        assert_eq!(ip, brute_coverage(&real, &gen, 3));
        assert_eq!(ir, brute_coverage(&gen, &real, 3));
    }
}

#[test]
fn vendi_reference_cases() {
    let same = Array2::from_elem((20, 2), 0.7);
    assert!((vendi_score(same.view(), Bandwidth::Fixed(1.0)).unwrap() - 1.0).abs() < 1e-9);

    let spread = Array2::from_shape_fn((15, 2), |(i, j)| if j == 0 { 100.0 * i as f64 } else { 0.0 });
    assert!((vendi_score(spread.view(), Bandwidth::Fixed(1.0)).unwrap() - 15.0).abs() < 1e-9);

    let mut two = gauss(200, 2, 0.0, 7) * 0.1;
    two.slice_mut(ndarray::s![100.., 0]).mapv_inplace(|v| v + 50.0);
    let vs = vendi_score(two.view(), Bandwidth::Fixed(1.0)).unwrap();
    let one = gauss(200, 2, 0.0, 7) * 0.1;
    let merged = vendi_score(one.view(), Bandwidth::Fixed(1.0)).unwrap();
    assert!((vs - 2.0 * merged).abs() < 0.05 * merged, "{vs} vs 2 x {merged}");
    assert!(merged < vs);
    assert!(vendi_score(two.view(), Bandwidth::MedianHeuristic).unwrap() >= 1.0);
}

#[test]
fn two_tight_clusters_give_two() {
    let mut two = gauss(200, 2, 0.0, 8) * 1e-3;
    two.slice_mut(ndarray::s![100.., 1]).mapv_inplace(|v| v + 30.0);
    let vs = vendi_score(two.view(), Bandwidth::Fixed(1.0)).unwrap();
    assert!((vs - 2.0).abs() <= 0.05, "{vs}");
}

#[test]
fn metrics_are_permutation_invariant() {
    let real = gauss(300, 2, 0.0, 1);
    let gen = gauss(300, 2, 0.2, 2);
    let perm: Vec<usize> = (0..300).rev().collect();
    let gen_p = gen.select(Axis(0), &perm);
    let cfg = MetricConfig { n_slices: 16, ..MetricConfig::default() };
    let a = evaluate(real.view(), gen.view(), &cfg).unwrap();
    let b = evaluate(real.view(), gen_p.view(), &cfg).unwrap();
    assert_eq!((a.ip, a.ir), (b.ip, b.ir));
    assert!((a.wsd - b.wsd).abs() < 1e-12);
    assert!((a.vs - b.vs).abs() < 1e-9);
}

#[test]
fn half_moon_data_against_itself() {
    let a = half_moons::<f64>(2000, 0.08, 1).unwrap();
    let b = half_moons::<f64>(2000, 0.08, 2).unwrap();
    let (ra, rb) = (a.standardizer.invert(a.points.view()), b.standardizer.invert(b.points.view()));
    let rep = evaluate(ra.view(), rb.view(), &MetricConfig::default()).unwrap();
    assert!(rep.wsd < 0.05 && rep.ip > 0.95 && rep.ir > 0.95, "{rep}");
    assert!(rep.vs > 1.7 && rep.vs < 2.0, "{rep}");
}
