use gfdm::datasets::{gaussian_reference, half_moons, GaussianScore};
use gfdm::score::ScoreFn;
use gfdm::{HurstIndex, KernelTables, Schedule, ScheduleKind, SpaceGrid, TableSpec};
use ndarray::array;

fn tables(h: f64) -> KernelTables<f64> {
    let grid = SpaceGrid::with_defaults(HurstIndex::new(h).unwrap(), 1.0).unwrap();
    KernelTables::build_normalized(&Schedule::new(ScheduleKind::Fvp), &grid, TableSpec::default()).unwrap()
}

#[test]
fn standardiser_statistics_are_seed_stable() {
    let n = 10_000;
    let a = half_moons::<f64>(n, 0.08, 1).unwrap();
    let b = half_moons::<f64>(n, 0.08, 2).unwrap();
    assert_ne!(a.points, b.points);
    for j in 0..2 {
        let (sa, sb) = (a.standardizer.std[j], b.standardizer.std[j]);
        // std errors of the difference of two independent estimates (Gaussian approximation for the std)
        let se_mean = sa * (2.0 / n as f64).sqrt();
        let se_std = sa * (1.0 / n as f64).sqrt();
        assert!((a.standardizer.mean[j] - b.standardizer.mean[j]).abs() < 3.0 * se_mean);
        assert!((sa - sb).abs() < 3.0 * se_std);
    }
}

#[test]
fn gaussian_score_closed_form() {
    let tab = tables(0.25);
    let g = GaussianScore { tables: &tab };
    for t in [0.01, 0.5, 1.0] {
        assert!(g.score(array![[0.0, 0.0]].view(), t).unwrap().iter().all(|&v| v == 0.0));
    }
    let c = tab.schedule.c(1.0);
    let s = g.score(array![[1.5, -0.5]].view(), 1.0).unwrap();
    let v = c * c + tab.sigma2_at(1.0);
    assert!((s[[0, 0]] + 1.5 / v).abs() < 1e-15 && (s[[0, 1]] - 0.5 / v).abs() < 1e-15);
}

#[test]
fn gaussian_score_is_gradient_of_log_density() {
    let tab = tables(0.1);
    let g = GaussianScore { tables: &tab };
    let h = 1e-5;
    for t in [0.05, 0.4, 1.0] {
        let x = [0.7, -1.3];
        let s = g.score(array![[x[0], x[1]]].view(), t).unwrap();
        for j in 0..2 {
            let (mut up, mut dn) = (x, x);
            up[j] += h;
            dn[j] -= h;
            let fd = (g.log_density(&up, t) - g.log_density(&dn, t)) / (2.0 * h);
            assert!((fd - s[[0, j]]).abs() < 1e-8, "{fd} {}", s[[0, j]]);
        }
    }
}

#[test]
fn gaussian_reference_is_standard_normal() {
    let ds = gaussian_reference::<f64>(50_000, 2, 4);
    let n = 50_000.0f64;
    for col in ds.points.columns() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt() && (var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }
}
