//! Toy datasets, standardisation and CSV point IO.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::rng::{normal, substream};
use crate::scalar::Scalar;
use crate::score::ScoreFn;
use crate::tables::KernelTables;

/// Per-coordinate affine map to zero mean, unit (population) std.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], std: vec![T::one(); dim] }
    }

    pub fn fit(points: ArrayView2<T>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid("cannot standardise an empty point set");
        }
        let mean = points.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std: Vec<T> = points.std_axis(Axis(0), T::zero()).to_vec();
        if std.iter().any(|&s| !(s > T::zero())) {
            return invalid("a coordinate has zero spread");
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, points: ArrayView2<T>) -> Array2<T> {
        let mut out = points.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, points: ArrayView2<T>) -> Array2<T> {
        let mut out = points.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Standardised points with the map back to data units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub seed: u64,
    pub points: Array2<T>,
    pub standardizer: Standardizer<T>,
}

/// Two interleaved unit half circles: (cos θ, sin θ) and (1 − cos θ, 0.5 − sin θ),
/// θ ~ U[0, π], plus N(0, noise_std²) jitter. The first moon gets ⌊n/2⌋ points.
pub fn raw_half_moons<T: Scalar>(n: usize, noise_std: T, seed: u64) -> Result<Array2<T>> {
    if n == 0 || noise_std < T::zero() {
        return invalid("half moons need n >= 1 and noise_std >= 0");
    }
    let mut rng = substream(seed, 0);
    let n_first = n / 2;
    let mut pts = Array2::zeros((n, 2));
    for r in 0..n {
        let th = T::PI() * T::of(rng.random::<f64>());
        let (x, y) = if r < n_first {
            (th.cos(), th.sin())
        } else {
            (T::one() - th.cos(), T::of(0.5) - th.sin())
        };
        pts[[r, 0]] = x + noise_std * normal::<T>(&mut rng);
        pts[[r, 1]] = y + noise_std * normal::<T>(&mut rng);
    }
    Ok(pts)
}

pub fn half_moons<T: Scalar>(n: usize, noise_std: T, seed: u64) -> Result<Dataset<T>> {
    let raw = raw_half_moons(n, noise_std, seed)?;
    let standardizer = Standardizer::fit(raw.view())?;
    Ok(Dataset { name: "half_moons".into(), seed, points: standardizer.apply(raw.view()), standardizer })
}

/// Standard normal points in `dim` dimensions (identity standardiser).
pub fn gaussian_reference<T: Scalar>(n: usize, dim: usize, seed: u64) -> Dataset<T> {
    let mut rng = substream(seed, 0);
    Dataset {
        name: "gaussian".into(),
        seed,
        points: Array2::from_shape_fn((n, dim), |_| normal::<T>(&mut rng)),
        standardizer: Standardizer::identity(dim),
    }
}

/// Exact marginal score of X_t when x0 ~ N(0, I): −x/(c²(t) + σ²_t).
pub struct GaussianScore<'a, T> {
    pub tables: &'a KernelTables<T>,
}

impl<T: Scalar> GaussianScore<'_, T> {
    fn var(&self, t: T) -> T {
        let c = self.tables.schedule.c(t);
        c * c + self.tables.sigma2_at(t)
    }

    /// log p_t(x) of the isotropic Gaussian marginal.
    pub fn log_density(&self, x: &[T], t: T) -> T {
        let v = self.var(t);
        let d = T::of(x.len() as f64);
        let sq: T = x.iter().map(|&a| a * a).sum();
        -T::of(0.5) * (sq / v + d * (T::of(2.0) * T::PI() * v).ln())
    }
}

impl<T: Scalar> ScoreFn<T> for GaussianScore<'_, T> {
    fn score(&self, x: ArrayView2<T>, t: T) -> Result<Array2<T>> {
        let v = self.var(t);
        Ok(x.mapv(|a| -a / v))
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

/// Reads a point CSV with a header row; a leading `sample_id` column is dropped.
pub fn read_points_csv<R: Read>(input: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let skip = usize::from(header.get(0) == Some("sample_id"));
    let dim = header.len() - skip;
    if dim == 0 {
        return Err(Error::Parse { line: 1, msg: "header has no coordinate columns".into() });
    }
    let mut vals = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        for field in rec.iter().skip(skip) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("not a number: `{field}`") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite value `{field}`") });
            }
            vals.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), vals).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

/// Writes `dim_0,dim_1,...` (optionally preceded by `sample_id`).
pub fn write_points_csv<T: Scalar, W: Write>(points: ArrayView2<T>, with_ids: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header: Vec<String> = (0..points.ncols()).map(|j| format!("dim_{j}")).collect();
    if with_ids {
        header.insert(0, "sample_id".into());
    }
    w.write_record(&header).map_err(io)?;
    for (i, row) in points.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if with_ids {
            rec.insert(0, i.to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_points_lie_on_the_half_circles() {
        let raw = raw_half_moons::<f64>(4, 0.0, 3).unwrap();
        for r in 0..4 {
            let (x, y) = (raw[[r, 0]], raw[[r, 1]]);
            if r < 2 {
                assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-14 && y >= 0.0);
            } else {
                let (u, v) = (x - 1.0, y - 0.5);
                assert!(((u * u + v * v).sqrt() - 1.0).abs() < 1e-14 && y <= 0.5);
            }
        }
    }

    #[test]
    fn standardisation_contract() {
        let ds = half_moons::<f64>(10_000, 0.08, 1).unwrap();
        let mean = ds.points.mean_axis(Axis(0)).unwrap();
        let std = ds.points.std_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!(mean[j].abs() < 1e-9 && (std[j] - 1.0).abs() < 1e-9);
        }
        let raw = raw_half_moons::<f64>(10_000, 0.08, 1).unwrap();
        let back = ds.standardizer.invert(ds.points.view());
        assert!(raw.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip_and_line_numbers() {
        let pts = ndarray::array![[0.1, -2.5], [3.0, 1e-17]];
        let mut buf = Vec::new();
        write_points_csv(pts.view(), true, &mut buf).unwrap();
        assert_eq!(read_points_csv(buf.as_slice()).unwrap(), pts);
        let bad = "dim_0,dim_1\n1,2\n3,x\n";
        match read_points_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ragged = "dim_0,dim_1\n1,2\n3\n";
        assert!(matches!(read_points_csv(ragged.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }
}
