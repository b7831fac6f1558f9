//! Sample statistics, two-sample tests and structure metrics.
//!
//! Covariance spectra are taken over the flattened field (all channels and
//! pixels). Edge correlation is the Pearson correlation of central-difference
//! gradient magnitude maps, averaged over channels.

use crate::error::{Error, Result};
use crate::grid::{central_gradient, encode_pnm, Field, Shape};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Largest matrix side handled by a dense eigendecomposition.
pub const MAX_DENSE_SPECTRUM: usize = 4096;
/// Number of leading covariance eigenvalues reported.
pub const TOP_EIGENVALUES: usize = 64;
/// Histogram bins on `[-1, 1]`.
pub const HISTOGRAM_BINS: usize = 64;

const SUBSPACE_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub count: usize,
    pub mean: Field,
    /// Leading covariance eigenvalues, descending.
    pub top_eigenvalues: Vec<f64>,
    /// Per-channel value histograms; values outside `[-1, 1]` fall into the
    /// edge bins, so each histogram sums to 1.
    pub histograms: Vec<Vec<f64>>,
}

fn check_samples(samples: &[Field]) -> Result<Shape> {
    let first = samples.first().ok_or_else(|| Error::EmptyInput("samples".into()))?;
    let shape = first.shape();
    for s in samples {
        if s.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: s.shape(),
            });
        }
    }
    Ok(shape)
}

pub fn moments(samples: &[Field]) -> Result<MomentReport> {
    moments_with_limit(samples, MAX_DENSE_SPECTRUM)
}

fn moments_with_limit(samples: &[Field], dense_limit: usize) -> Result<MomentReport> {
    let shape = check_samples(samples)?;
    let n = samples.len();
    let d = shape.len();
    let mut mean = Field::zeros(shape);
    for s in samples {
        mean.add_scaled(1.0, s);
    }
    mean.scale(1.0 / n as f64);
    let centered = DMatrix::from_fn(d, n, |i, j| samples[j].values()[i] - mean.values()[i]);
    let k = TOP_EIGENVALUES.min(d);
    let top_eigenvalues = top_covariance_eigenvalues(&centered, k, dense_limit);
    let mut histograms = vec![vec![0.0; HISTOGRAM_BINS]; shape.channels];
    for s in samples {
        for (c, hist) in histograms.iter_mut().enumerate() {
            for &v in s.channel(c) {
                let b = ((v + 1.0) * 0.5 * HISTOGRAM_BINS as f64).floor();
                let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(HISTOGRAM_BINS - 1) };
                hist[b] += 1.0;
            }
        }
    }
    let per_channel = (n * shape.pixels()) as f64;
    for hist in &mut histograms {
        hist.iter_mut().for_each(|h| *h /= per_channel);
    }
    Ok(MomentReport {
        count: n,
        mean,
        top_eigenvalues,
        histograms,
    })
}

/// Leading `k` eigenvalues of `X Xᵀ / (n − 1)` for centered columns `X`.
fn top_covariance_eigenvalues(x: &DMatrix<f64>, k: usize, dense_limit: usize) -> Vec<f64> {
    let (d, n) = x.shape();
    let scale = 1.0 / (n.max(2) - 1) as f64;
    let mut eig: Vec<f64> = if d <= dense_limit || n <= dense_limit {
        // the nonzero spectrum of X Xᵀ equals that of Xᵀ X
        let gram = if d <= n { x * x.transpose() } else { x.transpose() * x };
        SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v * scale).collect()
    } else {
        subspace_iteration(x, k).into_iter().map(|v| v * scale).collect()
    };
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.resize(k, 0.0);
    eig.iter_mut().for_each(|v| *v = v.max(0.0));
    eig
}

/// Block power iteration on `X Xᵀ` followed by a Rayleigh-Ritz projection.
fn subspace_iteration(x: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let d = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut q = DMatrix::from_fn(d, k, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    for _ in 0..SUBSPACE_ITERATIONS {
        let y = x * (x.transpose() * &q);
        q = y.qr().q();
    }
    let xq = x.transpose() * &q;
    let small = xq.transpose() * xq;
    SymmetricEigen::new(small).eigenvalues.iter().copied().collect()
}

fn flat_sq_dist(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Kernel matrix of the pooled sample `a ++ b` with `k = exp(−‖x − y‖² / (2h²))`,
/// `h²` the median pooled squared distance.
fn pooled_kernel(a: &[Field], b: &[Field]) -> Result<(DMatrix<f64>, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("MMD needs at least two samples per set".into()));
    }
    let pooled: Vec<&Field> = a.iter().chain(b).collect();
    let shape = pooled[0].shape();
    for f in &pooled {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: f.shape(),
            });
        }
    }
    let m = pooled.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| (0..m).map(|j| flat_sq_dist(pooled[i], pooled[j])).collect())
        .collect();
    let upper: Vec<f64> = (0..m).flat_map(|i| rows[i][i + 1..].iter().copied()).collect();
    let h2 = median(upper);
    let h2 = if h2 > 0.0 { h2 } else { 1.0 };
    let k = DMatrix::from_fn(m, m, |i, j| (-rows[i][j] / (2.0 * h2)).exp());
    Ok((k, h2))
}

/// Unbiased MMD² between the index sets `x` and `y` of the pooled kernel.
fn mmd_from_kernel(k: &DMatrix<f64>, x: &[usize], y: &[usize]) -> f64 {
    let within = |idx: &[usize]| {
        let mut s = 0.0;
        for (p, &i) in idx.iter().enumerate() {
            for &j in &idx[p + 1..] {
                s += k[(i, j)];
            }
        }
        2.0 * s / (idx.len() * (idx.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &i in x {
        for &j in y {
            cross += k[(i, j)];
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

/// Unbiased MMD² with a Gaussian kernel at the median-heuristic bandwidth,
/// clamped at 0.
pub fn mmd_rbf(a: &[Field], b: &[Field]) -> Result<f64> {
    let (k, _) = pooled_kernel(a, b)?;
    let x: Vec<usize> = (0..a.len()).collect();
    let y: Vec<usize> = (a.len()..a.len() + b.len()).collect();
    Ok(mmd_from_kernel(&k, &x, &y).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdTest {
    pub statistic: f64,
    /// 95th percentile of the permutation null.
    pub null_quantile_95: f64,
    /// Fraction of permutations with a statistic at least as large.
    pub p_value: f64,
    pub bandwidth_sq: f64,
}

/// [`mmd_rbf`] together with its permutation null. The bandwidth is fixed
/// from the pooled sample, so every permutation uses the same kernel.
pub fn mmd_permutation_test(a: &[Field], b: &[Field], permutations: usize, seed: u64) -> Result<MmdTest> {
    let (k, bandwidth_sq) = pooled_kernel(a, b)?;
    let na = a.len();
    let m = na + b.len();
    let x: Vec<usize> = (0..na).collect();
    let y: Vec<usize> = (na..m).collect();
    let statistic = mmd_from_kernel(&k, &x, &y).max(0.0);
    let mut null: Vec<f64> = (0..permutations as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p);
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            mmd_from_kernel(&k, &idx[..na], &idx[na..]).max(0.0)
        })
        .collect();
    null.sort_by(|a, b| a.total_cmp(b));
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let null_quantile_95 = if null.is_empty() {
        f64::INFINITY
    } else {
        null[((0.95 * null.len() as f64).ceil() as usize).clamp(1, null.len()) - 1]
    };
    Ok(MmdTest {
        statistic,
        null_quantile_95,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        bandwidth_sq,
    })
}

fn gradient_magnitude(chan: &[f64], n1: usize, n2: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n1 * n2);
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            let (g1, g2) = central_gradient(chan, n1, n2, i1, i2);
            out.push((g1 * g1 + g2 * g2).sqrt());
        }
    }
    out
}

/// Pearson correlation of gradient magnitude maps, averaged over channels.
///
/// A channel where exactly one map is constant contributes 0; channels where
/// both are constant are skipped, and an error is returned if all are.
pub fn edge_correlation(a: &Field, b: &Field) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let shape = a.shape();
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..shape.channels {
        let ga = gradient_magnitude(a.channel(c), shape.height, shape.width);
        let gb = gradient_magnitude(b.channel(c), shape.height, shape.width);
        let n = ga.len() as f64;
        let ma = ga.iter().sum::<f64>() / n;
        let mb = gb.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in ga.iter().zip(&gb) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        match (saa > 0.0, sbb > 0.0) {
            (false, false) => continue,
            (true, true) => total += (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
            _ => {}
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(total / used as f64)
}

/// One labelled row of a montage.
#[derive(Clone, Debug)]
pub struct MontageRow {
    pub label: String,
    pub tiles: Vec<Field>,
}

/// Value of the 1-pixel separators.
const SEPARATOR: f64 = 1.0;

/// Lays rows of equally shaped tiles on one canvas with 1-pixel separators.
/// Single-channel tiles are replicated to three channels.
pub fn montage_canvas(rows: &[MontageRow]) -> Result<Field> {
    let first = rows
        .iter()
        .find_map(|r| r.tiles.first())
        .ok_or_else(|| Error::EmptyInput("montage tiles".into()))?;
    let tile = first.shape();
    if tile.channels != 1 && tile.channels != 3 {
        return Err(Error::InvalidArgument(format!("tiles need 1 or 3 channels, got {}", tile.channels)));
    }
    let cols = rows[0].tiles.len();
    for r in rows {
        if r.tiles.len() != cols {
            return Err(Error::InvalidArgument(format!(
                "row '{}' has {} tiles, expected {cols}",
                r.label,
                r.tiles.len()
            )));
        }
        for t in &r.tiles {
            if t.shape() != tile {
                return Err(Error::ShapeMismatch {
                    expected: tile,
                    actual: t.shape(),
                });
            }
        }
    }
    let height = rows.len() * tile.height + rows.len() - 1;
    let width = cols * tile.width + cols - 1;
    let mut canvas = Field::filled(Shape::new(3, height, width), SEPARATOR);
    for (r, row) in rows.iter().enumerate() {
        for (q, t) in row.tiles.iter().enumerate() {
            let o1 = r * (tile.height + 1);
            let o2 = q * (tile.width + 1);
            for c in 0..3 {
                let src = if tile.channels == 1 { 0 } else { c };
                for i1 in 0..tile.height {
                    for i2 in 0..tile.width {
                        canvas.set(c, o1 + i1, o2 + i2, t.get(src, i1, i2));
                    }
                }
            }
        }
    }
    Ok(canvas)
}

/// Writes the montage as PPM to `path` and the row labels to `index_path`,
/// one `row label` line per row.
pub fn montage(rows: &[MontageRow], path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Shape> {
    let canvas = montage_canvas(rows)?;
    std::fs::write(path, encode_pnm(&canvas)?)?;
    let mut index = std::fs::File::create(index_path)?;
    writeln!(index, "# row label")?;
    for (r, row) in rows.iter().enumerate() {
        writeln!(index, "{r} {}", row.label)?;
    }
    Ok(canvas.shape())
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn write_metrics_csv(records: &[MetricRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "metric,value,n,seed")?;
    for r in records {
        writeln!(f, "{},{:.10e},{},{}", r.metric, r.value, r.n, r.seed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::RngStream;
    use proptest::prelude::*;

    fn normal_samples(n: usize, shape: Shape, shift: f64, seed: u64) -> Vec<Field> {
        let mut rng = RngStream::new(seed, 0);
        (0..n).map(|_| rng.standard_normal(shape).map(|v| v + shift)).collect()
    }

    #[test]
    fn identical_samples_have_zero_spectrum() {
        let x = Field::from_fn(Shape::new(1, 3, 3), |_, a, b| (a + b) as f64 * 0.1);
        let r = moments(&vec![x.clone(); 5]).unwrap();
        assert!(r.top_eigenvalues.iter().all(|v| v.abs() < 1e-14));
        assert!(r.mean.max_abs_diff(&x) < 1e-15);
        assert_eq!(r.top_eigenvalues.len(), 9);
    }

    #[test]
    fn white_noise_spectrum_near_one() {
        let r = moments(&normal_samples(10_000, Shape::new(1, 4, 4), 0.0, 1)).unwrap();
        assert!((0.8..=1.25).contains(&r.top_eigenvalues[0]), "{}", r.top_eigenvalues[0]);
        for h in &r.histograms {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_has_zero_mean() {
        let x = Field::from_fn(Shape::new(2, 2, 3), |c, a, b| (c + a * 2 + b) as f64 - 2.5);
        let r = moments(&[x.scaled(-1.0), x]).unwrap();
        assert!(r.mean.max_abs() < 1e-15);
    }

    #[test]
    fn iterative_spectrum_matches_dense() {
        let shape = Shape::new(1, 4, 5);
        let mut rng = RngStream::new(8, 0);
        // anisotropic data with a clear spectral gap
        let samples: Vec<Field> = (0..60)
            .map(|_| {
                let z = rng.standard_normal(shape);
                Field::from_fn(shape, |c, a, b| z.get(c, a, b) * (1.0 + 3.0 * ((a * 5 + b) < 3) as u8 as f64))
            })
            .collect();
        let dense = moments(&samples).unwrap();
        let iterative = moments_with_limit(&samples, 10).unwrap();
        for (a, b) in dense.top_eigenvalues.iter().zip(&iterative.top_eigenvalues).take(3) {
            assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn empty_moments_fail() {
        assert!(matches!(moments(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let a = normal_samples(50, Shape::new(1, 1, 3), 0.0, 2);
        assert!(mmd_rbf(&a, &a).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn mmd_detects_shift() {
        let shape = Shape::new(1, 1, 1);
        let a = normal_samples(500, shape, 0.0, 3);
        let b = normal_samples(500, shape, 3.0, 4);
        let v = mmd_rbf(&a, &b).unwrap();
        assert!(v > 0.5, "{v}");
        let a2 = normal_samples(500, shape, 0.0, 5);
        assert!(mmd_rbf(&a, &a2).unwrap() < v);
    }

    #[test]
    fn mmd_needs_two_samples() {
        let a = normal_samples(1, Shape::new(1, 1, 1), 0.0, 2);
        let b = normal_samples(4, Shape::new(1, 1, 1), 0.0, 3);
        assert!(mmd_rbf(&a, &b).is_err());
    }

    #[test]
    fn permutation_test_separates_null_and_shift() {
        let shape = Shape::new(1, 1, 2);
        let a = normal_samples(100, shape, 0.0, 6);
        let same = normal_samples(100, shape, 0.0, 7);
        let shifted = normal_samples(100, shape, 1.0, 8);
        let t0 = mmd_permutation_test(&a, &same, 200, 1).unwrap();
        let t1 = mmd_permutation_test(&a, &shifted, 200, 1).unwrap();
        assert!(t0.statistic < t0.null_quantile_95);
        assert!(t1.statistic > t1.null_quantile_95);
        assert!(t1.p_value < 0.01);
        assert_eq!(t0, mmd_permutation_test(&a, &same, 200, 1).unwrap());
    }

    proptest! {
        #[test]
        fn mmd_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..20) {
            let shape = Shape::new(1, 1, 2);
            let a = normal_samples(20, shape, 0.0, seed);
            let b = normal_samples(20, shape, 0.5, seed + 1);
            let mut a2 = a.clone();
            a2.rotate_left(rot);
            let mut b2 = b.clone();
            b2.reverse();
            let v1 = mmd_rbf(&a, &b).unwrap();
            let v2 = mmd_rbf(&a2, &b2).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-12);
        }

        #[test]
        fn edge_correlation_is_symmetric(seed in 0u64..1000) {
            let shape = Shape::new(1, 6, 7);
            let mut rng = RngStream::new(seed, 0);
            let a = rng.standard_normal(shape);
            let b = rng.standard_normal(shape);
            let v = edge_correlation(&a, &b).unwrap();
            prop_assert!((v - edge_correlation(&b, &a).unwrap()).abs() < 1e-14);
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn edge_correlation_of_field_with_itself_is_one() {
        let x = Field::from_fn(Shape::new(3, 8, 8), |c, a, b| ((a * b + c) as f64 * 0.3).sin());
        assert!((edge_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_has_small_edge_correlation() {
        let shape = Shape::new(1, 64, 64);
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 0);
            let a = rng.standard_normal(shape);
            let b = rng.standard_normal(shape);
            assert!(edge_correlation(&a, &b).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn rotated_step_edge_correlates_below_one() {
        let n = 16;
        let shape = Shape::new(1, n, n);
        let step = Field::from_fn(shape, |_, _, b| if b < n / 2 { -1.0 } else { 1.0 });
        let rotated = Field::from_fn(shape, |_, a, _| if a < n / 2 { -1.0 } else { 1.0 });
        assert!(edge_correlation(&step, &rotated).unwrap() < 1.0);
    }

    #[test]
    fn constant_fields_have_undefined_correlation() {
        let a = Field::filled(Shape::new(1, 4, 4), 0.2);
        let b = Field::filled(Shape::new(1, 4, 4), -0.5);
        assert!(matches!(edge_correlation(&a, &b), Err(Error::UndefinedCorrelation)));
    }

    fn tile(v: f64) -> Field {
        Field::filled(Shape::new(1, 64, 64), v)
    }

    #[test]
    fn montage_layout() {
        let rows: Vec<MontageRow> = (0..5)
            .map(|r| MontageRow {
                label: format!("row{r}"),
                tiles: (0..5).map(|q| tile(-0.5 + 0.1 * (r + q) as f64)).collect(),
            })
            .collect();
        let canvas = montage_canvas(&rows).unwrap();
        assert_eq!((canvas.height(), canvas.width()), (324, 324));
        assert_eq!(canvas.get(0, 64, 10), SEPARATOR);
        assert_eq!(canvas.get(1, 65, 65), -0.5 + 0.2);
        let dir = tempfile::tempdir().unwrap();
        let shape = montage(&rows, dir.path().join("m.ppm"), dir.path().join("m.txt")).unwrap();
        assert_eq!(shape, Shape::new(3, 324, 324));
        let index = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
        assert!(index.contains("4 row4"));
    }

    #[test]
    fn single_tile_montage_is_the_tile() {
        let t = Field::from_fn(Shape::new(1, 5, 4), |_, a, b| (a as f64 - b as f64) * 0.1);
        let rows = [MontageRow {
            label: "only".into(),
            tiles: vec![t.clone()],
        }];
        let canvas = montage_canvas(&rows).unwrap();
        assert_eq!(canvas.shape(), Shape::new(3, 5, 4));
        for c in 0..3 {
            assert_eq!(canvas.channel(c), t.channel(0));
        }
    }

    #[test]
    fn mismatched_tile_is_rejected() {
        let rows = [MontageRow {
            label: "bad".into(),
            tiles: vec![tile(0.0), Field::zeros(Shape::new(1, 32, 64))],
        }];
        assert!(matches!(montage_canvas(&rows), Err(Error::ShapeMismatch { .. })));
    }
}
