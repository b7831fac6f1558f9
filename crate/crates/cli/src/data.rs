//! Desk-scale datasets and guide images.
//!
//! Every generated image is a pure function of `(seed, stream)`, so datasets
//! are identical across runs and thread counts. Training data, held-out
//! references and guides use disjoint stream ranges.

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Context, Result};
use asgm_core::grid::read_image;
use asgm_core::{Field, RngStream, Shape};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use std::path::Path;

/// First stream of each purpose.
pub const TRAIN_STREAMS: u64 = 1 << 40;
pub const REFERENCE_STREAMS: u64 = 2 << 40;
pub const GUIDE_STREAMS: u64 = 3 << 40;

const SUPERSAMPLING: usize = 4;

#[derive(Clone, Copy, Debug)]
enum Region {
    Disk { c: [f64; 2], r: f64 },
    Rect { lo: [f64; 2], hi: [f64; 2] },
    Triangle { v: [[f64; 2]; 3] },
}

impl Region {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Region::Disk { c, r } => (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r,
            Region::Rect { lo, hi } => (lo[0]..=hi[0]).contains(&p[0]) && (lo[1]..=hi[1]).contains(&p[1]),
            Region::Triangle { v } => {
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                let (d0, d1, d2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    /// Fraction of the unit pixel cell at `(i1, i2)` inside the region.
    fn coverage(&self, i1: usize, i2: usize) -> f64 {
        let mut hits = 0;
        for a in 0..SUPERSAMPLING {
            for b in 0..SUPERSAMPLING {
                let p = [
                    i1 as f64 + (a as f64 + 0.5) / SUPERSAMPLING as f64,
                    i2 as f64 + (b as f64 + 0.5) / SUPERSAMPLING as f64,
                ];
                hits += self.contains(p) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLING * SUPERSAMPLING) as f64
    }
}

fn paint(img: &mut Field, region: &Region, color: &[f64]) {
    let shape = img.shape();
    for i1 in 0..shape.height {
        for i2 in 0..shape.width {
            let w = region.coverage(i1, i2);
            if w == 0.0 {
                continue;
            }
            for (c, &col) in color.iter().enumerate() {
                let v = img.get(c, i1, i2);
                img.set(c, i1, i2, v * (1.0 - w) + col * w);
            }
        }
    }
}

/// One to three disks, rectangles or triangles in flat colors on a flat
/// background, anti-aliased by 4×4 supersampling.
pub fn shapes_image(shape: Shape, seed: u64, stream: u64) -> Field {
    let mut rng = RngStream::new(seed, stream).next_block();
    let (h, w) = (shape.height as f64, shape.width as f64);
    let s = h.min(w);
    let color = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..shape.channels).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let bg = color(&mut rng);
    let mut img = Field::from_fn(shape, |c, _, _| bg[c]);
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let region = match rng.random_range(0..3) {
            0 => Region::Disk {
                c: [rng.random_range(0.2..0.8) * h, rng.random_range(0.2..0.8) * w],
                r: rng.random_range(0.1..0.3) * s,
            },
            1 => {
                let c = [rng.random_range(0.2..0.8) * h, rng.random_range(0.2..0.8) * w];
                let half = [rng.random_range(0.08..0.3) * h, rng.random_range(0.08..0.3) * w];
                Region::Rect {
                    lo: [c[0] - half[0], c[1] - half[1]],
                    hi: [c[0] + half[0], c[1] + half[1]],
                }
            }
            _ => loop {
                let v: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(0.1..0.9) * h, rng.random_range(0.1..0.9) * w]);
                let area = 0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1])).abs();
                if area >= 0.04 * h * w {
                    break Region::Triangle { v };
                }
            },
        };
        let col = color(&mut rng);
        paint(&mut img, &region, &col);
    }
    img
}

/// A checkerboard of 8×8 squares overlaid with a centered disk.
pub fn checkerboard_with_disk(shape: Shape) -> Field {
    let cell_h = (shape.height / 8).max(1);
    let cell_w = (shape.width / 8).max(1);
    let mut img = Field::from_fn(shape, |_, a, b| if (a / cell_h + b / cell_w) % 2 == 0 { 0.6 } else { -0.6 });
    let disk = Region::Disk {
        c: [shape.height as f64 / 2.0, shape.width as f64 / 2.0],
        r: 0.3 * shape.height.min(shape.width) as f64,
    };
    paint(&mut img, &disk, &vec![0.9; shape.channels]);
    img
}

/// Smooth mean of the Gaussian dataset.
pub fn gaussian_mean(shape: Shape) -> Field {
    use std::f64::consts::PI;
    Field::from_fn(shape, |c, a, b| {
        0.5 * (PI * (a as f64 + 0.5) / shape.height as f64).sin() * (PI * (b as f64 + 0.5) / shape.width as f64).cos()
            + 0.1 * c as f64
    })
}

pub fn gaussian_image(shape: Shape, variance: f64, seed: u64, stream: u64) -> Field {
    let z = RngStream::new(seed, stream).standard_normal(shape);
    let mut x = gaussian_mean(shape);
    x.add_scaled(variance.sqrt(), &z);
    x
}

/// Lloyd's algorithm on pixel colors; every pixel is replaced by its
/// cluster centroid. Ties go to the lower cluster index and empty clusters
/// keep their centroid.
pub fn kmeans_quantize(img: &Field, k: usize, iterations: usize, seed: u64) -> Field {
    let shape = img.shape();
    let p = shape.pixels();
    let k = k.clamp(1, p);
    let point = |i: usize| -> Vec<f64> { (0..shape.channels).map(|c| img.channel(c)[i]).collect() };
    let mut rng = RngStream::new(seed, GUIDE_STREAMS - 1).next_block();
    let mut centroids: Vec<Vec<f64>> = sample_indices(&mut rng, p, k).into_iter().map(point).collect();
    let mut assign = vec![0usize; p];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            let x = point(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            let mut best = 0;
            for j in 1..k {
                if dist(&centroids[j]) < dist(&centroids[best]) {
                    best = j;
                }
            }
            *a = best;
        }
        let mut sums = vec![vec![0.0; shape.channels]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let mut out = img.clone();
    for c in 0..shape.channels {
        for (v, &a) in out.channel_mut(c).iter_mut().zip(&assign) {
            *v = centroids[a][c];
        }
    }
    out
}

/// All `.pgm` and `.ppm` files of `dir` in name order, with a common shape.
pub fn load_dir(dir: &Path) -> Result<Vec<Field>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Dataset(format!("no .pgm or .ppm images in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = read_image(p).context(|| format!("reading {}", p.display()))?;
        if let Some(first) = out.first().map(Field::shape) {
            if img.shape() != first {
                return Err(CliError::Dataset(format!(
                    "{} has shape {}, expected {first}",
                    p.display(),
                    img.shape()
                )));
            }
        }
        out.push(img);
    }
    Ok(out)
}

impl RunConfig {
    pub fn image_shape(&self) -> Shape {
        Shape::new(self.image_channels, self.image_size, self.image_size)
    }

    /// The configured training set; empty for `data.kind=none`.
    pub fn training_set(&self) -> Result<Vec<Field>> {
        let shape = self.image_shape();
        Ok(match &self.data {
            DataSource::None => Vec::new(),
            DataSource::Dir(dir) => load_dir(dir)?,
            DataSource::Shapes { count } => (0..*count as u64)
                .map(|i| shapes_image(shape, self.seed, TRAIN_STREAMS + i))
                .collect(),
            DataSource::Gaussian { count, variance } => (0..*count as u64)
                .map(|i| gaussian_image(shape, *variance, self.seed, TRAIN_STREAMS + i))
                .collect(),
        })
    }

    /// `reference.count` fresh draws from the data source, disjoint from the
    /// training set; empty for sources that cannot draw.
    pub fn reference_set(&self) -> Vec<Field> {
        let shape = self.image_shape();
        let n = self.reference_count as u64;
        match &self.data {
            DataSource::Shapes { .. } => (0..n).map(|i| shapes_image(shape, self.seed, REFERENCE_STREAMS + i)).collect(),
            DataSource::Gaussian { variance, .. } => (0..n)
                .map(|i| gaussian_image(shape, *variance, self.seed, REFERENCE_STREAMS + i))
                .collect(),
            DataSource::None | DataSource::Dir(_) => Vec::new(),
        }
    }

    /// Training set that must be nonempty.
    pub fn require_training_set(&self) -> Result<Vec<Field>> {
        let data = self.training_set()?;
        if data.is_empty() {
            return Err(CliError::Dataset("the configured dataset is empty".into()));
        }
        Ok(data)
    }
}
