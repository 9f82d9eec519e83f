//! Lloyd k-means with k-means++ initialization over feature frames.
//!
//! Squared Euclidean metric, ties broken by lowest centroid index. An empty
//! cluster is re-seeded at the point currently farthest from its assigned
//! centroid (lowest index on ties), keeping k fixed.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use rand::Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Centroids {
    pub k: usize,
    pub dim: usize,
    /// k x dim.
    pub means: Matrix,
    /// Sum of squared distances of the training points to their nearest
    /// centroid. Zero for centroids loaded from disk (the file stores means
    /// only).
    pub inertia: f64,
    /// Inertia after each Lloyd iteration; non-increasing.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelSequence {
    pub labels: Vec<usize>,
    pub vocab_size: usize,
}

impl PseudoLabelSequence {
    pub fn validate(&self) -> Result<()> {
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "label {l} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(point: &[f64], means: &Matrix) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..means.rows() {
        let d = sq_dist(point, means.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, each next sampled with
/// probability proportional to squared distance from the chosen set.
pub fn kmeans_pp_init<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Result<Matrix> {
    let n = points.rows();
    if n < k {
        return Err(Error::InsufficientPoints(format!("{n} points for k = {k}")));
    }
    let d = points.cols();
    let mut means = Matrix::zeros(k, d);
    let first = rng.gen_range(0..n);
    means.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), means.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        means.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let nd = sq_dist(points.row(i), means.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }
    Ok(means)
}

/// Lloyd iterations from explicit initial centroids until the assignment
/// reaches a fixpoint or max_iter passes.
pub fn lloyd(points: &Matrix, init: Matrix, max_iter: usize) -> Result<Centroids> {
    let n = points.rows();
    let d = points.cols();
    let k = init.rows();
    if init.cols() != d {
        return Err(Error::Dimension(format!("centroid dim {} vs point dim {d}", init.cols())));
    }
    if n < k {
        return Err(Error::InsufficientPoints(format!("{n} points for k = {k}")));
    }
    let mut means = init;
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, dist) = nearest(points.row(i), &means);
            inertia += dist;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Matrix::zeros(k, d);
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums.row_mut(c).iter_mut() {
                    *s /= counts[c] as f64;
                }
                means.row_mut(c).copy_from_slice(sums.row(c));
            } else {
                // farthest point from its assigned centroid, lowest index on ties
                let mut far = (0usize, -1.0f64);
                for i in 0..n {
                    let dist = sq_dist(points.row(i), means.row(assignment[i]));
                    if dist > far.1 {
                        far = (i, dist);
                    }
                }
                means.row_mut(c).copy_from_slice(points.row(far.0));
            }
        }
    }
    let final_inertia = (0..n).map(|i| nearest(points.row(i), &means).1).sum();
    Ok(Centroids { k, dim: d, means, inertia: final_inertia, inertia_history: history })
}

pub fn kmeans_fit<R: Rng>(
    points: &Matrix,
    k: usize,
    rng: &mut R,
    max_iter: usize,
) -> Result<Centroids> {
    if !points.is_finite() {
        return Err(Error::Contract("kmeans_fit: non-finite points".into()));
    }
    let init = kmeans_pp_init(points, k, rng)?;
    lloyd(points, init, max_iter)
}

pub fn assign(points: &Matrix, c: &Centroids) -> Result<PseudoLabelSequence> {
    if points.cols() != c.dim {
        return Err(Error::Dimension(format!(
            "point dim {} vs centroid dim {}",
            points.cols(),
            c.dim
        )));
    }
    let labels = (0..points.rows()).map(|i| nearest(points.row(i), &c.means).0).collect();
    Ok(PseudoLabelSequence { labels, vocab_size: c.k })
}

/// Uniform row subsample without replacement; returns all rows when
/// max_n >= n. Order follows the draw, not the input.
pub fn subsample_rows<R: Rng>(points: &Matrix, max_n: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    if n <= max_n {
        return points.clone();
    }
    // partial Fisher-Yates over indices
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..max_n {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut out = Matrix::zeros(max_n, points.cols());
    for (r, &i) in idx[..max_n].iter().enumerate() {
        out.row_mut(r).copy_from_slice(points.row(i));
    }
    out
}

const CENTROID_MAGIC: &[u8; 4] = b"ISKM";

pub fn write_centroids(path: &Path, c: &Centroids) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + c.k * c.dim * 8);
    buf.extend_from_slice(CENTROID_MAGIC);
    buf.extend_from_slice(&(c.k as u32).to_le_bytes());
    buf.extend_from_slice(&(c.dim as u32).to_le_bytes());
    for i in 0..c.k {
        for &v in c.means.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_centroids(path: &Path) -> Result<Centroids> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != CENTROID_MAGIC {
        return Err(Error::Parse(format!("{}: not an ISKM centroid file", path.display())));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * k * d {
        return Err(Error::Parse(format!("{}: payload size mismatch for {k} x {d}", path.display())));
    }
    let mut means = Matrix::zeros(k, d);
    for i in 0..k {
        for j in 0..d {
            let off = 12 + 8 * (i * d + j);
            means.set(i, j, f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
    }
    Ok(Centroids { k, dim: d, means, inertia: 0.0, inertia_history: Vec::new() })
}
