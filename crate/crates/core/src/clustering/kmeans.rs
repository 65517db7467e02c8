use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// Fitted k-means codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<S> {
    centroids: Tensor<S>,
    inertia: S,
    /// Inertia after every assignment step, starting with the seeding.
    history: Vec<S>,
}

impl<S: Scalar> ClusterModel<S> {
    /// Wraps existing centroids (e.g. loaded from disk).
    pub fn from_centroids(centroids: Tensor<S>) -> Result<Self> {
        if centroids.ndim() != 2 {
            return Err(Error::invalid("centroids must be a k x D matrix"));
        }
        if !centroids.is_finite() {
            return Err(Error::NonFinite {
                what: "centroids".into(),
                context: None,
            });
        }
        Ok(Self {
            centroids,
            inertia: S::zero(),
            history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Tensor<S> {
        &self.centroids
    }

    pub fn inertia(&self) -> S {
        self.inertia
    }

    pub fn inertia_history(&self) -> &[S] {
        &self.history
    }

    /// Nearest centroid per row of `frames`; ties go to the lowest index.
    pub fn assign(&self, frames: &Tensor<S>) -> Result<Vec<u32>> {
        if frames.ndim() != 2 || frames.cols() != self.dim() {
            return Err(Error::Shape {
                op: "assign",
                lhs: frames.shape().to_vec(),
                rhs: self.centroids.shape().to_vec(),
            });
        }
        Ok(nearest_all(frames, &self.centroids).into_iter().map(|(c, _)| c as u32).collect())
    }
}

#[inline]
fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<S: Scalar>(x: &[S], centroids: &Tensor<S>) -> (usize, S) {
    let mut best = (0, sq_dist(x, centroids.row(0)));
    for c in 1..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn nearest_all<S: Scalar>(points: &Tensor<S>, centroids: &Tensor<S>) -> Vec<(usize, S)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect()
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_plus_plus<S: Scalar>(points: &Tensor<S>, k: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = points.rows();
    let d = points.cols();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0])).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in min_d.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can leave `target` past the end
            pick.unwrap_or_else(|| min_d.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(pick);
        for i in 0..n {
            let dist = sq_dist(points.row(i), points.row(pick)).as_f64();
            if dist < min_d[i] {
                min_d[i] = dist;
            }
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(points.row(i));
    }
    Tensor::new([k, d], data).expect("k x d centroids")
}

/// Lloyd's algorithm from k-means++ seeding, stopping at an assignment
/// fixpoint or after `max_iters` updates.
pub fn kmeans_fit<S: Scalar>(points: &Tensor<S>, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel<S>> {
    if points.ndim() != 2 {
        return Err(Error::invalid("k-means input must be an n x D matrix"));
    }
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means needs n >= k, got n = {n}, k = {k}")));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite {
            what: "k-means input".into(),
            context: None,
        });
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);

    let inertia_of = |a: &[(usize, S)]| a.iter().map(|&(_, dist)| dist).sum::<S>();
    let mut assignment = nearest_all(points, &centroids);
    let mut history = vec![inertia_of(&assignment)];

    for _ in 0..max_iters {
        let mut sums = vec![S::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s = *s + x;
            }
        }
        let mut next = Tensor::zeros([k, d]);
        for c in 0..k {
            if counts[c] > 0 {
                let cnt = S::from_usize_lossy(counts[c]);
                for (o, &s) in next.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *o = s / cnt;
                }
            }
        }
        // Empty clusters take the point farthest from its (updated) centroid.
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far: Option<(usize, S)> = None;
            for (i, &(owner, _)) in assignment.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let dist = sq_dist(points.row(i), next.row(owner));
                if far.is_none_or(|(_, best)| dist > best) {
                    far = Some((i, dist));
                }
            }
            if let Some((i, _)) = far {
                taken[i] = true;
                next.row_mut(c).copy_from_slice(points.row(i));
            }
        }
        centroids = next;
        let updated = nearest_all(points, &centroids);
        history.push(inertia_of(&updated));
        let fixpoint = updated.iter().zip(&assignment).all(|(a, b)| a.0 == b.0);
        assignment = updated;
        if fixpoint {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        inertia: *history.last().unwrap(),
        history,
    })
}
