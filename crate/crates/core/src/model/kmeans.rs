use serde::{Deserialize, Serialize};

use super::ClassifierParams;
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, l2_normalize_rows, norm, Matrix, SeededRng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult<S> {
    /// k×d, unit-norm rows.
    pub centroids: Matrix<S>,
    pub labels: Vec<usize>,
    /// Σ_i cos(x_i, centroid of x_i) for the returned partition.
    pub objective: S,
    /// Objective after every assignment step of the winning restart.
    pub trace: Vec<S>,
}

/// k-means on the unit sphere with cosine similarity.
///
/// Rows are L2-normalised first. Seeding is k-means++ with cosine distance
/// `1 - cos`; the best of `cfg.restarts` runs by objective is kept. A
/// centroid left without members is re-seeded at the point least similar
/// to its own centroid.
pub fn spherical_kmeans<S: Scalar>(
    features: &Matrix<S>,
    k: usize,
    rng: &mut SeededRng,
    cfg: &KMeansConfig,
) -> Result<KMeansResult<S>> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::TooManyClusters { k, n });
    }
    let x = l2_normalize_rows(features)?;
    let mut best: Option<KMeansResult<S>> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = single_run(&x, k, rng, cfg.max_iters.max(1));
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn single_run<S: Scalar>(x: &Matrix<S>, k: usize, rng: &mut SeededRng, max_iters: usize) -> KMeansResult<S> {
    let (n, d) = x.shape();
    let mut centroids = seed_plus_plus(x, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let sims = x.matmul_nt(&centroids).expect("matching dims");
        let mut changed = false;
        let mut objective = S::zero();
        for i in 0..n {
            let l = argmax(sims.row(i));
            objective += sims[(i, l)];
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }

        let mut sums = Matrix::<S>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            let nrm = norm(sums.row(c));
            if count > 0 && nrm > S::zero() {
                let row = centroids.row_mut(c);
                for (r, &s) in row.iter_mut().zip(sums.row(c)) {
                    *r = s / nrm;
                }
            } else {
                // empty: move to the worst-served point
                let far = (0..n)
                    .min_by(|&a, &b| {
                        let sa = dot(x.row(a), centroids.row(labels[a]));
                        let sb = dot(x.row(b), centroids.row(labels[b]));
                        sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("n >= k >= 1");
                centroids.row_mut(c).copy_from_slice(x.row(far));
                labels[far] = c;
            }
        }
    }
    let objective = *trace.last().expect("at least one iteration");
    KMeansResult {
        centroids,
        labels,
        objective,
        trace,
    }
}

fn seed_plus_plus<S: Scalar>(x: &Matrix<S>, k: usize, rng: &mut SeededRng) -> Matrix<S> {
    let (n, d) = x.shape();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut best_sim: Vec<S> = (0..n).map(|i| dot(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let weights: Vec<f64> = best_sim
            .iter()
            .map(|&s| (S::one() - s).max(S::zero()).to_f64_lossy())
            .collect();
        let pick = rng.weighted_index(&weights);
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, bs) in best_sim.iter_mut().enumerate() {
            let s = dot(x.row(i), x.row(pick));
            if s > *bs {
                *bs = s;
            }
        }
    }
    centroids
}

/// Target classifier whose weight columns are the centroids, so logits are
/// cosine scores scaled by the feature norm.
pub fn init_classifier_from_centroids<S: Scalar>(centroids: &Matrix<S>) -> ClassifierParams<S> {
    ClassifierParams {
        weight: centroids.transpose(),
    }
}
