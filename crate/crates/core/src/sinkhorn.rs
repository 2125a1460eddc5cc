//! Balanced pseudo-label assignment by entropic optimal transport.
//!
//! Given teacher predictions `P̂` (K×N, column-stochastic) the solver finds
//! `Q̂ = N · diag(u) · (P̂/N)^ξ · diag(v)` whose columns sum to one and whose
//! rows sum to `N/K`. That is the entropy-regularised transport plan between
//! uniform sample mass and uniform cluster mass under cost `-ln(P̂/N)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, Matrix, PredictionMatrix};
use crate::scalar::Scalar;

/// Entries of `P̂` are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

/// Potentials are folded back into the kernel once a scaling leaves
/// `[e^-ABSORB, e^ABSORB]`.
const ABSORB: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Sharpness exponent applied to `P̂/N`.
    pub xi: f64,
    pub max_iters: usize,
    /// Largest tolerated marginal violation, in units of `Q̂`.
    pub tol: f64,
    /// Keep the scalings as log-potentials. The plain linear-domain
    /// iteration underflows for confident predictions and is meant for
    /// small cross-checks.
    pub log_domain: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            xi: 10.0,
            max_iters: 1000,
            tol: 1e-6,
            log_domain: true,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(format!(
                "transport needs xi > 0, tol > 0, max_iters >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Relaxed assignment in the transportation polytope.
#[derive(Clone, Debug)]
pub struct SoftAssignment<S> {
    /// K×N, non-negative.
    pub q: Matrix<S>,
    /// `max_y |Σ_n Q̂_yn - N/K|`.
    pub row_marginal_err: S,
    /// `max_n |Σ_y Q̂_yn - 1|`.
    pub col_marginal_err: S,
    pub iters_used: usize,
    /// False when `max_iters` ran out before the tolerance was met; `q` is
    /// then the last iterate.
    pub converged: bool,
}

impl<S: Scalar> SoftAssignment<S> {
    pub fn num_clusters(&self) -> usize {
        self.q.rows()
    }

    pub fn num_samples(&self) -> usize {
        self.q.cols()
    }
}

/// Solves for the balanced soft assignment closest to `p_hat`.
pub fn solve_balanced<S: Scalar>(
    p_hat: &PredictionMatrix<S>,
    cfg: &TransportConfig,
) -> Result<SoftAssignment<S>> {
    cfg.validate()?;
    let (k, n) = (p_hat.num_classes(), p_hat.num_samples());
    if k == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let p = p_hat.as_matrix();
    p.ensure_finite("transport input")?;

    // log of (P̂/N)^ξ
    let xi = S::lit(cfg.xi);
    let ln_n = S::count(n).ln();
    let floor = S::lit(PROB_FLOOR).max(S::min_positive_value());
    let log_kernel = p.map(|v| xi * (v.max(floor).ln() - ln_n));

    let mut solver = Potentials::new(log_kernel, cfg);
    if cfg.log_domain {
        solver.run_stabilized()
    } else {
        solver.run_linear()
    }
}

struct Potentials<'a, S> {
    log_kernel: Matrix<S>,
    cfg: &'a TransportConfig,
    k: usize,
    n: usize,
    /// Row target `1/K` and column target `1/N` of `S = Q̂/N`.
    row_mass: S,
    col_mass: S,
}

impl<'a, S: Scalar> Potentials<'a, S> {
    fn new(log_kernel: Matrix<S>, cfg: &'a TransportConfig) -> Self {
        let (k, n) = log_kernel.shape();
        Self {
            log_kernel,
            cfg,
            k,
            n,
            row_mass: S::one() / S::count(k),
            col_mass: S::one() / S::count(n),
        }
    }

    fn tol(&self) -> S {
        S::lit(self.cfg.tol)
    }

    /// Linear-domain scaling on a kernel re-centred by the log-potentials
    /// `f` (rows) and `g` (columns); scalings are absorbed into the
    /// potentials whenever they drift far from one.
    fn run_stabilized(&mut self) -> Result<SoftAssignment<S>> {
        let (k, n) = (self.k, self.n);
        let lk = &self.log_kernel;
        let mut g: Vec<S> = (0..n)
            .map(|j| -(0..k).map(|y| lk[(y, j)]).fold(S::neg_infinity(), S::max))
            .collect();
        let mut f: Vec<S> = (0..k)
            .map(|y| {
                -lk.row(y)
                    .iter()
                    .zip(&g)
                    .map(|(&l, &gj)| l + gj)
                    .fold(S::neg_infinity(), S::max)
            })
            .collect();
        let mut kernel = self.centred_kernel(&f, &g);
        let mut a = vec![S::one(); k];
        let mut b = vec![S::one(); n];
        let big = S::lit(ABSORB.exp());
        let small = S::lit((-ABSORB).exp());
        let nq = S::count(n);
        let tol = self.tol();

        let mut kb = row_products(&kernel, &b);
        for iter in 1..=self.cfg.max_iters {
            for y in 0..k {
                a[y] = self.row_mass / kb[y];
            }
            let kta = col_products(&kernel, &a);
            for j in 0..n {
                b[j] = self.col_mass / kta[j];
            }
            if a.iter().chain(&b).any(|v| !v.is_finite() || *v <= S::zero()) {
                // kernel row or column underflowed; finish in pure log space
                return self.run_log(f, g, iter);
            }
            if a.iter().chain(&b).any(|&v| v > big || v < small) {
                for y in 0..k {
                    f[y] += a[y].ln();
                    a[y] = S::one();
                }
                for j in 0..n {
                    g[j] += b[j].ln();
                    b[j] = S::one();
                }
                kernel = self.centred_kernel(&f, &g);
            }
            kb = row_products(&kernel, &b);
            let row_err = (0..k)
                .map(|y| (nq * a[y] * kb[y] - nq * self.row_mass).abs())
                .fold(S::zero(), S::max);
            if row_err <= tol {
                return Ok(self.finish_scaled(&kernel, &a, &b, iter));
            }
        }
        Ok(self.finish_scaled(&kernel, &a, &b, self.cfg.max_iters))
    }

    /// Plain log-sum-exp iteration on the potentials.
    fn run_log(&self, mut f: Vec<S>, mut g: Vec<S>, start: usize) -> Result<SoftAssignment<S>> {
        let (k, n) = (self.k, self.n);
        let lk = &self.log_kernel;
        let (ln_r, ln_c) = (self.row_mass.ln(), self.col_mass.ln());
        let tol = self.tol();
        let nq = S::count(n);
        for iter in start..=self.cfg.max_iters {
            for (y, fy) in f.iter_mut().enumerate() {
                *fy = ln_r - log_sum_exp(lk.row(y).iter().zip(&g).map(|(&l, &gj)| l + gj));
            }
            for j in 0..n {
                g[j] = ln_c - log_sum_exp((0..k).map(|y| lk[(y, j)] + f[y]));
            }
            let row_err = (0..k)
                .map(|y| {
                    let s = log_sum_exp(lk.row(y).iter().zip(&g).map(|(&l, &gj)| l + f[y] + gj));
                    (nq * s.exp() - nq * self.row_mass).abs()
                })
                .fold(S::zero(), S::max);
            if row_err <= tol {
                return Ok(self.finish_log(&f, &g, iter));
            }
        }
        Ok(self.finish_log(&f, &g, self.cfg.max_iters))
    }

    /// Textbook linear-domain iteration on the raw kernel.
    fn run_linear(&self) -> Result<SoftAssignment<S>> {
        let (k, n) = (self.k, self.n);
        let kernel = self.log_kernel.map(|v| v.exp());
        let mut a = vec![S::one(); k];
        let mut b = vec![S::one(); n];
        let tol = self.tol();
        let nq = S::count(n);
        let mut kb = row_products(&kernel, &b);
        for iter in 1..=self.cfg.max_iters {
            for y in 0..k {
                a[y] = self.row_mass / kb[y];
            }
            let kta = col_products(&kernel, &a);
            for j in 0..n {
                b[j] = self.col_mass / kta[j];
            }
            if a.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("linear-domain scaling underflowed"));
            }
            kb = row_products(&kernel, &b);
            let row_err = (0..k)
                .map(|y| (nq * a[y] * kb[y] - nq * self.row_mass).abs())
                .fold(S::zero(), S::max);
            if row_err <= tol {
                return Ok(self.finish_scaled(&kernel, &a, &b, iter));
            }
        }
        Ok(self.finish_scaled(&kernel, &a, &b, self.cfg.max_iters))
    }

    fn centred_kernel(&self, f: &[S], g: &[S]) -> Matrix<S> {
        Matrix::from_fn(self.k, self.n, |y, j| (self.log_kernel[(y, j)] + f[y] + g[j]).exp())
    }

    fn finish_scaled(&self, kernel: &Matrix<S>, a: &[S], b: &[S], iters: usize) -> SoftAssignment<S> {
        let nq = S::count(self.n);
        let q = Matrix::from_fn(self.k, self.n, |y, j| nq * a[y] * kernel[(y, j)] * b[j]);
        self.summarize(q, iters)
    }

    fn finish_log(&self, f: &[S], g: &[S], iters: usize) -> SoftAssignment<S> {
        let ln_n = S::count(self.n).ln();
        let q = Matrix::from_fn(self.k, self.n, |y, j| {
            (ln_n + self.log_kernel[(y, j)] + f[y] + g[j]).exp()
        });
        self.summarize(q, iters)
    }

    fn summarize(&self, q: Matrix<S>, iters_used: usize) -> SoftAssignment<S> {
        let (row_err, col_err) = marginal_errors(&q);
        SoftAssignment {
            converged: row_err <= self.tol() && col_err <= self.tol(),
            q,
            row_marginal_err: row_err,
            col_marginal_err: col_err,
            iters_used,
        }
    }
}

fn row_products<S: Scalar>(m: &Matrix<S>, v: &[S]) -> Vec<S> {
    m.row_iter()
        .map(|row| row.iter().zip(v).fold(S::zero(), |acc, (&x, &y)| acc + x * y))
        .collect()
}

fn col_products<S: Scalar>(m: &Matrix<S>, v: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); m.cols()];
    for (row, &w) in m.row_iter().zip(v) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

/// Row (`vs N/K`) and column (`vs 1`) marginal violations of a K×N plan.
pub fn marginal_errors<S: Scalar>(q: &Matrix<S>) -> (S, S) {
    let (k, n) = q.shape();
    let target = S::count(n) / S::count(k.max(1));
    let row_err = q
        .row_sums()
        .into_iter()
        .map(|s| (s - target).abs())
        .fold(S::zero(), S::max);
    let col_err = q
        .col_sums()
        .into_iter()
        .map(|s| (s - S::one()).abs())
        .fold(S::zero(), S::max);
    (row_err, col_err)
}

/// Integral labels from a relaxed assignment.
///
/// Without capacity each sample takes its largest row (ties to the lowest
/// index). With capacity, samples are visited in descending order of their
/// largest entry and each takes its best cluster that still has room, every
/// cluster holding at most `ceil(N/K)` samples.
pub fn round_to_labels<S: Scalar>(q: &SoftAssignment<S>, respect_capacity: bool) -> Vec<usize> {
    let m = &q.q;
    let (k, n) = m.shape();
    let columns: Vec<Vec<S>> = (0..n).map(|j| m.column(j)).collect();
    if !respect_capacity {
        return columns.iter().map(|c| argmax(c)).collect();
    }
    let capacity = n.div_ceil(k);
    let mut order: Vec<usize> = (0..n).collect();
    let peak = |j: usize| columns[j][argmax(&columns[j])];
    // stable: equal peaks keep index order
    order.sort_by(|&a, &b| peak(b).partial_cmp(&peak(a)).unwrap_or(std::cmp::Ordering::Equal));
    let mut load = vec![0usize; k];
    let mut labels = vec![0usize; n];
    for j in order {
        let mut ranked: Vec<usize> = (0..k).collect();
        ranked.sort_by(|&a, &b| {
            columns[j][b]
                .partial_cmp(&columns[j][a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let y = ranked
            .into_iter()
            .find(|&y| load[y] < capacity)
            .expect("total capacity covers every sample");
        load[y] += 1;
        labels[j] = y;
    }
    labels
}

/// Per-sample argmax of the predictions, ties to the lowest index.
pub fn argmax_labels<S: Scalar>(p_hat: &PredictionMatrix<S>) -> Vec<usize> {
    (0..p_hat.num_samples())
        .map(|j| argmax(&p_hat.column(j)))
        .collect()
}
