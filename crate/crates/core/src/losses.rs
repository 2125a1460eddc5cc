//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct input (logits, reconstructions, raw features or
//! predictions); callers chain those through the network backward passes.

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, softmax_into, Matrix, PredictionMatrix};
use crate::pseudo_label::MemoryBank;
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking a logarithm.
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossValue<S> {
    pub value: S,
    /// Same shape as the loss input.
    pub grad: Matrix<S>,
}

/// Mean cross-entropy of class×sample `logits` against integer labels.
pub fn supervised_ce<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> Result<LossValue<S>> {
    let (k, n) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let nn = S::count(n);
    let cols = logits.transpose();
    let mut grad_t = Matrix::zeros(n, k);
    let mut value = S::zero();
    for (j, &y) in labels.iter().enumerate() {
        let col = cols.row(j);
        value -= col[y] - log_sum_exp(col.iter().copied());
        let g = grad_t.row_mut(j);
        softmax_into(col, g);
        g[y] -= S::one();
        g.iter_mut().for_each(|v| *v /= nn);
    }
    Ok(LossValue {
        value: value / nn,
        grad: grad_t.transpose(),
    })
}

/// Cross-entropy of student logits on strongly augmented inputs against
/// one-hot pseudo labels. One call per branch; the branch terms are summed
/// by the caller.
pub fn ocm_ce<S: Scalar>(student_logits: &Matrix<S>, pseudo_labels: &[usize]) -> Result<LossValue<S>> {
    supervised_ce(student_logits, pseudo_labels)
}

/// Mean squared error over all elements of one batch.
pub fn reconstruction_mse<S: Scalar>(recon: &Matrix<S>, target: &Matrix<S>) -> Result<LossValue<S>> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let count = recon.data().len();
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let diff = recon.sub(target)?;
    let cnt = S::count(count);
    let value = diff.data().iter().map(|&d| d * d).sum::<S>() / cnt;
    Ok(LossValue {
        value,
        grad: diff.scale(S::lit(2.0) / cnt),
    })
}

/// Instance-discrimination loss against a memory bank.
///
/// For student feature `z_i` of target sample `indices[i]`:
/// `-ln( exp(ρ cos(z_i, b_pos)) / Σ_m exp(ρ cos(z_i, b_m)) )` where `b_pos`
/// is the bank slot of the sample itself and the sum runs over every slot.
/// Averaged over the batch; bank entries are constants.
pub fn contrastive<S: Scalar>(
    z: &Matrix<S>,
    indices: &[usize],
    bank: &MemoryBank<S>,
    rho: S,
) -> Result<LossValue<S>> {
    let slots = bank.features()?;
    let (n, d) = z.shape();
    if indices.len() != n {
        return Err(Error::Shape(format!("{} indices for {n} features", indices.len())));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if d != slots.cols() {
        return Err(Error::Shape(format!("features of width {d}, bank width {}", slots.cols())));
    }
    let nn = S::count(n);
    let mut value = S::zero();
    let mut grad = Matrix::zeros(n, d);
    let mut logits = vec![S::zero(); slots.rows()];
    for (i, &pos) in indices.iter().enumerate() {
        if pos >= slots.rows() {
            return Err(Error::IndexOutOfRange { index: pos, len: slots.rows() });
        }
        let zi = z.row(i);
        let len = norm(zi);
        if !(len > S::zero()) {
            return Err(Error::DegenerateFeature);
        }
        let u: Vec<S> = zi.iter().map(|&v| v / len).collect();
        for (m, l) in logits.iter_mut().enumerate() {
            *l = rho * dot(&u, slots.row(m));
        }
        let lse = log_sum_exp(logits.iter().copied());
        value += lse - logits[pos];

        // dL/du = ρ Σ_m (π_m - δ_m,pos) b_m
        let mut du = vec![S::zero(); d];
        for (m, &l) in logits.iter().enumerate() {
            let mut w = (l - lse).exp();
            if m == pos {
                w -= S::one();
            }
            let w = rho * w;
            for (g, &b) in du.iter_mut().zip(slots.row(m)) {
                *g += w * b;
            }
        }
        // through u = z / |z|
        let radial = dot(&u, &du);
        for ((g, &dv), &uv) in grad.row_mut(i).iter_mut().zip(&du).zip(&u) {
            *g = (dv - uv * radial) / (len * nn);
        }
    }
    Ok(LossValue {
        value: value / nn,
        grad,
    })
}

/// Binary "same cluster" indicator over a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairwiseLabels {
    n: usize,
    same: Vec<bool>,
}

impl PairwiseLabels {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.same[i * self.n + j]
    }

    /// Number of positives in row `i`, including the diagonal.
    pub fn positives(&self, i: usize) -> usize {
        self.same[i * self.n..(i + 1) * self.n].iter().filter(|&&s| s).count()
    }

    pub fn to_matrix<S: Scalar>(&self) -> Matrix<S> {
        Matrix::from_fn(self.n, self.n, |i, j| if self.get(i, j) { S::one() } else { S::zero() })
    }
}

pub fn pairwise_labels(labels: &[usize]) -> PairwiseLabels {
    let n = labels.len();
    let same = (0..n)
        .flat_map(|i| labels.iter().map(move |&l| l == labels[i]))
        .collect();
    PairwiseLabels { n, same }
}

/// One directional term of the pairwise co-training loss.
///
/// With `P_ij = p_iᵀ p_j` over the batch predictions of the receiving
/// branch and `P̄_ij = P_ij / Σ_j P_ij`, returns
/// `-mean_i Σ_j g_ij ln P̄_ij / Σ_j g_ij` and its gradient with respect to
/// the K×n prediction matrix. Pairwise labels come from the other branch
/// and are constant. The diagonal pairs are included.
pub fn ccm_loss<S: Scalar>(pred: &PredictionMatrix<S>, g: &PairwiseLabels) -> Result<LossValue<S>> {
    let n = pred.num_samples();
    if g.len() != n {
        return Err(Error::Shape(format!("{} pairwise rows for {n} samples", g.len())));
    }
    if n < 2 {
        return Err(Error::Shape("pairwise loss needs at least two samples".into()));
    }
    let p = pred.as_matrix().transpose(); // n×K
    let sim = p.matmul_nt(&p)?; // n×n
    let floor = S::lit(LN_FLOOR);
    let nn = S::count(n);
    let mut value = S::zero();
    // a[i][k] = dL/dP_ik
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let row = sim.row(i);
        let total: S = row.iter().copied().sum();
        let positives = S::count(g.positives(i));
        let mut active = S::zero();
        let mut acc = S::zero();
        for j in 0..n {
            if !g.get(i, j) {
                continue;
            }
            let normalized = row[j] / total;
            if normalized > floor {
                acc += normalized.ln();
                active += S::one();
                a[(i, j)] -= S::one() / (positives * nn * row[j]);
            } else {
                acc += floor.ln();
            }
        }
        value -= acc / positives;
        let shared = active / (positives * nn * total);
        a.row_mut(i).iter_mut().for_each(|v| *v += shared);
    }
    // dL/dp_k = Σ_j (a_kj + a_jk) p_j
    let sym = a.add(&a.transpose())?;
    let grad = sym.matmul(&p)?.transpose();
    Ok(LossValue {
        value: value / nn,
        grad,
    })
}

/// Chains a gradient with respect to column-softmax outputs back to the
/// logits.
pub fn softmax_columns_backward<S: Scalar>(
    pred: &PredictionMatrix<S>,
    d_pred: &Matrix<S>,
) -> Result<Matrix<S>> {
    let p = pred.as_matrix();
    if p.shape() != d_pred.shape() {
        return Err(Error::Shape("softmax backward shape mismatch".into()));
    }
    let (k, n) = p.shape();
    let mut out = Matrix::zeros(k, n);
    for j in 0..n {
        let inner: S = (0..k).map(|y| p[(y, j)] * d_pred[(y, j)]).sum();
        for y in 0..k {
            out[(y, j)] = p[(y, j)] * (d_pred[(y, j)] - inner);
        }
    }
    Ok(out)
}

/// KL divergence `D(Q‖P)`, cross-entropy `E(Q‖P)` and entropy `H(Q)`, all
/// averaged over the N columns, with `D = E - H`.
pub fn kl_decomposition<S: Scalar>(q: &Matrix<S>, p: &PredictionMatrix<S>) -> Result<(S, S, S)> {
    let pm = p.as_matrix();
    if q.shape() != pm.shape() {
        return Err(Error::Shape(format!("Q {:?} vs P {:?}", q.shape(), pm.shape())));
    }
    let n = S::count(q.cols().max(1));
    let floor = S::lit(LN_FLOOR);
    let (mut d, mut e, mut h) = (S::zero(), S::zero(), S::zero());
    for (&qv, &pv) in q.data().iter().zip(pm.data()) {
        if qv <= S::zero() {
            continue;
        }
        let ln_p = pv.max(floor).ln();
        let ln_q = qv.max(floor).ln();
        d += qv * (ln_q - ln_p);
        e -= qv * ln_p;
        h -= qv * ln_q;
    }
    Ok((d / n, e / n, h / n))
}

/// K×N one-hot matrix of integer labels.
pub fn one_hot<S: Scalar>(labels: &[usize], k: usize) -> Matrix<S> {
    Matrix::from_fn(k, labels.len(), |y, j| if labels[j] == y { S::one() } else { S::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, softmax_columns, SeededRng};

    fn bank_of(rows: &[&[f64]]) -> MemoryBank<f64> {
        let mut bank = MemoryBank::new(rows.len(), rows[0].len());
        let m = Matrix::from_rows(rows).unwrap();
        bank.update(&(0..rows.len()).collect::<Vec<_>>(), &m).unwrap();
        bank
    }

    #[test]
    fn ce_examples() {
        let uniform = Matrix::<f64>::zeros(4, 3);
        let l = supervised_ce(&uniform, &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-14);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 40.0] {
            let logits = Matrix::from_rows(&[[margin], [0.0]]).unwrap();
            let v = supervised_ce(&logits, &[0]).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-15);

        // hand toy: columns (1,2,0) label 1 and (0,0,ln 2) label 2
        let logits = Matrix::from_columns(&[[1.0, 2.0, 0.0], [0.0, 0.0, 2f64.ln()]]).unwrap();
        let e = std::f64::consts::E;
        let l0 = -(e * e / (e + e * e + 1.0)).ln();
        let l1 = -(2.0f64 / 4.0).ln();
        let l = supervised_ce(&logits, &[1, 2]).unwrap();
        assert!((l.value - (l0 + l1) / 2.0).abs() < 1e-14);
        assert!(matches!(
            supervised_ce(&logits, &[3, 0]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn mse_examples() {
        let t = Matrix::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(reconstruction_mse(&t, &t).unwrap().value, 0.0);
        assert!((reconstruction_mse(&t.map(|v| v + 1.0), &t).unwrap().value - 1.0).abs() < 1e-15);
        let r = Matrix::from_rows(&[[0.0, 2.0], [5.0, 3.0]]).unwrap();
        // (1 + 0 + 4 + 1) / 4
        assert!((reconstruction_mse(&r, &t).unwrap().value - 1.5).abs() < 1e-15);
        assert!(reconstruction_mse(&r, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let z = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let single = bank_of(&[&[1.0, 0.0]]);
        assert!(contrastive(&z, &[0], &single, 7.0).unwrap().value.abs() < 1e-15);

        let pair = bank_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = contrastive(&z, &[0], &pair, 1.0).unwrap().value;
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let mut prev = f64::INFINITY;
        for angle in [0.3f64, 0.8, 1.5, 2.5, 3.1] {
            let bank = bank_of(&[&[1.0, 0.0], &[angle.cos(), angle.sin()]]);
            let v = contrastive(&z, &[0], &bank, 7.0).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn contrastive_needs_a_warm_bank() {
        let bank = MemoryBank::<f64>::new(3, 2);
        let z = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let err = contrastive(&z, &[0], &bank, 7.0).unwrap_err();
        assert_eq!(err.to_string(), "bank cold");
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(
            pairwise_labels(&[0, 0, 1]).to_matrix::<f64>(),
            Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
        );
        assert_eq!(pairwise_labels(&[2, 2, 2]).to_matrix::<f64>(), Matrix::filled(3, 3, 1.0));
        assert_eq!(pairwise_labels(&[0, 1, 2]).to_matrix::<f64>(), Matrix::identity(3));
    }

    #[test]
    fn ccm_examples() {
        let separated = PredictionMatrix::from_matrix(Matrix::<f64>::identity(2), 0.0).unwrap();
        let g = pairwise_labels(&[0, 1]);
        assert!(ccm_loss(&separated, &g).unwrap().value.abs() < 1e-15);

        let uniform = PredictionMatrix::from_matrix(Matrix::<f64>::filled(3, 2, 1.0 / 3.0), 1e-12).unwrap();
        let v = ccm_loss(&uniform, &pairwise_labels(&[4, 4])).unwrap().value;
        assert!((v - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ccm_prefers_agreeing_one_hots() {
        // positive pair moved from orthogonal one-hots to equal one-hots
        let g = pairwise_labels(&[0, 0]);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let m = Matrix::from_columns(&[[1.0, 0.0], [t, 1.0 - t]]).unwrap();
            let p = PredictionMatrix::from_matrix(m, 1e-12).unwrap();
            let v = ccm_loss(&p, &g).unwrap().value;
            assert!(v < prev, "t = {t}: {v} >= {prev}");
            prev = v;
        }
        assert!((prev - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = PredictionMatrix::from_matrix(
            Matrix::from_columns(&[[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]]).unwrap(),
            1e-12,
        )
        .unwrap();
        let (d, _, _): (f64, f64, f64) = kl_decomposition(p.as_matrix(), &p).unwrap();
        assert!(d.abs() < 1e-15);

        let q = one_hot::<f64>(&[1, 0, 1], 2);
        let (d, e, h) = kl_decomposition(&q, &p).unwrap();
        assert_eq!(h, 0.0);
        assert_eq!(d, e);

        let q = Matrix::from_columns(&[[0.5, 0.5], [0.9, 0.1], [0.3, 0.7]]).unwrap();
        let (d, e, h) = kl_decomposition(&q, &p).unwrap();
        let direct: f64 = q
            .data()
            .iter()
            .zip(p.as_matrix().data())
            .map(|(&a, &b)| a * (a / b).ln())
            .sum::<f64>()
            / 3.0;
        assert!((d - direct).abs() < 1e-12);
        assert!((d - (e - h)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3);
        let logits = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let labels = [2, 0, 1, 2];
        let f = |x: &[f64]| supervised_ce(&Matrix::new(3, 4, x.to_vec()).unwrap(), &labels).unwrap().value;
        let g = |x: &[f64]| {
            supervised_ce(&Matrix::new(3, 4, x.to_vec()).unwrap(), &labels)
                .unwrap()
                .grad
                .into_data()
        };
        assert!(check_gradient(f, g, logits.data(), 1e-5) <= 1e-4);

        let target = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let recon = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let f = |x: &[f64]| reconstruction_mse(&Matrix::new(2, 3, x.to_vec()).unwrap(), &target).unwrap().value;
        let g = |x: &[f64]| {
            reconstruction_mse(&Matrix::new(2, 3, x.to_vec()).unwrap(), &target)
                .unwrap()
                .grad
                .into_data()
        };
        assert!(check_gradient(f, g, recon.data(), 1e-5) <= 1e-4);

        let mut bank = MemoryBank::new(5, 3);
        bank.update(&[0, 1, 2, 3, 4], &Matrix::from_fn(5, 3, |_, _| rng.normal())).unwrap();
        let z = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let idx = [3, 1];
        let f = |x: &[f64]| contrastive(&Matrix::new(2, 3, x.to_vec()).unwrap(), &idx, &bank, 7.0).unwrap().value;
        let g = |x: &[f64]| {
            contrastive(&Matrix::new(2, 3, x.to_vec()).unwrap(), &idx, &bank, 7.0)
                .unwrap()
                .grad
                .into_data()
        };
        assert!(check_gradient(f, g, z.data(), 1e-5) <= 1e-4);

        let pl = pairwise_labels(&[0, 1, 0]);
        let logits = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let f = |x: &[f64]| {
            ccm_loss(&softmax_columns(&Matrix::new(3, 3, x.to_vec()).unwrap()), &pl)
                .unwrap()
                .value
        };
        let g = |x: &[f64]| {
            let p = softmax_columns(&Matrix::new(3, 3, x.to_vec()).unwrap());
            let l = ccm_loss(&p, &pl).unwrap();
            softmax_columns_backward(&p, &l.grad).unwrap().into_data()
        };
        assert!(check_gradient(f, g, logits.data(), 1e-5) <= 1e-4);
    }
}
