//! Memory bank, teacher predictions over the bank and pseudo-label refresh.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{classify, ClassifierParams};
use crate::numerics::{l2_normalize_rows, softmax_columns, Matrix, PredictionMatrix};
use crate::scalar::Scalar;
use crate::sinkhorn::{argmax_labels, round_to_labels, solve_balanced, SoftAssignment, TransportConfig};

/// One unit-norm teacher feature per target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<S> {
    slots: Matrix<S>,
    populated: Vec<bool>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(len: usize, dim: usize) -> Self {
        Self {
            slots: Matrix::zeros(len, dim),
            populated: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.populated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.populated.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn is_warm(&self) -> bool {
        self.populated.iter().all(|&p| p)
    }

    pub fn populated(&self) -> &[bool] {
        &self.populated
    }

    /// Overwrites the listed slots with the L2-normalised rows of
    /// `teacher_features`.
    pub fn update(&mut self, indices: &[usize], teacher_features: &Matrix<S>) -> Result<()> {
        if indices.len() != teacher_features.rows() || teacher_features.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "{} indices with features {:?} for a bank of width {}",
                indices.len(),
                teacher_features.shape(),
                self.dim()
            )));
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        let unit = l2_normalize_rows(teacher_features)?;
        for (r, &i) in indices.iter().enumerate() {
            self.slots.row_mut(i).copy_from_slice(unit.row(r));
            self.populated[i] = true;
        }
        Ok(())
    }

    pub fn slot(&self, i: usize) -> Option<&[S]> {
        (*self.populated.get(i)?).then(|| self.slots.row(i))
    }

    /// Every slot, or [`Error::BankCold`] while any slot is unwritten.
    pub fn features(&self) -> Result<&Matrix<S>> {
        if self.is_warm() {
            Ok(&self.slots)
        } else {
            Err(Error::BankCold)
        }
    }

    /// Stores `slots` verbatim as a fully populated bank, e.g. from a
    /// checkpoint written by [`MemoryBank::features`].
    pub fn restore(slots: Matrix<S>) -> Result<Self> {
        slots.ensure_finite("bank slots")?;
        let populated = vec![true; slots.rows()];
        Ok(Self { slots, populated })
    }

    /// A fully populated bank holding the normalised rows of `features`.
    pub fn from_features(features: Matrix<S>) -> Result<Self> {
        let n = features.rows();
        let mut bank = Self::new(n, features.cols());
        bank.update(&(0..n).collect::<Vec<_>>(), &features)?;
        Ok(bank)
    }
}

/// Teacher-classifier predictions (K×N) for every bank slot.
pub fn bank_predictions<S: Scalar>(
    bank: &MemoryBank<S>,
    teacher_classifier: &ClassifierParams<S>,
) -> Result<PredictionMatrix<S>> {
    Ok(softmax_columns(&classify(teacher_classifier, bank.features()?)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Per-sample argmax of the teacher prediction.
    Argmax,
    /// Balanced transport assignment followed by rounding.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub mode: LabelMode,
    pub transport: TransportConfig,
    /// Capacity-constrained rounding of the transport plan instead of
    /// per-column argmax.
    pub respect_capacity: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            mode: LabelMode::Balanced,
            transport: TransportConfig::default(),
            respect_capacity: true,
        }
    }
}

/// Pseudo labels of one branch over the whole target set.
#[derive(Clone, Debug, Default)]
pub struct OcmState<S> {
    pub labels: Vec<usize>,
    /// Last transport plan, when generated in balanced mode.
    pub last_q: Option<SoftAssignment<S>>,
    /// Number of refreshes so far.
    pub generation: usize,
}

impl<S: Scalar> OcmState<S> {
    pub fn new() -> Self {
        Self {
            labels: Vec::new(),
            last_q: None,
            generation: 0,
        }
    }

    /// Regenerates labels for every bank slot from one snapshot of the bank.
    pub fn refresh(
        &mut self,
        bank: &MemoryBank<S>,
        teacher_classifier: &ClassifierParams<S>,
        cfg: &PseudoLabelConfig,
    ) -> Result<&[usize]> {
        let (labels, q) = generate_pseudo_labels(bank, teacher_classifier, cfg)?;
        self.labels = labels;
        self.last_q = q;
        self.generation += 1;
        Ok(&self.labels)
    }

    pub fn labels_for(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or(Error::IndexOutOfRange { index: i, len: self.labels.len() })
            })
            .collect()
    }
}

/// Labels for the full target set plus the transport plan in balanced mode.
pub fn generate_pseudo_labels<S: Scalar>(
    bank: &MemoryBank<S>,
    teacher_classifier: &ClassifierParams<S>,
    cfg: &PseudoLabelConfig,
) -> Result<(Vec<usize>, Option<SoftAssignment<S>>)> {
    let p_hat = bank_predictions(bank, teacher_classifier)?;
    Ok(match cfg.mode {
        LabelMode::Argmax => (argmax_labels(&p_hat), None),
        LabelMode::Balanced => {
            let q = solve_balanced(&p_hat, &cfg.transport)?;
            (round_to_labels(&q, cfg.respect_capacity), Some(q))
        }
    })
}

/// Writes `index label_b0 label_b1` lines under a comment header.
pub fn write_label_dump(w: &mut impl Write, branch0: &[usize], branch1: &[usize]) -> Result<()> {
    if branch0.len() != branch1.len() {
        return Err(Error::Shape("label columns differ in length".into()));
    }
    writeln!(w, "# index branch0 branch1")?;
    for (i, (a, b)) in branch0.iter().zip(branch1).enumerate() {
        writeln!(w, "{i} {a} {b}")?;
    }
    Ok(())
}

/// Reads a whitespace-separated label dump: the first column is the sample
/// index, every further column one labeling. Lines starting with `#` are
/// skipped.
pub fn read_label_dump(r: impl BufRead) -> Result<Vec<Vec<usize>>> {
    let mut columns: Vec<Vec<usize>> = Vec::new();
    let mut expected = 0usize;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if fields.len() < 2 {
            return Err(Error::Parse(format!("line {}: need index and label", lineno + 1)));
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); fields.len() - 1];
        } else if fields.len() - 1 != columns.len() {
            return Err(Error::Parse(format!("line {}: ragged columns", lineno + 1)));
        }
        if fields[0] != expected {
            return Err(Error::Parse(format!(
                "line {}: expected index {expected}, got {}",
                lineno + 1,
                fields[0]
            )));
        }
        expected += 1;
        for (c, &v) in columns.iter_mut().zip(&fields[1..]) {
            c.push(v);
        }
    }
    Ok(columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::uniformity;
    use crate::model::init_classifier_from_centroids;
    use crate::numerics::SeededRng;

    #[test]
    fn bank_slots_follow_last_write() {
        let mut bank = MemoryBank::<f64>::new(5, 2);
        bank.update(&[3], &Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(bank.slot(3), Some(&[0.6, 0.8][..]));
        assert_eq!(bank.slot(2), None);
        bank.update(&[3, 3], &Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(bank.slot(3), Some(&[0.0, 1.0][..]));
        assert!(matches!(bank.features(), Err(Error::BankCold)));
        bank.update(&[0, 1, 2, 4], &Matrix::filled(4, 2, 1.0)).unwrap();
        assert!(bank.is_warm());
        assert!(bank.populated().iter().all(|&p| p));
        assert!(matches!(
            bank.update(&[5], &Matrix::filled(1, 2, 1.0)),
            Err(Error::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn predictions_examples() {
        let bank = MemoryBank::from_features(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        let zero = ClassifierParams::<f64>::zeros(2, 3);
        let p = bank_predictions(&bank, &zero).unwrap();
        assert!(p.as_matrix().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w = ClassifierParams {
            weight: Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap(),
        };
        let p = bank_predictions(&bank, &w).unwrap();
        // slot 2 is (1,1)/√2: logits (√2, 1/√2)
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (a, b) = ((2.0 * s).exp(), s.exp());
        assert!((p.as_matrix()[(0, 2)] - a / (a + b)).abs() < 1e-14);
        let (a, b) = (2f64.exp(), 1.0);
        assert!((p.as_matrix()[(0, 0)] - a / (a + b)).abs() < 1e-14);
        for s in p.as_matrix().col_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_classifier_makes_confident_bank_predictions() {
        let c = Matrix::<f64>::identity(3).scale(10.0);
        let bank = MemoryBank::from_features(Matrix::identity(3)).unwrap();
        let p = bank_predictions(&bank, &init_classifier_from_centroids(&c)).unwrap();
        for j in 0..3 {
            assert!(p.as_matrix()[(j, j)] > 0.99);
        }
    }

    fn degenerate_setup() -> (MemoryBank<f64>, ClassifierParams<f64>) {
        // every slot identical, classifier favours cluster 0
        let bank = MemoryBank::from_features(Matrix::filled(12, 2, 1.0)).unwrap();
        let cls = ClassifierParams {
            weight: Matrix::from_rows(&[[2.0, 0.0, 0.1], [2.0, 0.0, 0.1]]).unwrap(),
        };
        (bank, cls)
    }

    #[test]
    fn argmax_mode_degenerates() {
        let (bank, cls) = degenerate_setup();
        let cfg = PseudoLabelConfig {
            mode: LabelMode::Argmax,
            ..Default::default()
        };
        let (labels, q) = generate_pseudo_labels(&bank, &cls, &cfg).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        assert!(q.is_none());
        assert_eq!(uniformity(&labels, 3), 0.0);
    }

    #[test]
    fn balanced_mode_spreads_labels() {
        let (bank, cls) = degenerate_setup();
        let (labels, q) = generate_pseudo_labels(&bank, &cls, &PseudoLabelConfig::default()).unwrap();
        let mut sizes = [0; 3];
        labels.iter().for_each(|&l| sizes[l] += 1);
        assert_eq!(sizes, [4, 4, 4]);
        assert!((uniformity(&labels, 3) - 3f64.ln()).abs() < 1e-12);
        assert!(q.unwrap().converged);
    }

    #[test]
    fn refresh_is_deterministic_and_balanced() {
        let mut rng = SeededRng::new(12);
        let bank = MemoryBank::from_features(Matrix::<f64>::from_fn(40, 4, |_, _| rng.normal())).unwrap();
        let cls = ClassifierParams::init(4, 4, &mut rng);
        let mut a = OcmState::new();
        let mut b = OcmState::new();
        a.refresh(&bank, &cls, &PseudoLabelConfig::default()).unwrap();
        b.refresh(&bank, &cls, &PseudoLabelConfig::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        a.refresh(&bank, &cls, &PseudoLabelConfig::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.generation, 2);
        assert!(uniformity(&a.labels, 4) >= 0.99 * 4f64.ln());
        assert_eq!(a.labels_for(&[0, 39]).unwrap(), vec![a.labels[0], a.labels[39]]);
        assert!(a.labels_for(&[40]).is_err());
    }

    #[test]
    fn cold_bank_is_rejected() {
        let bank = MemoryBank::<f64>::new(4, 2);
        let cls = ClassifierParams::zeros(2, 2);
        assert!(matches!(bank_predictions(&bank, &cls), Err(Error::BankCold)));
    }

    #[test]
    fn dump_round_trip() {
        let mut buf = Vec::new();
        write_label_dump(&mut buf, &[0, 2, 1], &[1, 1, 0]).unwrap();
        let cols = read_label_dump(buf.as_slice()).unwrap();
        assert_eq!(cols, vec![vec![0, 2, 1], vec![1, 1, 0]]);
        assert!(read_label_dump("0 1\n2 1\n".as_bytes()).is_err());
        assert!(read_label_dump("0 x\n".as_bytes()).is_err());
    }
}
