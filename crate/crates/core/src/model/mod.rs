//! Small fully-connected encoder/decoder, linear heads, teacher EMA and
//! spherical k-means.

mod checkpoint;
mod kmeans;

pub use checkpoint::Checkpoint;
pub use kmeans::{init_classifier_from_centroids, spherical_kmeans, KMeansConfig, KMeansResult};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Scalar;

/// Anything that is a fixed list of parameter tensors. Gradients and
/// optimiser state reuse the same container type.
pub trait ParamSet<S: Scalar>: Clone {
    fn tensors(&self) -> Vec<&Matrix<S>>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(S::zero()));
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    fn flatten(&self) -> Vec<S> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn assign_flat(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.data().len();
            t.data_mut().copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += k * other`, tensor by tensor.
    fn axpy(&mut self, k: S, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(k, b)?;
        }
        Ok(())
    }

    fn check_same_shapes(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
            return Err(Error::Shape("parameter sets differ in shape".into()));
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W` stored in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| S::lit(rng.uniform_in(-bound, bound))),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        let mut y = x.matmul(&self.weight)?;
        let b = self.bias.row(0);
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }

    /// Parameter gradients and input gradient for upstream `dy`.
    fn backward(&self, x: &Matrix<S>, dy: &Matrix<S>) -> Result<(Self, Matrix<S>)> {
        let grads = Self {
            weight: x.matmul_tn(dy)?,
            bias: Matrix::new(1, dy.cols(), dy.col_sums())?,
        };
        Ok((grads, dy.matmul_nt(&self.weight)?))
    }
}

impl<S: Scalar> ParamSet<S> for Linear<S> {
    fn tensors(&self) -> Vec<&Matrix<S>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Two dense layers with a rectifier in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    pub hidden: Linear<S>,
    pub output: Linear<S>,
}

/// `input_dim → hidden_dim → feature_dim`.
pub type EncoderParams<S> = Mlp<S>;
/// `feature_dim → hidden_dim → input_dim`.
pub type DecoderParams<S> = Mlp<S>;

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<S> {
    input: Matrix<S>,
    pre_activation: Matrix<S>,
    activation: Matrix<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut SeededRng) -> Self {
        Self {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<(Matrix<S>, MlpCache<S>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        x.ensure_finite("network input")?;
        let pre_activation = self.hidden.forward(x)?;
        let activation = pre_activation.map(|v| v.max(S::zero()));
        let y = self.output.forward(&activation)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                pre_activation,
                activation,
            },
        ))
    }

    /// Gradients of the parameters and of the input for upstream `dy`.
    pub fn backward(&self, cache: &MlpCache<S>, dy: &Matrix<S>) -> Result<(Self, Matrix<S>)> {
        let (g_out, d_act) = self.output.backward(&cache.activation, dy)?;
        let d_pre = d_act.zip_map(&cache.pre_activation, |g, z| {
            if z > S::zero() {
                g
            } else {
                S::zero()
            }
        })?;
        let (g_hidden, dx) = self.hidden.backward(&cache.input, &d_pre)?;
        Ok((
            Self {
                hidden: g_hidden,
                output: g_out,
            },
            dx,
        ))
    }
}

impl<S: Scalar> ParamSet<S> for Mlp<S> {
    fn tensors(&self) -> Vec<&Matrix<S>> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }
}

/// Single linear layer without bias, weight stored feature_dim×classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<S> {
    pub weight: Matrix<S>,
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(feature_dim, classes),
        }
    }

    pub fn init(feature_dim: usize, classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: Linear::init(feature_dim, classes, rng).weight,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    /// Gradients of the weight and of the features for class×sample `d_logits`.
    pub fn backward(&self, features: &Matrix<S>, d_logits: &Matrix<S>) -> Result<(Self, Matrix<S>)> {
        let d = d_logits.transpose();
        Ok((
            Self {
                weight: features.matmul_tn(&d)?,
            },
            d.matmul_nt(&self.weight)?,
        ))
    }
}

impl<S: Scalar> ParamSet<S> for ClassifierParams<S> {
    fn tensors(&self) -> Vec<&Matrix<S>> {
        vec![&self.weight]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        vec![&mut self.weight]
    }
}

/// Features (N×feature_dim) of a batch (N×input_dim).
pub fn encode<S: Scalar>(params: &EncoderParams<S>, batch: &Matrix<S>) -> Result<Matrix<S>> {
    Ok(params.forward(batch)?.0)
}

/// Logits laid out class×sample, ready for column softmax.
pub fn classify<S: Scalar>(params: &ClassifierParams<S>, features: &Matrix<S>) -> Result<Matrix<S>> {
    if features.cols() != params.feature_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, classifier expects {}",
            features.cols(),
            params.feature_dim()
        )));
    }
    params.weight.matmul_tn(&features.transpose())
}

/// Reconstruction (N×input_dim) of a feature batch.
pub fn decode<S: Scalar>(params: &DecoderParams<S>, features: &Matrix<S>) -> Result<Matrix<S>> {
    Ok(params.forward(features)?.0)
}

/// `teacher ← alpha·teacher + (1 − alpha)·student`, element-wise.
pub fn ema_update<S: Scalar, P: ParamSet<S>>(teacher: &mut P, student: &P, alpha: S) -> Result<()> {
    if !(alpha >= S::zero() && alpha <= S::one()) {
        return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1]")));
    }
    teacher.check_same_shapes(student)?;
    let keep = S::one() - alpha;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + keep * sv;
        }
    }
    Ok(())
}
