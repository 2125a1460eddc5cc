use crate::error::Result;
use crate::model::ParamSet;
use crate::scalar::Scalar;

/// Gradient descent with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<P> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<P>,
}

impl<P> Sgd<P> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut P, grads: &P) -> Result<()>
    where
        P: ParamSet<S>,
    {
        params.check_same_shapes(grads)?;
        let mu = S::lit(self.momentum);
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        v.check_same_shapes(grads)?;
        for (vt, gt) in v.tensors_mut().into_iter().zip(grads.tensors()) {
            for (vv, &g) in vt.data_mut().iter_mut().zip(gt.data()) {
                *vv = mu * *vv + g;
            }
        }
        params.axpy(-S::lit(self.lr), v)
    }
}
