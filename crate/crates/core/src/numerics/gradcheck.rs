use crate::scalar::Scalar;

/// Largest relative disagreement between an analytic gradient and central
/// differences, per coordinate `|g - fd| / max(1, |fd|)`.
pub fn check_gradient<S, F, G>(f: F, grad_f: G, x: &[S], h: S) -> S
where
    S: Scalar,
    F: Fn(&[S]) -> S,
    G: Fn(&[S]) -> Vec<S>,
{
    let analytic = grad_f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match point");
    let two = S::lit(2.0);
    let mut probe = x.to_vec();
    let mut worst = S::zero();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let fd = (up - down) / (two * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(S::one());
        if err > worst || err.is_nan() {
            worst = err;
        }
    }
    worst
}
