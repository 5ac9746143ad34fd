use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Moment estimates for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Defaults of the training setup: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn with_defaults(params: &ParamStore) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8)
    }
}

/// One Adam update. Parameters without a gradient keep their value and
/// moments; the step counter advances once per call.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (id, g) in grads {
        let p = params.get(*id);
        if p.shape() != g.shape() || state.first_moment[id.index()].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.name(*id))));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    for (id, g) in grads {
        let m = state.first_moment[id.index()].data_mut();
        let v = state.second_moment[id.index()].data_mut();
        let p = params.get_mut(*id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = AdamState::with_defaults(&s);
        adam_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, 1e-3).unwrap();
        assert_eq!(s.get(id).item(), 0.7);
        assert_eq!(st.first_moment[0].item(), 0.0);
        assert_eq!(st.second_moment[0].item(), 0.0);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::with_defaults(&s);
        adam_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st, 1e-5).unwrap();
        let expected = 1.0 - 1e-5 * (1.0 / (1.0 + 1e-8));
        assert!((s.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::with_defaults(&s);
        let bad = Tensor::zeros(&[2]);
        assert!(matches!(
            adam_step(&mut s, &[(id, bad)], &mut st, 1e-3),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            adam_step(&mut s, &[(id, Tensor::scalar(f64::NAN))], &mut st, 1e-3),
            Err(Error::NonFinite(_))
        ));
        assert!(adam_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st, 0.0).is_err());
        assert_eq!(st.step_count, 0);
    }

    /// Straight transcription of the update rule for one scalar.
    fn reference_adam(mut x: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn trajectory_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x0: f64 = rng.random_range(-2.0..2.0);
            let grads: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let expected = reference_adam(x0, &grads, 1e-2);
            let (mut s, id) = scalar_store(x0);
            let mut st = AdamState::with_defaults(&s);
            for (g, want) in grads.iter().zip(&expected) {
                adam_step(&mut s, &[(id, Tensor::scalar(*g))], &mut st, 1e-2).unwrap();
                assert!((s.get(id).item() - want).abs() < 1e-12);
            }
            assert_eq!(st.step_count, 10);
        }
    }
}
