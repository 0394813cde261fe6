use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// Adam moment hyperparameters. The paper names only the learning rate and
/// warm-up; these are the standard defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step counter, per-parameter moments, and the linear
/// warm-up that scales the learning rate from zero over the first
/// `warmup_batches` steps.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub step_count: u64,
    pub base_lr: f64,
    pub warmup_batches: u64,
    pub adam: AdamParams,
    first_moment: Vec<Tensor<F>>,
    second_moment: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(shapes: &[Vec<usize>], base_lr: f64, warmup_batches: u64) -> Self {
        Self {
            step_count: 0,
            base_lr,
            warmup_batches,
            adam: AdamParams::default(),
            first_moment: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// base_lr * min(1, step_count / warmup_batches).
    pub fn effective_lr(&self) -> f64 {
        if self.warmup_batches == 0 {
            return self.base_lr;
        }
        let f = (self.step_count as f64 / self.warmup_batches as f64).min(1.0);
        self.base_lr * f
    }
}

/// One Adam update over a flat list of parameters. `params` and `grads`
/// must be shape-congruent with the state's moments.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        p.same_shape(g, "adam_step grad")?;
        p.same_shape(m, "adam_step moment")?;
    }

    let lr = F::from_f64(state.effective_lr());
    let t = state.step_count + 1;
    let beta1 = F::from_f64(state.adam.beta1);
    let beta2 = F::from_f64(state.adam.beta2);
    let eps = F::from_f64(state.adam.eps);
    let bc1 = F::from_f64(1.0 - state.adam.beta1.powi(t as i32));
    let bc2 = F::from_f64(1.0 - state.adam.beta2.powi(t as i32));

    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        let pd = param.data_mut();
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (F::one() - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (F::one() - beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step_count = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_start_leaves_params_unchanged() {
        let mut p = Tensor::<f64>::full(vec![3], 2.0);
        let g = Tensor::<f64>::full(vec![3], 1.0);
        let mut state = OptimizerState::new(&[vec![3]], 1e-2, 10);
        assert_eq!(state.effective_lr(), 0.0);
        adam_step(&mut [&mut p], &[g], &mut state).unwrap();
        assert_eq!(p.data(), &[2.0, 2.0, 2.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn warmup_completes_at_configured_batch() {
        let mut state = OptimizerState::<f64>::new(&[vec![1]], 1e-2, 10);
        state.step_count = 10;
        assert!((state.effective_lr() - 1e-2).abs() < 1e-15);
        state.step_count = 5;
        assert!((state.effective_lr() - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn post_warmup_update_magnitude_is_lr() {
        // Constant gradient long past warm-up: bias-corrected Adam moves by
        // about -lr * sign(g) per step.
        let mut p = Tensor::<f64>::scalar(0.0);
        let g = Tensor::<f64>::scalar(-3.0);
        let mut state = OptimizerState::new(&[vec![1]], 1e-2, 10);
        for _ in 0..60 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state).unwrap();
        }
        let before = p.item();
        adam_step(&mut [&mut p], &[g.clone()], &mut state).unwrap();
        let step = p.item() - before;
        let expected = 1e-2; // -lr * sign(-3) = +lr
        assert!(
            (step - expected).abs() / expected < 0.05,
            "step {step} vs {expected}"
        );
    }

    #[test]
    fn zero_gradient_changes_only_step_count() {
        let mut p = Tensor::<f64>::full(vec![4], 1.5);
        let g = Tensor::<f64>::zeros(vec![4]);
        let mut state = OptimizerState::new(&[vec![4]], 1e-2, 0);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state).unwrap();
        }
        assert_eq!(p.data(), &[1.5, 1.5, 1.5, 1.5]);
        assert_eq!(state.step_count, 3);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        let g = Tensor::<f64>::zeros(vec![3]);
        let mut state = OptimizerState::new(&[vec![2]], 1e-2, 0);
        assert!(matches!(
            adam_step(&mut [&mut p], &[g], &mut state),
            Err(Error::Dimension(_))
        ));
    }
}
