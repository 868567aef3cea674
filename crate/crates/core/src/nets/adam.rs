use crate::error::{Error, Result};
use crate::nets::ParamBlock;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update. Gradients are checked block by block
/// before anything is mutated.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, blocks: &[ParamBlock]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch { expected: vec![params.len()], got: vec![grads.len(), state.m.len()] });
    }
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidRange(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for b in blocks {
        if grads[b.offset..b.offset + b.len].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(b.name.clone()));
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("index {i}")));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        *p -= update;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(len: usize) -> Vec<ParamBlock> {
        vec![ParamBlock { name: "w".into(), offset: 0, len }]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::with_lr(0.1), &block(2)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::with_lr(1e-3);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut p, &[0.37], &mut st, &cfg, &block(1)).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9, "step {last}");
    }

    #[test]
    fn quadratic_converges() {
        // loss = (p - 3)^2, gradient 2 (p - 3)
        let mut p: Vec<f64> = vec![-4.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::with_lr(1e-2);
        let mut steps = 0;
        while (p[0] - 3.0).abs() >= 1e-6 && steps < 5000 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut st, &cfg, &block(1)).unwrap();
            steps += 1;
        }
        assert!((p[0] - 3.0).abs() < 1e-6, "p={} after {steps} steps", p[0]);
    }

    #[test]
    fn names_the_bad_block() {
        let blocks = vec![
            ParamBlock { name: "layer0.weight".into(), offset: 0, len: 2 },
            ParamBlock { name: "layer0.bias".into(), offset: 2, len: 1 },
        ];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let err = adam_step(&mut p, &[0.0, 0.0, f64::NAN], &mut st, &AdamConfig::with_lr(0.1), &blocks).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "layer0.bias"));
        assert_eq!(st.step, 0);
        assert_eq!(p, vec![0.0; 3]);
    }
}
