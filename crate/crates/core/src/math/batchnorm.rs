use serde::{Deserialize, Serialize};

use crate::error::{FgaError, Result};
use crate::math::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with trainable affine terms and running statistics.
///
/// `channels == 1` is the scalar form used on pairwise interaction scores,
/// where every entry of every pooled score matrix is one sample.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Running statistics come from a training pass or a checkpoint.
    pub ready: bool,
}

impl BatchNormState {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(FgaError::Config(format!("batch norm momentum {momentum} outside (0,1)")));
        }
        if eps <= 0.0 {
            return Err(FgaError::Config("batch norm epsilon must be positive".into()));
        }
        let gamma = store.register(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)?)?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[channels])?)?;
        Ok(BatchNormState {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            ready: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes the rows of `x` (channels x samples).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(BatchStats { mean, var })))
            }
            Mode::Eval => {
                if !self.ready {
                    return Err(FgaError::BatchNormUninitialized(self.name.clone()));
                }
                let y = g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)?;
                Ok((y, None))
            }
        }
    }

    /// Scalar normalization pooled over every element of every tensor in `parts`.
    /// Outputs keep the shapes of their inputs.
    pub fn forward_pooled(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parts: &[Var],
        mode: Mode,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        if self.channels() != 1 {
            return Err(FgaError::Config(format!("`{}` is not a scalar batch norm", self.name)));
        }
        if parts.is_empty() {
            return Ok((Vec::new(), None));
        }
        let pool = g.concat_flat(parts)?;
        let (normed, stats) = self.forward(g, store, pool, mode)?;
        let mut out = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &p in parts {
            let shape = g.value(p).shape().to_vec();
            let n = g.value(p).len();
            out.push(g.slice_flat(normed, offset, &shape)?);
            offset += n;
        }
        Ok((out, stats))
    }

    /// Exponential moving average update of the running statistics.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.ready = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, BatchNormState) {
        let mut store = ParamStore::new();
        let bn = BatchNormState::new(&mut store, "bn", 1, 0.1, 1e-5).unwrap();
        (store, bn)
    }

    #[test]
    fn train_uses_population_variance() {
        let (store, bn) = setup();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap()).unwrap();
        let (y, stats) = bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = g.value(y).data();
        assert!((out[0] + expected).abs() < 1e-12 && (out[1] - expected).abs() < 1e-12);
        // Within 1e-5 of the exact (-1, 1) from the epsilon term.
        assert!((out[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn eval_with_unit_stats_is_identity_up_to_eps() {
        let (store, mut bn) = setup();
        bn.ready = true;
        bn.eps = 1e-300;
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-2.0, 0.5, 7.0]).unwrap()).unwrap();
        let x = g.reshape(x, &[1, 3]).unwrap();
        let (y, _) = bn.forward(&mut g, &store, x, Mode::Eval).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, 0.5, 7.0]);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let (mut store, bn) = setup();
        store.set_value(bn.gamma, Tensor::vector(vec![0.0]).unwrap()).unwrap();
        store.set_value(bn.beta, Tensor::vector(vec![0.25]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![1.0, 5.0, -2.0]).unwrap()).unwrap();
        let (y, _) = bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let (store, bn) = setup();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap()).unwrap();
        assert!(matches!(
            bn.forward(&mut g, &store, x, Mode::Eval),
            Err(FgaError::BatchNormUninitialized(_))
        ));
    }

    #[test]
    fn single_element_pool_is_rejected_in_training() {
        let (store, bn) = setup();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(bn.forward(&mut g, &store, x, Mode::Train).is_err());
    }

    #[test]
    fn pooled_statistics_span_all_parts() {
        let (store, mut bn) = setup();
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap()).unwrap();
        let (outs, stats) = bn.forward_pooled(&mut g, &store, &[a, b], Mode::Train).unwrap();
        assert_eq!(g.value(outs[1]).shape(), &[1, 2]);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        bn.update(&stats);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * (2.0 / 3.0))).abs() < 1e-15);
        assert!(bn.ready);
    }
}
