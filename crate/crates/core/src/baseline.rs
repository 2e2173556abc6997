//! Mean-pooled linear comparison model: the feature map is averaged over
//! grid positions and passed through a single linear layer, trained with
//! the same multi-similarity loss, optimizer and batch schedule as the
//! residual-encoding branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{sample_batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{ms_loss, similarity_matrix, LossWeights};
use crate::model::ParamGroup;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{batch_rng, Optimizer, TrainConfig};

/// Linear map on mean-pooled features. Parameters live in two groups,
/// weight then bias, so the shared optimizer applies directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub groups: Vec<ParamGroup>,
}

impl BaselineModel {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal parameters are valid");
        let scale = 1.0 / (in_dim as f64).sqrt();
        BaselineModel {
            in_dim,
            out_dim,
            groups: vec![
                ParamGroup {
                    name: "baseline.weight".into(),
                    shape: vec![out_dim, in_dim],
                    data: (0..out_dim * in_dim).map(|_| normal.sample(rng) * scale).collect(),
                },
                ParamGroup {
                    name: "baseline.bias".into(),
                    shape: vec![out_dim],
                    data: vec![0.0; out_dim],
                },
            ],
        }
    }

    pub fn weight(&self) -> &[f64] {
        &self.groups[0].data
    }

    pub fn bias(&self) -> &[f64] {
        &self.groups[1].data
    }

    fn register(&self, tape: &mut Tape, requires_grad: bool) -> (Tensor, Tensor) {
        let weight = tape.leaf(
            Tensor::matrix(self.out_dim, self.in_dim, self.groups[0].data.clone())
                .expect("weight extents fixed at construction"),
            requires_grad,
        );
        let bias = tape.leaf(
            Tensor::vector(self.groups[1].data.clone()).expect("bias is finite"),
            requires_grad,
        );
        (weight, bias)
    }

    fn forward(&self, tape: &mut Tape, weight: &Tensor, bias: &Tensor, s: &Sample) -> Result<Tensor> {
        let features = tape.leaf(s.feature_map.to_tensor(), false);
        let sums = tape.col_sum(&features)?;
        let pooled = tape.mul_const(&sums, 1.0 / s.feature_map.positions() as f64)?;
        let z = tape.matvec(weight, &pooled)?;
        tape.add(&z, bias)
    }

    /// Frozen embeddings in sample order (raw, unnormalized).
    pub fn embed_samples(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        samples
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let (weight, bias) = self.register(&mut tape, false);
                Ok(self.forward(&mut tape, &weight, &bias, s)?.data().to_vec())
            })
            .collect()
    }
}

/// Train the baseline with the MS objective under the same batch schedule
/// as [`crate::trainer::train`]; returns per-step MS loss values.
pub fn train_baseline(
    model: &mut BaselineModel,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.weights.lambda1.is_empty() {
        return Err(Error::InvalidParameter("lambda1 must cover one branch".into()));
    }
    let sizes: Vec<usize> = model.groups.iter().map(|g| g.len()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut rng: ChaCha8Rng = batch_rng(cfg.seed);
    let ms_weight = cfg.weights.lambda1[0];

    let mut history = Vec::with_capacity(cfg.total_steps());
    for step in 0..cfg.total_steps() {
        let batch = sample_batch(data, cfg.p, cfg.q, &mut rng)?;
        let labels = batch.labels();

        let mut tape = Tape::new();
        let (weight, bias) = model.register(&mut tape, true);
        let embeddings: Vec<Tensor> = batch
            .samples
            .iter()
            .map(|s| model.forward(&mut tape, &weight, &bias, s))
            .collect::<Result<_>>()?;
        let sim = similarity_matrix(&mut tape, &embeddings)?;
        let ms = ms_loss(&mut tape, &sim, &labels, &cfg.weights)?;
        let loss = tape.mul_const(&ms, ms_weight)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grads = tape.backward(&loss)?;
        let per_group = vec![grads.get_or_zero(&weight), grads.get_or_zero(&bias)];
        optimizer.apply(&mut model.groups, &per_group);
        history.push(value);
    }
    Ok(history)
}

/// Convenience for experiments: zero-weight loss entries reuse the CRT
/// defaults so both models see identical MS hyperparameters.
pub fn baseline_loss_weights(base: &LossWeights) -> LossWeights {
    LossWeights {
        lambda1: vec![1.0],
        lambda2: 0.0,
        ..base.clone()
    }
}
