//! Optimizer, loss and training loop for the trainable fusers.

mod adam;
mod loss;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::evaluation::{self, rank_of_gold};
use crate::fusion::{
    fuse_with, rank_candidates, scoring_graph, FuserKind, FuserModel, FusionError, FusionInput,
    MlpConfig, MlpParams, TrainableFuser, TransformerConfig, TransformerParams,
};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{cross_entropy, cross_entropy_from_logits};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} fuser has no trainable parameters")]
    NotTrainable(FuserKind),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{split} sample {index} has no gold label")]
    MissingGold { split: &'static str, index: usize },
    #[error("gold index {gold} out of range for {classes} classes")]
    GoldOutOfRange { gold: usize, classes: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient shape mismatch: {0}")]
    GradientShape(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub kind: FuserKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub scale: f64,
    /// Transformer dropout probability during training.
    pub dropout: f64,
}

impl TrainConfig {
    /// 3 epochs at learning rate 5e-5.
    pub fn mlp() -> Self {
        Self {
            kind: FuserKind::Mlp,
            epochs: 3,
            learning_rate: 5e-5,
            batch_size: 32,
            seed: 0,
            scale: crate::embedding::DEFAULT_SCALE,
            dropout: 0.0,
        }
    }

    /// 5 epochs at learning rate 3e-6.
    pub fn transformer() -> Self {
        Self {
            kind: FuserKind::Transformer,
            epochs: 5,
            learning_rate: 3e-6,
            ..Self::mlp()
        }
    }

    pub fn for_kind(kind: FuserKind) -> Result<Self, TrainError> {
        match kind {
            FuserKind::Mlp => Ok(Self::mlp()),
            FuserKind::Transformer => Ok(Self::transformer()),
            other => Err(TrainError::NotTrainable(other)),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.kind.is_trainable() {
            return Err(TrainError::NotTrainable(self.kind));
        }
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Metrics after one epoch. Validation metrics are absent when there is no
/// validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_hit_at_1: f64,
    pub train_mrr: f64,
    pub val_hit_at_1: Option<f64>,
    pub val_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport<F> {
    pub history: Vec<EpochRecord>,
    pub fuser: F,
}

/// Per-sample gradients and loss for one training example.
fn sample_gradient<F: TrainableFuser>(
    fuser: &F,
    input: &FusionInput,
    scale: f64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let gold = input.gold().expect("gold checked before training");
    let mut graph = scoring_graph(fuser, input, scale, dropout_rng)?;
    let loss = graph.tape.cross_entropy(graph.logits, gold)?;
    let value = graph.tape.value(loss).get(0, 0);
    let grads = graph.tape.backward(loss)?;
    Ok((value, grads.param_grads(&fuser.params().shapes())))
}

/// Loss and parameter gradients of one sample, without dropout.
pub fn loss_and_gradients<F: TrainableFuser>(
    fuser: &F,
    input: &FusionInput,
    scale: f64,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    if input.gold().is_none() {
        return Err(TrainError::MissingGold {
            split: "input",
            index: 0,
        });
    }
    sample_gradient(fuser, input, scale, None)
}

/// Deterministic per-sample dropout stream.
fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(position as u64).to_le_bytes());
    key[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(key)
}

/// Gold ranks of every input under the current parameters.
pub fn ranks<F: TrainableFuser>(
    fuser: &F,
    inputs: &[FusionInput],
    scale: f64,
) -> Result<Vec<usize>, TrainError> {
    inputs
        .par_iter()
        .map(|input| {
            let gold = input.gold().ok_or(TrainError::MissingGold {
                split: "evaluation",
                index: 0,
            })?;
            let score = fuse_with(fuser, input, scale)?;
            Ok(rank_of_gold(&rank_candidates(&score), gold)?)
        })
        .collect()
}

fn check_gold(split: &'static str, inputs: &[FusionInput]) -> Result<(), TrainError> {
    match inputs.iter().position(|i| i.gold().is_none()) {
        Some(index) => Err(TrainError::MissingGold { split, index }),
        None => Ok(()),
    }
}

/// Continues training `fuser` for `config.epochs` epochs.
///
/// Per-sample forward and backward passes run in parallel; their gradients
/// are summed in sample order so results do not depend on thread count.
pub fn train_from<F: TrainableFuser>(
    mut fuser: F,
    config: &TrainConfig,
    train: &[FusionInput],
    val: &[FusionInput],
) -> Result<TrainReport<F>, TrainError> {
    config.validate()?;
    if fuser.kind() != config.kind {
        return Err(TrainError::InvalidConfig(format!(
            "configuration is for {} but fuser is {}",
            config.kind,
            fuser.kind()
        )));
    }
    check_gold("training", train)?;
    check_gold("validation", val)?;
    if train.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    fuser.validate()?;

    let shapes = fuser.params().shapes();
    let mut state = AdamState::new(&shapes, AdamConfig::default());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let use_dropout = config.kind == FuserKind::Transformer && config.dropout > 0.0;
    let chunk = rayon::current_num_threads().max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad_sum: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
            let mut batch_loss = 0.0;
            for (part_no, part) in batch.chunks(chunk).enumerate() {
                let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = part
                    .par_iter()
                    .enumerate()
                    .map(|(j, &idx)| {
                        let position = batch_no * config.batch_size + part_no * chunk + j;
                        let mut rng = dropout_rng(config.seed, epoch, position);
                        let rng: Option<&mut dyn RngCore> = use_dropout.then_some(&mut rng as _);
                        sample_gradient(&fuser, &train[idx], config.scale, rng)
                    })
                    .collect();
                for r in results {
                    let (loss, grads) = match r {
                        Err(TrainError::Fusion(FusionError::DegenerateFusedEmbedding)) => {
                            return Err(TrainError::Divergence {
                                epoch,
                                batch: batch_no + 1,
                            })
                        }
                        other => other?,
                    };
                    batch_loss += loss;
                    for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                        acc.add_assign(g);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_no + 1,
                });
            }
            loss_sum += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            adam_step(fuser.params_mut(), &grad_sum, &mut state, config.learning_rate)?;
            if let Some(name) = fuser.params().first_non_finite() {
                log::warn!("parameter {name} became non-finite");
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_no + 1,
                });
            }
        }
        let train_ranks = ranks(&fuser, train, config.scale)?;
        let (val_hit_at_1, val_mrr) = if val.is_empty() {
            (None, None)
        } else {
            let r = ranks(&fuser, val, config.scale)?;
            (Some(evaluation::hit_at_1(&r)?), Some(evaluation::mrr(&r)?))
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_hit_at_1: evaluation::hit_at_1(&train_ranks)?,
            train_mrr: evaluation::mrr(&train_ranks)?,
            val_hit_at_1,
            val_mrr,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train HIT@1 {:.4} MRR {:.4}",
            record.mean_loss,
            record.train_hit_at_1,
            record.train_mrr
        );
        history.push(record);
    }
    Ok(TrainReport { history, fuser })
}

/// Initializes a fuser of `config.kind` from `config.seed` and trains it.
pub fn train_fuser(
    config: &TrainConfig,
    train: &[FusionInput],
    val: &[FusionInput],
) -> Result<TrainReport<FuserModel>, TrainError> {
    config.validate()?;
    let dim = train
        .first()
        .or(val.first())
        .map(FusionInput::dim)
        .ok_or(TrainError::EmptyTrainingSet)?;
    let model = init_model(config, dim)?;
    train_model(model, config, train, val)
}

/// Fresh parameters for `config.kind` at width `dim`, drawn from `config.seed`.
pub fn init_model(config: &TrainConfig, dim: usize) -> Result<FuserModel, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.kind {
        FuserKind::Mlp => Ok(FuserModel::Mlp(MlpParams::init(MlpConfig::new(dim), &mut rng)?)),
        FuserKind::Transformer => {
            let mut tc = TransformerConfig::new(dim);
            tc.dropout = config.dropout;
            Ok(FuserModel::Transformer(TransformerParams::init(tc, &mut rng)?))
        }
        other => Err(TrainError::NotTrainable(other)),
    }
}

/// Trains an already-built model (for example one loaded from a checkpoint).
pub fn train_model(
    model: FuserModel,
    config: &TrainConfig,
    train: &[FusionInput],
    val: &[FusionInput],
) -> Result<TrainReport<FuserModel>, TrainError> {
    match model {
        FuserModel::Mlp(p) => {
            let r = train_from(p, config, train, val)?;
            Ok(TrainReport {
                history: r.history,
                fuser: FuserModel::Mlp(r.fuser),
            })
        }
        FuserModel::Transformer(p) => {
            let r = train_from(p, config, train, val)?;
            Ok(TrainReport {
                history: r.history,
                fuser: FuserModel::Transformer(r.fuser),
            })
        }
        other => Err(TrainError::NotTrainable(other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<FusionInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut v = || -> Vec<f32> { (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
                let ctx = v();
                let retrieved = [v(), v(), v()];
                let cands: Vec<Vec<f32>> = (0..10).map(|_| v()).collect();
                let gold = (ctx[0].abs() * 10.0) as usize % 10;
                FusionInput::new(&ctx, &retrieved, &cands, Some(gold)).unwrap()
            })
            .collect()
    }

    #[test]
    fn defaults() {
        let m = TrainConfig::mlp();
        assert_eq!((m.epochs, m.learning_rate, m.batch_size), (3, 5e-5, 32));
        let t = TrainConfig::transformer();
        assert_eq!((t.epochs, t.learning_rate), (5, 3e-6));
        assert!(matches!(
            TrainConfig::for_kind(FuserKind::Average),
            Err(TrainError::NotTrainable(FuserKind::Average))
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = random_inputs(5, 8, 1);
        let mut cfg = TrainConfig::mlp();
        cfg.epochs = 0;
        let report = train_fuser(&cfg, &data, &[]).unwrap();
        assert!(report.history.is_empty());
        let init = init_model(&cfg, 8).unwrap();
        match (report.fuser, init) {
            (FuserModel::Mlp(a), FuserModel::Mlp(b)) => assert_eq!(a, b),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn missing_gold_is_rejected() {
        let mut data = random_inputs(3, 8, 2);
        data[1] = data[1].clone().with_gold(None).unwrap();
        let err = train_fuser(&TrainConfig::mlp(), &data, &[]).unwrap_err();
        assert!(matches!(err, TrainError::MissingGold { index: 1, .. }));
    }

    #[test]
    fn training_is_bit_reproducible_and_reports_every_epoch() {
        let data = random_inputs(40, 8, 3);
        let mut cfg = TrainConfig::mlp();
        cfg.learning_rate = 1e-3;
        let a = train_fuser(&cfg, &data[..30], &data[30..]).unwrap();
        let b = train_fuser(&cfg, &data[..30], &data[30..]).unwrap();
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| r.val_mrr.is_some()));
        assert_eq!(a.history, b.history);
        match (a.fuser, b.fuser) {
            (FuserModel::Mlp(x), FuserModel::Mlp(y)) => assert_eq!(x, y),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn transformer_dropout_training_is_reproducible() {
        let data = random_inputs(12, 8, 4);
        let mut cfg = TrainConfig::transformer();
        cfg.epochs = 2;
        cfg.batch_size = 5;
        cfg.dropout = 0.1;
        let mut tc = TransformerConfig::new(8);
        tc.heads = 2;
        tc.layers = 1;
        tc.dropout = 0.1;
        let init = TransformerParams::init(tc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = train_from(init.clone(), &cfg, &data, &[]).unwrap();
        let b = train_from(init.clone(), &cfg, &data, &[]).unwrap();
        assert_eq!(a.fuser, b.fuser);
        assert_ne!(a.fuser, init);
    }

    #[test]
    fn huge_learning_rate_reports_divergence_location() {
        let data = random_inputs(10, 4, 5);
        let mut cfg = TrainConfig::mlp();
        cfg.learning_rate = f64::MAX;
        let err = train_fuser(&cfg, &data, &[]).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { epoch: 1, batch: 1 }), "{err}");
    }
}
