//! Modality fusion: combine the augmented-context embedding with the
//! retrieved-image embeddings and score the candidate images.

mod average;
pub mod checkpoint;
mod mlp;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, ParamSet, Tape, Tensor};
use crate::embedding::{self, VectorError};

pub use average::{average_fuse, context_only_fuse};
pub use mlp::{mlp_fuse, MlpConfig, MlpParams};
pub use transformer::{transformer_fuse, TransformerConfig, TransformerParams};

/// Number of retrieved images fed to the fusers.
pub const RETRIEVED_SLOTS: usize = 3;
/// Number of candidate images per sample.
pub const CANDIDATES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("embedding dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("zero-norm {0} embedding")]
    ZeroVector(&'static str),
    #[error("no candidate embeddings")]
    NoCandidates,
    #[error("gold index {gold} out of range for {candidates} candidates")]
    GoldOutOfRange { gold: usize, candidates: usize },
    #[error("degenerate fused embedding (zero norm)")]
    DegenerateFusedEmbedding,
    #[error("non-finite value in parameter {0}")]
    NonFiniteParameter(String),
    #[error("invalid fuser configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Autodiff(AutodiffError),
}

impl From<AutodiffError> for FusionError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::ZeroNorm => FusionError::DegenerateFusedEmbedding,
            other => FusionError::Autodiff(other),
        }
    }
}

/// One sample ready for fusion. All embeddings are held L2-normalized in
/// `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    context: Vec<f64>,
    retrieved: [Vec<f64>; RETRIEVED_SLOTS],
    candidates: Vec<Vec<f64>>,
    gold: Option<usize>,
}

fn unit(v: &[f32], what: &'static str, dim: usize) -> Result<Vec<f64>, FusionError> {
    if v.len() != dim {
        return Err(FusionError::DimensionMismatch {
            what,
            expected: dim,
            got: v.len(),
        });
    }
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    embedding::l2_normalize64(&wide).map_err(|_| FusionError::ZeroVector(what))
}

impl FusionInput {
    /// Builds an input, normalizing every embedding.
    ///
    /// Only the first three retrieved embeddings are used. Fewer than three
    /// are padded by repeating the last one; with none, the context
    /// embedding fills all three slots.
    pub fn new<R: AsRef<[f32]>, C: AsRef<[f32]>>(
        context: &[f32],
        retrieved: &[R],
        candidates: &[C],
        gold: Option<usize>,
    ) -> Result<Self, FusionError> {
        let dim = context.len();
        if dim == 0 {
            return Err(FusionError::ZeroVector("context"));
        }
        let context = unit(context, "context", dim)?;
        let mut slots: Vec<Vec<f64>> = retrieved
            .iter()
            .take(RETRIEVED_SLOTS)
            .map(|r| unit(r.as_ref(), "retrieved", dim))
            .collect::<Result<_, _>>()?;
        let filler = slots.last().cloned().unwrap_or_else(|| context.clone());
        slots.resize(RETRIEVED_SLOTS, filler);
        if candidates.is_empty() {
            return Err(FusionError::NoCandidates);
        }
        let candidates: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| unit(c.as_ref(), "candidate", dim))
            .collect::<Result<_, _>>()?;
        if let Some(g) = gold {
            if g >= candidates.len() {
                return Err(FusionError::GoldOutOfRange {
                    gold: g,
                    candidates: candidates.len(),
                });
            }
        }
        let retrieved: [Vec<f64>; RETRIEVED_SLOTS] = slots.try_into().expect("resized to 3");
        Ok(Self {
            context,
            retrieved,
            candidates,
            gold,
        })
    }

    pub fn dim(&self) -> usize {
        self.context.len()
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn retrieved(&self) -> &[Vec<f64>; RETRIEVED_SLOTS] {
        &self.retrieved
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    pub fn gold(&self) -> Option<usize> {
        self.gold
    }

    pub fn with_gold(mut self, gold: Option<usize>) -> Result<Self, FusionError> {
        if let Some(g) = gold {
            if g >= self.candidates.len() {
                return Err(FusionError::GoldOutOfRange {
                    gold: g,
                    candidates: self.candidates.len(),
                });
            }
        }
        self.gold = gold;
        Ok(self)
    }

    /// Context followed by the retrieved embeddings.
    pub fn sources(&self) -> [&[f64]; RETRIEVED_SLOTS + 1] {
        [
            &self.context,
            &self.retrieved[0],
            &self.retrieved[1],
            &self.retrieved[2],
        ]
    }

    /// Returns a copy with the four source embeddings reordered so that
    /// slot `i` holds source `order[i]`.
    pub fn permute_sources(&self, order: [usize; RETRIEVED_SLOTS + 1]) -> Self {
        let src = self.sources();
        Self {
            context: src[order[0]].to_vec(),
            retrieved: [
                src[order[1]].to_vec(),
                src[order[2]].to_vec(),
                src[order[3]].to_vec(),
            ],
            candidates: self.candidates.clone(),
            gold: self.gold,
        }
    }

    /// Cosine of `v` (unit) with each candidate.
    pub fn candidate_cosines(&self, v: &[f64]) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| embedding::dot64(v, c))
            .collect()
    }

    /// Candidates as a `D x C` matrix, for scoring on a tape.
    fn candidate_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.candidates).transpose()
    }
}

/// Probabilities over candidates, plus the fused embedding when the fuser
/// produces one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScore {
    pub probabilities: Vec<f64>,
    pub fused: Option<Vec<f64>>,
}

/// Candidate indices by descending probability; ties keep ascending index.
pub fn rank_candidates(score: &FusedScore) -> Vec<usize> {
    let p = &score.probabilities;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FuserKind {
    Average,
    Mlp,
    Transformer,
    /// No fusion: the augmented-context embedding alone scores candidates.
    ClipAug,
}

impl FuserKind {
    pub fn name(self) -> &'static str {
        match self {
            FuserKind::Average => "average",
            FuserKind::Mlp => "mlp",
            FuserKind::Transformer => "transformer",
            FuserKind::ClipAug => "clip-aug",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, FuserKind::Mlp | FuserKind::Transformer)
    }
}

impl fmt::Display for FuserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FuserKind {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" => Ok(FuserKind::Average),
            "mlp" => Ok(FuserKind::Mlp),
            "transformer" => Ok(FuserKind::Transformer),
            "clip-aug" | "clip_aug" => Ok(FuserKind::ClipAug),
            other => Err(FusionError::InvalidConfig(format!("unknown fuser {other:?}"))),
        }
    }
}

/// A fuser with trainable parameters whose forward pass is recorded on a
/// [`Tape`].
pub trait TrainableFuser: Clone + Send + Sync {
    fn kind(&self) -> FuserKind;
    fn dim(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the forward pass and returns the fused (un-normalized)
    /// `1 x D` embedding node. `dropout` supplies randomness for training;
    /// `None` runs deterministically.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &FusionInput,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<NodeId, FusionError>;

    fn validate(&self) -> Result<(), FusionError> {
        match self.params().first_non_finite() {
            Some(name) => Err(FusionError::NonFiniteParameter(name.to_string())),
            None => Ok(()),
        }
    }
}

/// Nodes of a recorded scoring pass.
pub struct ScoringGraph {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub fused: NodeId,
    pub logits: NodeId,
}

/// Records fuser forward → L2 normalization → scaled cosine logits.
pub fn scoring_graph<F: TrainableFuser>(
    fuser: &F,
    input: &FusionInput,
    scale: f64,
    dropout: Option<&mut dyn RngCore>,
) -> Result<ScoringGraph, FusionError> {
    if input.dim() != fuser.dim() {
        return Err(FusionError::DimensionMismatch {
            what: "fusion input",
            expected: fuser.dim(),
            got: input.dim(),
        });
    }
    let mut tape = Tape::new();
    let params = fuser.params().bind(&mut tape);
    let raw = fuser.forward(&mut tape, &params, input, dropout)?;
    let fused = tape.l2_normalize_rows(raw)?;
    let cands = tape.constant(input.candidate_matrix());
    let cos = tape.matmul(fused, cands)?;
    let logits = tape.scale(cos, scale);
    Ok(ScoringGraph {
        tape,
        params,
        fused,
        logits,
    })
}

/// Inference with a trainable fuser.
pub fn fuse_with<F: TrainableFuser>(
    fuser: &F,
    input: &FusionInput,
    scale: f64,
) -> Result<FusedScore, FusionError> {
    fuser.validate()?;
    let graph = scoring_graph(fuser, input, scale, None)?;
    let fused = graph.tape.value(graph.fused).row(0).to_vec();
    let cosines = input.candidate_cosines(&fused);
    Ok(FusedScore {
        probabilities: embedding::softmax(&cosines, scale)?,
        fused: Some(fused),
    })
}

/// Any fuser, ready for inference.
#[derive(Debug, Clone)]
pub enum FuserModel {
    Average,
    ClipAug,
    Mlp(MlpParams),
    Transformer(TransformerParams),
}

impl FuserModel {
    pub fn kind(&self) -> FuserKind {
        match self {
            FuserModel::Average => FuserKind::Average,
            FuserModel::ClipAug => FuserKind::ClipAug,
            FuserModel::Mlp(_) => FuserKind::Mlp,
            FuserModel::Transformer(_) => FuserKind::Transformer,
        }
    }

    pub fn score(&self, input: &FusionInput, scale: f64) -> Result<FusedScore, FusionError> {
        match self {
            FuserModel::Average => average_fuse(input, scale),
            FuserModel::ClipAug => context_only_fuse(input, scale),
            FuserModel::Mlp(p) => mlp_fuse(input, p, scale),
            FuserModel::Transformer(p) => transformer_fuse(input, p, scale),
        }
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init(rng: &mut dyn RngCore, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    use rand::Rng;
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    )
}

pub(crate) fn check_shapes(
    params: &ParamSet,
    expected: &[(String, (usize, usize))],
) -> Result<(), FusionError> {
    if params.len() != expected.len() {
        return Err(FusionError::InvalidConfig(format!(
            "expected {} parameter tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, tensor), (want_name, want_shape)) in params.iter().zip(expected) {
        if name != want_name || tensor.shape() != *want_shape {
            return Err(FusionError::ParamShape {
                name: want_name.clone(),
                expected: *want_shape,
                got: tensor.shape(),
            });
        }
    }
    Ok(())
}
