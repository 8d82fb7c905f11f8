use rand::RngCore;

use super::{
    check_shapes, fuse_with, uniform_init, FusedScore, FuserKind, FusionError, FusionInput,
    TrainableFuser, RETRIEVED_SLOTS,
};
use crate::autodiff::{NodeId, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
}

impl MlpConfig {
    /// Hidden width twice the embedding width.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: 2 * dim,
        }
    }

    pub fn input_width(&self) -> usize {
        (RETRIEVED_SLOTS + 1) * self.dim
    }

    pub(crate) fn expected(&self) -> Vec<(String, (usize, usize))> {
        vec![
            ("mlp.w1".into(), (self.input_width(), self.hidden)),
            ("mlp.b1".into(), (1, self.hidden)),
            ("mlp.w2".into(), (self.hidden, self.dim)),
            ("mlp.b2".into(), (1, self.dim)),
        ]
    }
}

/// `concat(context, r1, r2, r3) -> linear -> relu -> linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    params: ParamSet,
}

impl MlpParams {
    pub fn init(config: MlpConfig, rng: &mut dyn RngCore) -> Result<Self, FusionError> {
        if config.dim == 0 || config.hidden == 0 {
            return Err(FusionError::InvalidConfig("MLP widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let (d4, h, d) = (config.input_width(), config.hidden, config.dim);
        params.push("mlp.w1", uniform_init(rng, d4, h, d4));
        params.push("mlp.b1", uniform_init(rng, 1, h, d4));
        params.push("mlp.w2", uniform_init(rng, h, d, h));
        params.push("mlp.b2", uniform_init(rng, 1, d, h));
        Ok(Self { config, params })
    }

    pub fn from_params(config: MlpConfig, params: ParamSet) -> Result<Self, FusionError> {
        check_shapes(&params, &config.expected())?;
        Ok(Self { config, params })
    }

    /// Builds parameters from explicit weights (`w1: 4D x H`, `w2: H x D`).
    pub fn from_weights(
        config: MlpConfig,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Result<Self, FusionError> {
        let mut params = ParamSet::new();
        params.push("mlp.w1", w1);
        params.push("mlp.b1", b1);
        params.push("mlp.w2", w2);
        params.push("mlp.b2", b2);
        Self::from_params(config, params)
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }
}

impl TrainableFuser for MlpParams {
    fn kind(&self) -> FuserKind {
        FuserKind::Mlp
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        input: &FusionInput,
        _dropout: Option<&mut dyn RngCore>,
    ) -> Result<NodeId, FusionError> {
        let parts: Vec<NodeId> = input
            .sources()
            .iter()
            .map(|s| tape.constant(Tensor::row_vector(s.to_vec())))
            .collect();
        let x = tape.concat(&parts)?;
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.relu(h);
        let out = tape.matmul(h, p[2])?;
        Ok(tape.add_row(out, p[3])?)
    }
}

pub fn mlp_fuse(
    input: &FusionInput,
    params: &MlpParams,
    scale: f64,
) -> Result<FusedScore, FusionError> {
    fuse_with(params, input, scale)
}
