use rand::{Rng, RngCore};

use super::{
    check_shapes, fuse_with, uniform_init, FusedScore, FuserKind, FusionError, FusionInput,
    TrainableFuser,
};
use crate::autodiff::{NodeId, ParamSet, Tape, Tensor};

const TENSORS_PER_LAYER: usize = 16;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Dropout probability applied during training only.
    pub dropout: f64,
}

impl TransformerConfig {
    /// Two layers, eight heads, feed-forward width `4 * dim`, no dropout.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 8,
            layers: 2,
            ff_dim: 4 * dim,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(FusionError::InvalidConfig(
                "transformer widths, heads and layers must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(FusionError::InvalidConfig(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FusionError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub(crate) fn expected(&self) -> Vec<(String, (usize, usize))> {
        let (d, f) = (self.dim, self.ff_dim);
        let mut out = Vec::new();
        for l in 0..self.layers {
            let shapes = [
                ("attn.wq", (d, d)),
                ("attn.bq", (1, d)),
                ("attn.wk", (d, d)),
                ("attn.bk", (1, d)),
                ("attn.wv", (d, d)),
                ("attn.bv", (1, d)),
                ("attn.wo", (d, d)),
                ("attn.bo", (1, d)),
                ("ln1.gain", (1, d)),
                ("ln1.bias", (1, d)),
                ("ff.w1", (d, f)),
                ("ff.b1", (1, f)),
                ("ff.w2", (f, d)),
                ("ff.b2", (1, d)),
                ("ln2.gain", (1, d)),
                ("ln2.bias", (1, d)),
            ];
            out.extend(
                shapes
                    .into_iter()
                    .map(|(n, s)| (format!("enc.{l}.{n}"), s)),
            );
        }
        out
    }
}

/// Post-norm encoder stack over the four source embeddings, sum-pooled.
/// No positional encodings: the sources are treated as a set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    config: TransformerConfig,
    params: ParamSet,
}

impl TransformerParams {
    pub fn init(config: TransformerConfig, rng: &mut dyn RngCore) -> Result<Self, FusionError> {
        config.validate()?;
        let (d, f) = (config.dim, config.ff_dim);
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in config.expected() {
            let tensor = if name.ends_with(".gain") {
                Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
            } else if name.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else if name.contains("ff.w2") || name.contains("ff.b2") {
                uniform_init(rng, rows, cols, f)
            } else {
                uniform_init(rng, rows, cols, d)
            };
            params.push(name, tensor);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: TransformerConfig, params: ParamSet) -> Result<Self, FusionError> {
        config.validate()?;
        check_shapes(&params, &config.expected())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> TransformerConfig {
        self.config
    }
}

fn dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<NodeId, FusionError> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 - p;
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(tape.mask(x, Tensor::from_vec(r, c, mask))?)
}

impl TrainableFuser for TransformerParams {
    fn kind(&self) -> FuserKind {
        FuserKind::Transformer
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
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId, FusionError> {
        let rows: Vec<NodeId> = input
            .sources()
            .iter()
            .map(|s| tape.constant(Tensor::row_vector(s.to_vec())))
            .collect();
        let mut x = tape.stack(&rows)?;
        let drop = self.config.dropout;
        for l in 0..self.config.layers {
            let w = &p[l * TENSORS_PER_LAYER..(l + 1) * TENSORS_PER_LAYER];
            let project = |tape: &mut Tape, weight: NodeId, bias: NodeId| -> Result<NodeId, FusionError> {
                let y = tape.matmul(x, weight)?;
                Ok(tape.add_row(y, bias)?)
            };
            let q = project(tape, w[0], w[1])?;
            let k = project(tape, w[2], w[3])?;
            let v = project(tape, w[4], w[5])?;
            let attn = tape.attention(q, k, v, self.config.heads)?;
            let attn = tape.matmul(attn, w[6])?;
            let attn = tape.add_row(attn, w[7])?;
            let attn = dropout(tape, attn, drop, &mut rng)?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(res, w[8], w[9], LAYER_NORM_EPS)?;

            let h = tape.matmul(x, w[10])?;
            let h = tape.add_row(h, w[11])?;
            let h = tape.relu(h);
            let h = dropout(tape, h, drop, &mut rng)?;
            let ff = tape.matmul(h, w[12])?;
            let ff = tape.add_row(ff, w[13])?;
            let ff = dropout(tape, ff, drop, &mut rng)?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(res, w[14], w[15], LAYER_NORM_EPS)?;
        }
        Ok(tape.sum_rows(x))
    }
}

pub fn transformer_fuse(
    input: &FusionInput,
    params: &TransformerParams,
    scale: f64,
) -> Result<FusedScore, FusionError> {
    fuse_with(params, input, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_input(dim: usize, seed: u64) -> FusionInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || -> Vec<f32> { (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let ctx = v();
        let retrieved = [v(), v(), v()];
        let cands: Vec<Vec<f32>> = (0..10).map(|_| v()).collect();
        FusionInput::new(&ctx, &retrieved, &cands, Some(3)).unwrap()
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            TransformerParams::init(TransformerConfig::new(12), &mut rng),
            Err(FusionError::InvalidConfig(_))
        ));
    }

    #[test]
    fn default_layout_has_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TransformerParams::init(TransformerConfig::new(16), &mut rng).unwrap();
        assert_eq!(p.params().len(), 32);
        assert_eq!(p.params().names()[0], "enc.0.attn.wq");
        assert_eq!(p.params().by_name("enc.1.ln2.gain").unwrap().data(), &[1.0; 16]);
        assert_eq!(p.params().by_name("enc.1.ff.w1").unwrap().shape(), (16, 64));
    }

    #[test]
    fn permuting_sources_is_bitwise_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TransformerParams::init(TransformerConfig::new(16), &mut rng).unwrap();
        let input = toy_input(16, 2);
        let base = transformer_fuse(&input, &p, 100.0).unwrap();
        let permuted = transformer_fuse(&input.permute_sources([2, 0, 3, 1]), &p, 100.0).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn dropout_only_applies_with_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = TransformerConfig::new(8);
        cfg.heads = 2;
        cfg.dropout = 0.5;
        let p = TransformerParams::init(cfg, &mut rng).unwrap();
        let input = toy_input(8, 4);
        let a = transformer_fuse(&input, &p, 100.0).unwrap();
        let b = transformer_fuse(&input, &p, 100.0).unwrap();
        assert_eq!(a, b);

        let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
        let g = crate::fusion::scoring_graph(&p, &input, 100.0, Some(&mut drop_rng)).unwrap();
        let dropped = g.tape.value(g.fused).row(0).to_vec();
        assert_ne!(Some(dropped), a.fused);
    }
}
