//! The five-layer encoder block and its dual-input middle-fusion variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_fusion::{FuseMethod, Fuser};
use crate::nn::{Attention, Fx, LayerNorm, Linear, Scope};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub dense: usize,
    pub dropout: f64,
    pub stack_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            dense: 128,
            dropout: 0.1,
            stack_count: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.stack_count == 0 || self.dense == 0 {
            return Err(Error::Config("encoder stack_count and dense width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trace labels of the block's layers, in execution order.
pub const BLOCK_LAYERS: [&str; 5] = [
    "layer_norm",
    "dense_relu",
    "dropout",
    "self_attention",
    "residual_layer_norm",
];

/// Norm, dense + ReLU and dropout: the per-stream front of a block.
#[derive(Clone, Debug)]
pub struct StreamFront {
    pub norm: LayerNorm,
    pub dense: Linear,
    drop_name: String,
}

impl StreamFront {
    fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, d: usize, dense: usize) -> Result<Self> {
        let mut s = s.child(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", d)?,
            dense: Linear::new(&mut s, "dense", d, dense)?,
            drop_name: format!("{name}.dropout"),
        })
    }

    fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var, p: f64) -> Result<Var> {
        let h = self.norm.forward(fx, x)?;
        fx.record(BLOCK_LAYERS[0]);
        let h = self.dense.forward(fx, h)?;
        let h = fx.tape.relu(h);
        fx.record(BLOCK_LAYERS[1]);
        let h = fx.dropout(h, p, &self.drop_name)?;
        fx.record(BLOCK_LAYERS[2]);
        Ok(h)
    }
}

/// Self-attention plus layer norm over `attention + attention input`.
#[derive(Clone, Debug)]
pub struct AttentionTail {
    pub attn: Attention,
    pub norm: LayerNorm,
}

impl AttentionTail {
    fn new<T: Real>(s: &mut Scope<'_, T>, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(s, "attn", width, heads)?,
            norm: LayerNorm::new(s, "out_norm", width)?,
        })
    }

    fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, h: Var) -> Result<Var> {
        let a = self.attn.forward(fx, h, h, None)?;
        fx.record(BLOCK_LAYERS[3]);
        let r = fx.tape.add(a, h)?;
        let out = self.norm.forward(fx, r)?;
        fx.record(BLOCK_LAYERS[4]);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub front: StreamFront,
    pub tail: AttentionTail,
}

impl EncoderBlock {
    fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut s = s.child(name);
        Ok(Self {
            front: StreamFront::new(&mut s, "front", cfg.d_model, cfg.dense)?,
            tail: AttentionTail::new(&mut s, cfg.dense, cfg.heads)?,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var, p: f64) -> Result<Var> {
        let h = self.front.forward(fx, x, p)?;
        self.tail.forward(fx, h)
    }
}

fn check_dense(cfg: &EncoderConfig) -> Result<()> {
    // The block output feeds the next block and the decoder at width d_model.
    if cfg.dense != cfg.d_model {
        return Err(Error::Config(format!(
            "encoder dense width {} must equal d_model {}",
            cfg.dense, cfg.d_model
        )));
    }
    Ok(())
}

/// Optional input projection to `d_model`, then `stack_count` blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub proj: Option<Linear>,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    /// `input_width = None` skips the projection (input is already `d_model`).
    pub fn new<T: Real>(
        s: &mut Scope<'_, T>,
        name: &str,
        config: EncoderConfig,
        input_width: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        check_dense(&config)?;
        let mut s = s.child(name);
        let proj = match input_width {
            Some(w) => Some(Linear::new(&mut s.group("projection"), "proj", w, config.d_model)?),
            None => None,
        };
        let mut g = s.group("encoder");
        let blocks = (0..config.stack_count)
            .map(|i| EncoderBlock::new(&mut g, &format!("block{i}"), &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            proj,
            blocks,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var) -> Result<Var> {
        let mut h = match &self.proj {
            Some(p) => p.forward(fx, x)?,
            None => x,
        };
        for b in &self.blocks {
            h = b.forward(fx, h, self.config.dropout)?;
        }
        Ok(h)
    }
}

/// Dual-input block: each stream runs its own norm/dense/dropout front, the
/// fusion layer merges them, then self-attention and the residual norm.
/// Further blocks (`stack_count > 1`) are plain encoder blocks.
#[derive(Clone, Debug)]
pub struct MiddleFusionEncoder {
    pub config: EncoderConfig,
    pub proj_a: Option<Linear>,
    pub proj_b: Option<Linear>,
    pub front_a: StreamFront,
    pub front_b: StreamFront,
    pub fuser: Fuser,
    pub tail: AttentionTail,
    pub rest: Vec<EncoderBlock>,
}

impl MiddleFusionEncoder {
    pub fn new<T: Real>(
        s: &mut Scope<'_, T>,
        name: &str,
        config: EncoderConfig,
        input_widths: (Option<usize>, Option<usize>),
        method: FuseMethod,
        first_queries: bool,
    ) -> Result<Self> {
        config.validate()?;
        check_dense(&config)?;
        let mut s = s.child(name);
        let d = config.d_model;
        let (proj_a, proj_b) = {
            let mut p = s.group("projection");
            let a = input_widths.0.map(|w| Linear::new(&mut p, "proj_a", w, d)).transpose()?;
            let b = input_widths.1.map(|w| Linear::new(&mut p, "proj_b", w, d)).transpose()?;
            (a, b)
        };
        let mut g = s.group("encoder");
        let mut b0 = g.child("block0");
        let front_a = StreamFront::new(&mut b0, "front_a", d, config.dense)?;
        let front_b = StreamFront::new(&mut b0, "front_b", d, config.dense)?;
        let fuser = Fuser::new(&mut b0, "fuse", method, config.dense, config.heads, first_queries)?;
        let tail = AttentionTail::new(&mut b0, config.dense, config.heads)?;
        let rest = (1..config.stack_count)
            .map(|i| EncoderBlock::new(&mut g, &format!("block{i}"), &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            proj_a,
            proj_b,
            front_a,
            front_b,
            fuser,
            tail,
            rest,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, a: Var, b: Var) -> Result<Var> {
        let p = self.config.dropout;
        let a = match &self.proj_a {
            Some(l) => l.forward(fx, a)?,
            None => a,
        };
        let b = match &self.proj_b {
            Some(l) => l.forward(fx, b)?,
            None => b,
        };
        let ha = self.front_a.forward(fx, a, p)?;
        let hb = self.front_b.forward(fx, b, p)?;
        let fused = self.fuser.forward(fx, ha, hb)?;
        fx.record("fusion");
        let mut h = self.tail.forward(fx, fused)?;
        for blk in &self.rest {
            h = blk.forward(fx, h, p)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            dense: 8,
            dropout: 0.1,
            stack_count: 1,
        }
    }

    #[test]
    fn layer_order_matches_the_block_definition() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut Scope::root(&mut store, &mut rng), "enc", small(), Some(5)).unwrap();
        let mut fx = Fx::eval(&store);
        fx.enable_trace();
        let x = fx.input(Tensor::from_fn(vec![2, 3, 5], |i| (i as f64).cos()));
        let y = enc.forward(&mut fx, x).unwrap();
        assert_eq!(fx.tape.shape(y), &[2, 3, 8]);
        assert_eq!(fx.trace().unwrap(), &BLOCK_LAYERS);
    }

    #[test]
    fn config_rules() {
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_and_blocks_are_grouped_apart() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig {
            stack_count: 2,
            ..small()
        };
        Encoder::new(&mut Scope::root(&mut store, &mut rng), "enc", cfg, Some(5)).unwrap();
        let groups = store.trainable_by_group();
        assert_eq!(groups["projection"], 5 * 8 + 8);
        // per block: 2 norms (2·8 each), dense 8·8+8, attention 4·(8·8+8)
        assert_eq!(groups["encoder"], 2 * (32 + 72 + 4 * 72));
    }

    #[test]
    fn zeroed_attention_leaves_the_normed_residual() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(&mut Scope::root(&mut store, &mut rng), "enc", small(), None).unwrap();
        let block = &enc.blocks[0];
        let o = &block.tail.attn.o;
        store.set_value(o.w, Tensor::zeros(vec![8, 8])).unwrap();
        store.set_value(o.b.unwrap(), Tensor::zeros(vec![8])).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 8], |i| (i as f64 * 0.37).sin());
        let mut fx = Fx::eval(&store);
        let xv = fx.input(x);
        let y = block.forward(&mut fx, xv, 0.1).unwrap();
        let h = block.front.forward(&mut fx, xv, 0.1).unwrap();
        let want = block.tail.norm.forward(&mut fx, h).unwrap();
        assert!(fx.tape.value(y).max_abs_diff(fx.tape.value(want)) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn positions_permute_through_the_encoder(
                seed in any::<u64>(),
                perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
            ) {
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cfg = EncoderConfig { stack_count: 2, ..small() };
                let enc = Encoder::new(&mut Scope::root(&mut store, &mut rng), "enc", cfg, Some(3)).unwrap();
                let x = Tensor::from_fn(vec![1, 5, 3], |i| ((i as u64 ^ seed) % 17) as f64 / 8.0 - 1.0);
                let px = Tensor::from_fn(vec![1, 5, 3], |i| x.data()[perm[i / 3] * 3 + i % 3]);
                let mut fx = Fx::eval(&store);
                let a = fx.input(x);
                let b = fx.input(px);
                let ya = enc.forward(&mut fx, a).unwrap();
                let yb = enc.forward(&mut fx, b).unwrap();
                let (ya, yb) = (fx.tape.value(ya), fx.tape.value(yb));
                for (p, &src) in perm.iter().enumerate() {
                    for c in 0..8 {
                        prop_assert!((yb.data()[p * 8 + c] - ya.data()[src * 8 + c]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
