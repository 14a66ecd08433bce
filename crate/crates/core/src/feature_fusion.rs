//! Feature-level and hybrid fusion: the declarative [`FusionSpec`], the
//! concatenation and cross-attention fusion layers, and Conv1S injection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, FeatureSource};
use crate::error::{Error, Result};
use crate::nn::{Attention, AttentionOutput, Conv, Fx, Linear, Scope};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Pixel,
    Feature,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Dmf,
    Conv1e,
    Hsd,
    Rgbd,
    Concat,
    CrossAttention,
    Conv1s,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Early,
    Middle,
    Late,
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Depth,
    Rgbd,
    Hsd,
    MaeCd,
}

macro_rules! names {
    ($ty:ident { $($var:ident => [$($s:literal),+]),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($($s)|+ => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $($ty::$var => names!(@first $($s),+),)+ };
                f.write_str(name)
            }
        }
    };
    (@first $a:literal $(, $rest:literal)*) => { $a };
}

names!(Family { Pixel => ["pixel"], Feature => ["feature"], Hybrid => ["hybrid"] });
names!(Method {
    Dmf => ["dmf"],
    Conv1e => ["conv1e"],
    Hsd => ["hsd"],
    Rgbd => ["rgbd"],
    Concat => ["concat"],
    CrossAttention => ["cross_attention", "cross-attention", "ca"],
    Conv1s => ["conv1s"],
    None => ["none"],
});
names!(Position {
    Early => ["early"],
    Middle => ["middle"],
    Late => ["late"],
    NotApplicable => ["n/a", "na", "none"],
});
names!(Modality {
    Rgb => ["rgb"],
    Depth => ["depth"],
    Rgbd => ["rgbd"],
    Hsd => ["hsd"],
    MaeCd => ["mae_cd", "maecd"],
});

/// How one input stream is produced before any feature-level fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    Rgb,
    /// Depth replicated to three channels through its own backbone.
    Depth,
    Rgbd,
    Hsd,
    Dmf,
    Conv1e,
    /// RGB backbone with a Conv1S depth branch summed into stage 1.
    Conv1sRgb,
    MaeCd,
}

impl StreamKind {
    pub fn needs_depth(self) -> bool {
        !matches!(self, StreamKind::Rgb | StreamKind::MaeCd)
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Depth => "depth",
            StreamKind::Rgbd => "rgbd",
            StreamKind::Hsd => "hsd",
            StreamKind::Dmf => "dmf",
            StreamKind::Conv1e => "conv1e",
            StreamKind::Conv1sRgb => "conv1s_rgb",
            StreamKind::MaeCd => "mae_cd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuseMethod {
    Concat,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// One stream, one encoder.
    Single,
    Early,
    Middle,
    Late,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub family: Family,
    pub method: Method,
    pub position: Position,
    pub inputs: Vec<Modality>,
}

fn rule(msg: impl Into<String>) -> Error {
    Error::Config(format!("invalid fusion spec: {}", msg.into()))
}

impl FusionSpec {
    pub fn new(family: Family, method: Method, position: Position, inputs: &[Modality]) -> Self {
        Self {
            family,
            method,
            position,
            inputs: inputs.to_vec(),
        }
    }

    /// The RGB-only baseline.
    pub fn baseline() -> Self {
        Self::new(Family::Feature, Method::None, Position::NotApplicable, &[Modality::Rgb])
    }

    pub fn parse(family: &str, method: &str, position: &str, inputs: &str) -> Result<Self> {
        let inputs = inputs
            .split(['+', ','])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Modality::from_str)
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            family: family.parse()?,
            method: method.parse()?,
            position: position.parse()?,
            inputs,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn fusing(&self) -> bool {
        matches!(self.method, Method::Concat | Method::CrossAttention)
    }

    pub fn validate(&self) -> Result<()> {
        use Modality::*;
        let inputs = self.inputs.as_slice();
        if self.fusing() && self.position == Position::NotApplicable {
            return Err(rule(format!("method {} requires a fusion position", self.method)));
        }
        if !self.fusing() && self.position != Position::NotApplicable {
            return Err(rule(format!(
                "method {} takes no position (got {})",
                self.method, self.position
            )));
        }
        match self.family {
            Family::Pixel => {
                let want: &[Modality] = match self.method {
                    Method::Dmf | Method::Conv1e => &[Rgb, Depth],
                    Method::Hsd => &[Hsd],
                    Method::Rgbd => &[Rgbd],
                    m => return Err(rule(format!("{m} is not a pixel-level method"))),
                };
                if inputs != want {
                    return Err(rule(format!(
                        "pixel method {} takes inputs {want:?}, got {inputs:?}",
                        self.method
                    )));
                }
            }
            Family::Feature => match self.method {
                Method::Concat | Method::CrossAttention | Method::Conv1s => {
                    if inputs != [Rgb, Depth] {
                        return Err(rule(format!(
                            "feature method {} takes inputs [Rgb, Depth], got {inputs:?}",
                            self.method
                        )));
                    }
                }
                Method::None => {
                    if inputs.len() != 1 {
                        return Err(rule(format!(
                            "method none takes exactly one input stream, got {inputs:?}"
                        )));
                    }
                }
                m => return Err(rule(format!("{m} is not a feature-level method"))),
            },
            Family::Hybrid => {
                if !self.fusing() {
                    return Err(rule(format!(
                        "hybrid fusion combines streams with concat or cross_attention, got {}",
                        self.method
                    )));
                }
                let ok = matches!(inputs, [Rgb, Rgbd] | [Rgb, Hsd] | [Rgb, MaeCd] | [Rgb, Depth, MaeCd]);
                if !ok {
                    return Err(rule(format!(
                        "hybrid inputs must be RGB plus one of RGBD/HSD/MAE_CD, or RGB+Depth+MAE_CD; got {inputs:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn streams(&self) -> Vec<StreamKind> {
        use Modality::*;
        let single = |m: Modality| match m {
            Rgb => StreamKind::Rgb,
            Depth => StreamKind::Depth,
            Rgbd => StreamKind::Rgbd,
            Hsd => StreamKind::Hsd,
            MaeCd => StreamKind::MaeCd,
        };
        match (self.family, self.method) {
            (Family::Pixel, Method::Dmf) => vec![StreamKind::Dmf],
            (Family::Pixel, Method::Conv1e) => vec![StreamKind::Conv1e],
            (Family::Pixel, Method::Hsd) => vec![StreamKind::Hsd],
            (Family::Pixel, _) => vec![StreamKind::Rgbd],
            (_, Method::Conv1s) => vec![StreamKind::Conv1sRgb],
            (Family::Hybrid, _) if self.inputs.len() == 3 => {
                vec![StreamKind::Conv1sRgb, StreamKind::MaeCd]
            }
            _ => self.inputs.iter().copied().map(single).collect(),
        }
    }

    pub fn fuse_method(&self) -> Option<FuseMethod> {
        match self.method {
            Method::Concat => Some(FuseMethod::Concat),
            Method::CrossAttention => Some(FuseMethod::CrossAttention),
            _ => None,
        }
    }

    pub fn topology(&self) -> Topology {
        match self.position {
            Position::Early => Topology::Early,
            Position::Middle => Topology::Middle,
            Position::Late => Topology::Late,
            Position::NotApplicable => Topology::Single,
        }
    }

    /// Encoder blocks instantiated per stack level.
    pub fn encoder_count(&self) -> usize {
        match self.topology() {
            Topology::Late => self.streams().len(),
            _ => 1,
        }
    }

    pub fn needs_depth(&self) -> bool {
        self.streams().iter().any(|s| s.needs_depth())
    }

    pub fn needs_features(&self) -> bool {
        self.streams().contains(&StreamKind::MaeCd)
    }
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inputs: Vec<String> = self.inputs.iter().map(|m| m.to_string()).collect();
        write!(
            f,
            "{}/{}/{}/{}",
            self.family,
            self.method,
            self.position,
            inputs.join("+")
        )
    }
}

fn same_extents<T: Real>(fx: &Fx<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (fx.tape.shape(a), fx.tape.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
        return Err(Error::shape(
            op,
            format!("feature maps {sa:?} and {sb:?} differ in batch or position count"),
        ));
    }
    Ok(())
}

/// Channel concatenation to `2d` followed by a linear map back to `d`.
#[derive(Clone, Debug)]
pub struct ConcatFuse {
    pub proj: Linear,
}

impl ConcatFuse {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(s, name, 2 * d, d)?,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, a: Var, b: Var) -> Result<Var> {
        same_extents(fx, "concat_fuse", a, b)?;
        let c = fx.tape.concat(&[a, b], 2)?;
        self.proj.forward(fx, c)
    }
}

/// Queries from one stream, keys/values from the other, plus a residual
/// from the query stream.
#[derive(Clone, Debug)]
pub struct CrossAttentionFuse {
    pub attn: Attention,
}

impl CrossAttentionFuse {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(s, name, d, heads)?,
        })
    }

    pub fn attend<T: Real>(&self, fx: &mut Fx<'_, T>, q_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        self.attn.attend(fx, q_src, kv_src, None)
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, q_src: Var, kv_src: Var) -> Result<Var> {
        let out = self.attn.forward(fx, q_src, kv_src, None)?;
        fx.tape.add(q_src, out)
    }
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Concat(ConcatFuse),
    CrossAttention {
        layer: CrossAttentionFuse,
        /// When false the second stream supplies the queries.
        first_queries: bool,
    },
}

impl Fuser {
    pub fn new<T: Real>(
        s: &mut Scope<'_, T>,
        name: &str,
        method: FuseMethod,
        d: usize,
        heads: usize,
        first_queries: bool,
    ) -> Result<Self> {
        let mut g = s.group("fusion");
        Ok(match method {
            FuseMethod::Concat => Fuser::Concat(ConcatFuse::new(&mut g, name, d)?),
            FuseMethod::CrossAttention => Fuser::CrossAttention {
                layer: CrossAttentionFuse::new(&mut g, name, d, heads)?,
                first_queries,
            },
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, a: Var, b: Var) -> Result<Var> {
        match self {
            Fuser::Concat(c) => c.forward(fx, a, b),
            Fuser::CrossAttention {
                layer,
                first_queries: true,
            } => layer.forward(fx, a, b),
            Fuser::CrossAttention { layer, .. } => layer.forward(fx, b, a),
        }
    }
}

/// Depth-side conv block shaped like the backbone's first convolution.
#[derive(Clone, Debug)]
pub struct Conv1sBranch {
    pub conv: Conv,
}

impl Conv1sBranch {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, backbone: &Backbone) -> Result<Self> {
        let first = &backbone.convs[0];
        let mut g = s.group("conv1s");
        Ok(Self {
            conv: Conv::new(
                &mut g,
                name,
                1,
                first.cout,
                first.kernel,
                first.stride,
                first.padding,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, depth: Var) -> Result<Var> {
        self.conv.forward(fx, depth)
    }

    /// Sums the branch output into the backbone's stage-1 pre-activation and
    /// runs the remaining stages.
    pub fn inject<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        backbone: &Backbone,
        rgb: Var,
        depth: Var,
    ) -> Result<FeatureMap> {
        let pre = backbone.first_conv_forward(fx, rgb)?;
        let side = self.forward(fx, depth)?;
        let (sp, ss) = (fx.tape.shape(pre).to_vec(), fx.tape.shape(side).to_vec());
        if sp != ss {
            return Err(Error::shape(
                "conv1s_inject",
                format!("depth branch output {ss:?} does not match first conv output {sp:?}"),
            ));
        }
        let sum = fx.tape.add(pre, side)?;
        let fm = backbone.forward_from_first(fx, sum)?;
        Ok(FeatureMap {
            data: fm.data,
            source: FeatureSource::Backbone,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::*;

    #[test]
    fn parse_and_display() {
        let s = FusionSpec::parse("feature", "cross_attention", "late", "RGB+Depth").unwrap();
        assert_eq!(s.inputs, vec![Rgb, Depth]);
        assert_eq!(s.to_string(), "feature/cross_attention/late/rgb+depth");
        assert!(FusionSpec::parse("feature", "concat", "n/a", "rgb,depth").is_err());
    }

    #[test]
    fn rule_violations_are_named() {
        let bad = FusionSpec::new(Family::Pixel, Method::Dmf, Position::Late, &[Rgb, Depth]);
        assert!(bad.validate().unwrap_err().to_string().contains("takes no position"));
        let bad = FusionSpec::new(Family::Feature, Method::Hsd, Position::NotApplicable, &[Hsd]);
        assert!(bad.validate().unwrap_err().to_string().contains("not a feature-level"));
        let bad = FusionSpec::new(Family::Hybrid, Method::Concat, Position::Late, &[Depth, MaeCd]);
        assert!(bad.validate().unwrap_err().to_string().contains("hybrid inputs"));
    }

    #[test]
    fn arity() {
        let late = FusionSpec::new(Family::Feature, Method::Concat, Position::Late, &[Rgb, Depth]);
        let early = FusionSpec::new(Family::Feature, Method::CrossAttention, Position::Early, &[Rgb, Depth]);
        assert_eq!(late.encoder_count(), 2);
        assert_eq!(early.encoder_count(), 1);
        let three = FusionSpec::new(Family::Hybrid, Method::Concat, Position::Middle, &[Rgb, Depth, MaeCd]);
        three.validate().unwrap();
        assert_eq!(three.streams(), vec![StreamKind::Conv1sRgb, StreamKind::MaeCd]);
        assert!(three.needs_depth() && three.needs_features());
        assert!(!FusionSpec::baseline().needs_depth());
    }

    mod props {
        use super::*;
        use crate::nn::{ParamStore, Scope};
        use crate::tensor::Tensor;
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn inputs(seed: u64, b: usize, p: usize, d: usize) -> (Tensor<f64>, Tensor<f64>) {
            let f = |off: u64| Tensor::from_fn(vec![b, p, d], move |i| ((i as u64 * 2654435761 + seed + off) % 1000) as f64 / 500.0 - 1.0);
            (f(0), f(7))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn cross_attention_rows_are_distributions(seed in any::<u64>(), b in 1usize..3, p in 1usize..6) {
                let d = 8;
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ca = CrossAttentionFuse::new(&mut Scope::root(&mut store, &mut rng), "ca", d, 2).unwrap();
                let (x, y) = inputs(seed, b, p, d);
                let mut fx = Fx::eval(&store);
                let (xv, yv) = (fx.input(x), fx.input(y));
                let out = ca.attend(&mut fx, xv, yv).unwrap();
                let w = fx.tape.value(out.weights);
                prop_assert_eq!(w.shape(), &[b, 2, p, p][..]);
                for row in w.data().chunks_exact(p) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn fusers_keep_the_model_width(seed in any::<u64>(), p in 1usize..6, concat in any::<bool>(), first in any::<bool>()) {
                let d = 8;
                let method = if concat { FuseMethod::Concat } else { FuseMethod::CrossAttention };
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = Fuser::new(&mut Scope::root(&mut store, &mut rng), "fuse", method, d, 4, first).unwrap();
                let (x, y) = inputs(seed, 2, p, d);
                let mut fx = Fx::eval(&store);
                let (xv, yv) = (fx.input(x), fx.input(y));
                let out = f.forward(&mut fx, xv, yv).unwrap();
                prop_assert_eq!(fx.tape.shape(out), &[2, p, d][..]);
            }
        }
    }
}
