//! A small convolutional feature extractor with first-conv hooks, per-layer
//! freezing, and the FCF1 feature-file codec for precomputed features.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Fx, ParamId, Scope};
use crate::tensor::{ConvGeometry, Padding, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
    /// Layers `1..=frozen_through` are frozen.
    pub frozen_through: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |c| Stage {
            out_channels: c,
            kernel: 3,
            stride: 2,
        };
        Self {
            in_channels: 3,
            stages: vec![stage(16), stage(32), stage(64)],
            frozen_through: 3,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn num_layers(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 4 {
            return Err(Error::Config(format!(
                "backbone input must have 3 or 4 channels, got {}",
                self.in_channels
            )));
        }
        if self.stages.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 stages".into()));
        }
        if self.frozen_through > self.stages.len() {
            return Err(Error::Config(format!(
                "frozen_through {} exceeds the {} backbone layers",
                self.frozen_through,
                self.stages.len()
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        self.output_grid().map(|_| ())
    }

    /// Spatial extent after every stage, starting from the input.
    pub fn extents(&self) -> Result<Vec<usize>> {
        let mut hw = self.image_size;
        let mut cin = self.in_channels;
        let mut out = vec![hw];
        for s in &self.stages {
            let g = ConvGeometry::new(&[1, hw, hw, cin], s.kernel, s.stride, Padding::Same)?;
            hw = g.ho;
            cin = s.out_channels;
            out.push(hw);
        }
        Ok(out)
    }

    fn output_grid(&self) -> Result<usize> {
        Ok(*self.extents()?.last().expect("at least the input extent"))
    }

    pub fn positions(&self) -> Result<usize> {
        let g = self.output_grid()?;
        Ok(g * g)
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Shape of the stage-1 pre-activation for a batch.
    pub fn stage1_shape(&self, batch: usize) -> Result<[usize; 4]> {
        let e = self.extents()?;
        Ok([batch, e[1], e[1], self.stages[0].out_channels])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Backbone,
    Precomputed,
}

/// `[batch, positions, channels]` features on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub data: Var,
    pub source: FeatureSource,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<Conv>,
    /// Extra first-conv input slice for a fourth (depth) channel.
    pub depth_slice: Option<ParamId>,
}

impl Backbone {
    /// Registers parameters under `name`. With `in_channels = 4` the first
    /// conv keeps a 3-channel weight and gains a separate zero-initialized
    /// depth slice, registered last so the RGB weights match a 3-channel
    /// backbone built from the same seed.
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut s = s.child(name);
        let mut s = s.group("backbone");
        let mut convs = Vec::with_capacity(config.stages.len());
        let mut cin = 3;
        for (i, st) in config.stages.iter().enumerate() {
            let layer = i + 1;
            let mut ls = s.trainable(layer > config.frozen_through);
            convs.push(Conv::new(
                &mut ls,
                &format!("conv{layer}"),
                cin,
                st.out_channels,
                st.kernel,
                st.stride,
                Padding::Same,
            )?);
            cin = st.out_channels;
        }
        let depth_slice = if config.in_channels == 4 {
            let k = config.stages[0].kernel;
            let c = config.stages[0].out_channels;
            let mut gs = s.group("conv1e");
            Some(gs.child("conv1").zeros("depth_w", &[k, k, 1, c])?)
        } else {
            None
        };
        Ok(Self {
            config,
            convs,
            depth_slice,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.convs.iter().flat_map(|c| [c.w, c.b]).collect();
        out.extend(self.depth_slice);
        out
    }

    fn check_channels<T: Real>(&self, fx: &Fx<'_, T>, image: Var) -> Result<()> {
        let s = fx.tape.shape(image);
        if s.len() != 4 || s[3] != self.config.in_channels {
            return Err(Error::shape(
                "backbone",
                format!(
                    "image {s:?} does not have {} channels",
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Stage-1 pre-activation.
    pub fn first_conv_forward<T: Real>(&self, fx: &mut Fx<'_, T>, image: Var) -> Result<Var> {
        self.check_channels(fx, image)?;
        let conv = &self.convs[0];
        match self.depth_slice {
            None => conv.forward(fx, image),
            Some(slice) => {
                let w3 = fx.param(conv.w);
                let wd = fx.param(slice);
                let w4 = fx.tape.concat(&[w3, wd], 2)?;
                conv.forward_with_weights(fx, image, w4)
            }
        }
    }

    /// Everything after the stage-1 pre-activation.
    pub fn forward_from_first<T: Real>(&self, fx: &mut Fx<'_, T>, pre: Var) -> Result<FeatureMap> {
        let mut x = fx.tape.relu(pre);
        for conv in &self.convs[1..] {
            let y = conv.forward(fx, x)?;
            x = fx.tape.relu(y);
        }
        let s = fx.tape.shape(x).to_vec();
        let data = fx.tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        Ok(FeatureMap {
            data,
            source: FeatureSource::Backbone,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, image: Var) -> Result<FeatureMap> {
        let pre = self.first_conv_forward(fx, image)?;
        self.forward_from_first(fx, pre)
    }
}

const FEATURE_MAGIC: &[u8] = b"FCF1\n";

/// Writes `[batch, positions, channels]` features in FCF1 format.
pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [b, p, c] = t.shape() else {
        return Err(Error::shape(
            "write_features",
            format!("features must be rank 3, got {:?}", t.shape()),
        ));
    };
    let mut buf = Vec::with_capacity(32 + t.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(format!("{b} {p} {c}\n").as_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let rest = bytes
        .strip_prefix(FEATURE_MAGIC)
        .ok_or_else(|| Error::format(origin, "missing FCF1 magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "unterminated header line"))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::format(origin, "header is not ASCII"))?;
    let dims: Vec<usize> = header
        .split_ascii_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(origin, format!("bad header {header:?}")))?;
    let [b, p, c] = dims[..] else {
        return Err(Error::format(
            origin,
            format!("header needs 3 extents, got {header:?}"),
        ));
    };
    let payload = &rest[nl + 1..];
    let want = b * p * c * 4;
    if payload.len() != want {
        return Err(Error::format(
            origin,
            format!(
                "payload has {} bytes, header {b}x{p}x{c} needs {want}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
        .collect();
    Tensor::new(vec![b, p, c], data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

/// Reads a feature file and checks its `[positions, channels]` extents.
pub fn load_precomputed_features(path: &Path, expected: (usize, usize)) -> Result<Tensor<f32>> {
    let t = read_features(path)?;
    let s = t.shape();
    if (s[1], s[2]) != expected {
        return Err(Error::format(
            path.display(),
            format!(
                "features are {}x{}, expected {}x{}",
                s[1], s[2], expected.0, expected.1
            ),
        ));
    }
    Ok(t)
}

/// Places precomputed features on the tape as an inert constant.
pub fn precomputed_map<T: Real>(fx: &mut Fx<'_, T>, features: Tensor<T>) -> FeatureMap {
    FeatureMap {
        data: fx.input(features),
        source: FeatureSource::Precomputed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: BackboneConfig) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::new(&mut Scope::root(&mut store, &mut rng), "bb", config).unwrap();
        (store, bb)
    }

    #[test]
    fn default_geometry() {
        let c = BackboneConfig::default();
        assert_eq!(c.positions().unwrap(), 16);
        assert_eq!(c.out_channels(), 64);
        let two = BackboneConfig {
            stages: c.stages[..2].to_vec(),
            frozen_through: 2,
            ..c
        };
        assert_eq!(two.positions().unwrap(), 64);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (store, bb) = build(BackboneConfig::default());
        let mut fx = Fx::eval(&store);
        let x = fx.input(Tensor::zeros(vec![2, 32, 32, 3]));
        let f = bb.forward(&mut fx, x).unwrap();
        assert_eq!(fx.tape.shape(f.data), &[2, 16, 64]);
        assert_eq!(fx.tape.value(f.data).max_abs(), 0.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (store, bb) = build(BackboneConfig::default());
        let mut fx = Fx::eval(&store);
        let x = fx.input(Tensor::zeros(vec![1, 32, 32, 4]));
        assert!(bb.forward(&mut fx, x).is_err());
    }

    #[test]
    fn config_rules() {
        let mut c = BackboneConfig {
            frozen_through: 4,
            ..BackboneConfig::default()
        };
        assert!(c.validate().is_err());
        c.frozen_through = 0;
        c.stages.truncate(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_codec_round_trip_and_truncation() {
        let t = Tensor::from_fn(vec![1, 49, 64], |i| (i as f32).sin());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fcf");
        write_features(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = load_precomputed_features(&p, (49, 64)).unwrap();
        assert_eq!(back, t);
        write_features(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert!(decode_features(&bytes[..bytes.len() - 4], "cut").is_err());
        assert!(load_precomputed_features(&p, (16, 64)).is_err());
    }

    #[test]
    fn precomputed_features_receive_no_gradient() {
        let store = ParamStore::<f64>::new();
        let mut fx = Fx::deterministic(&store);
        let m = precomputed_map(&mut fx, Tensor::from_fn(vec![1, 4, 3], |i| i as f64));
        assert!(!fx.tape.requires_grad(m.data));
        let sq = fx.tape.mul(m.data, m.data).unwrap();
        let loss = fx.tape.sum(sq);
        // Nothing on the tape needs a gradient, so backward has nothing to do.
        match fx.tape.backward(loss) {
            Ok(g) => assert!(g.get(m.data).is_none()),
            Err(e) => assert!(matches!(e, Error::Autodiff(_)), "{e}"),
        }
    }

    mod props {
        use super::*;
        use crate::tensor::{AdamW, AdamWConfig};
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn frozen_layers_do_not_move(frozen in 0usize..=3, seed in any::<u64>()) {
                let cfg = BackboneConfig { frozen_through: frozen, image_size: 8, ..BackboneConfig::default() };
                let mut store = ParamStore::<f32>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bb = Backbone::new(&mut Scope::root(&mut store, &mut rng), "bb", cfg).unwrap();
                let before = store.clone();
                let img = Tensor::from_fn(vec![2, 8, 8, 3], |i| ((i as u64 * 31 + seed) % 97) as f32 / 97.0);
                let grads = {
                    let mut fx = Fx::train(&store, seed, 0);
                    let x = fx.input(img);
                    let f = bb.forward(&mut fx, x).unwrap();
                    let sq = fx.tape.mul(f.data, f.data).unwrap();
                    let loss = fx.tape.sum(sq);
                    if frozen == 3 {
                        // A fully frozen backbone has nothing to differentiate.
                        prop_assert!(fx.tape.backward(loss).is_err());
                        vec![None; store.len()]
                    } else {
                        let mut g = fx.tape.backward(loss).unwrap();
                        fx.param_grads(&mut g)
                    }
                };
                store.apply(&mut AdamW::new(AdamWConfig::default()), &grads).unwrap();
                for (layer, conv) in bb.convs.iter().enumerate() {
                    let same = [conv.w, conv.b].iter().all(|&id| {
                        let (a, b) = (before.value(id).data(), store.value(id).data());
                        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                    });
                    if layer < frozen {
                        prop_assert!(same, "frozen layer {} moved", layer + 1);
                    } else {
                        prop_assert!(!same, "trainable layer {} did not move", layer + 1);
                    }
                }
            }
        }
    }
}
