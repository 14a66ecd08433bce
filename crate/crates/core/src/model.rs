//! Wires a fusion spec into a full captioning graph: input streams, fusion
//! at the requested position, and the caption decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::ImageSample;
use crate::decoder::{Decoder, DecoderConfig, PAD};
use crate::encoder::{Encoder, EncoderConfig, MiddleFusionEncoder};
use crate::error::{Error, Result};
use crate::feature_fusion::{Conv1sBranch, Fuser, FusionSpec, StreamKind, Topology};
use crate::nn::{Fx, Linear, ParamStore, Scope};
use crate::pixel_fusion::{make_hsd, make_rgbd_image, Dmf, RgbdStack};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// `(positions, channels)` of precomputed feature files.
    pub feature_dims: (usize, usize),
    /// Cross-attention queries come from the first stream (RGB side).
    pub rgb_queries: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            feature_dims: (16, 64),
            rgb_queries: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "decoder width {} must equal encoder d_model {}",
                self.decoder.d_model, self.encoder.d_model
            )));
        }
        if self.feature_dims.0 == 0 || self.feature_dims.1 == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }
}

/// A batch of model inputs. `cached[i]`, when present, replaces stream `i`'s
/// feature extraction with precomputed `[B, P, C]` features.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    /// `[B, S, S, 3]`
    pub rgb: Tensor<T>,
    /// `[B, S, S, 1]`
    pub depth: Option<Tensor<T>>,
    /// `[B, P, C]`
    pub features: Option<Tensor<T>>,
    pub cached: Vec<Option<Tensor<T>>>,
}

fn stack<T: Real>(parts: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let casts: Vec<Tensor<T>> = parts.iter().map(|t| t.cast()).collect();
    Tensor::stack(&casts)
}

impl<T: Real> ModelInputs<T> {
    /// Stacks samples; depth and features are kept only if every sample has them.
    pub fn from_samples(samples: &[&ImageSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty sample batch".into()));
        }
        let rgb = stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
        let depth: Option<Vec<&Tensor<f32>>> = samples.iter().map(|s| s.depth.as_ref()).collect();
        let features: Option<Vec<&Tensor<f32>>> = samples.iter().map(|s| s.features.as_ref()).collect();
        Ok(Self {
            rgb,
            depth: depth.map(|d| stack(&d)).transpose()?,
            features: features.map(|f| stack(&f)).transpose()?,
            cached: Vec::new(),
        })
    }

    pub fn batch(&self) -> usize {
        self.rgb.shape()[0]
    }
}

/// Repeats a `[B, H, W, 1]` map to three channels.
pub fn replicate_depth<T: Real>(depth: &Tensor<T>) -> Result<Tensor<T>> {
    let s = depth.shape();
    let data = depth.data().iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::new(vec![s[0], s[1], s[2], 3], data)
}

#[derive(Clone, Debug)]
pub enum StreamNet {
    /// A backbone over a fixed (non-trainable) image transform.
    Image(Backbone),
    Dmf { dmf: Dmf, backbone: Backbone },
    Conv1e(Backbone),
    Conv1s { branch: Conv1sBranch, backbone: Backbone },
    Precomputed,
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub kind: StreamKind,
    pub net: StreamNet,
    /// Channel width of the stream's feature map.
    pub width: usize,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Single(Encoder),
    Early {
        proj_a: Linear,
        proj_b: Linear,
        fuser: Fuser,
        encoder: Encoder,
    },
    Middle(MiddleFusionEncoder),
    Late {
        encoders: Vec<Encoder>,
        fuser: Fuser,
    },
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub spec: FusionSpec,
    pub config: ModelConfig,
    pub streams: Vec<Stream>,
    pub body: Body,
    pub decoder: Decoder,
}

fn missing(spec: &FusionSpec, what: &str) -> Error {
    Error::Data(format!("fusion spec {spec} needs {what} but the inputs have none"))
}

impl CaptionModel {
    pub fn new<T: Real>(
        s: &mut Scope<'_, T>,
        spec: FusionSpec,
        config: ModelConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let kinds = spec.streams();
        let mut streams = Vec::with_capacity(kinds.len());
        for (i, &kind) in kinds.iter().enumerate() {
            let mut ss = s.child(&format!("stream{i}_{}", kind.name()));
            streams.push(Self::stream(&mut ss, kind, &config)?);
        }
        let enc = config.encoder.clone();
        let d = enc.d_model;
        let widths: Vec<usize> = streams.iter().map(|st| st.width).collect();
        let method = spec.fuse_method();
        let body = match (spec.topology(), method) {
            (Topology::Single, _) | (_, None) => Body::Single(Encoder::new(s, "encoder", enc, Some(widths[0]))?),
            (Topology::Early, Some(m)) => {
                let (proj_a, proj_b) = {
                    let mut p = s.child("early");
                    let mut p = p.group("projection");
                    (
                        Linear::new(&mut p, "proj_a", widths[0], d)?,
                        Linear::new(&mut p, "proj_b", widths[1], d)?,
                    )
                };
                let fuser = Fuser::new(&mut s.child("early"), "fuse", m, d, enc.heads, config.rgb_queries)?;
                let encoder = Encoder::new(s, "encoder", enc, None)?;
                Body::Early {
                    proj_a,
                    proj_b,
                    fuser,
                    encoder,
                }
            }
            (Topology::Middle, Some(m)) => Body::Middle(MiddleFusionEncoder::new(
                s,
                "encoder",
                enc,
                (Some(widths[0]), Some(widths[1])),
                m,
                config.rgb_queries,
            )?),
            (Topology::Late, Some(m)) => {
                let encoders = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| Encoder::new(s, &format!("encoder{i}"), enc.clone(), Some(w)))
                    .collect::<Result<Vec<_>>>()?;
                let fuser = Fuser::new(&mut s.child("late"), "fuse", m, d, enc.heads, config.rgb_queries)?;
                Body::Late { encoders, fuser }
            }
        };
        let decoder = Decoder::new(s, config.decoder.clone(), vocab_size)?;
        Ok(Self {
            spec,
            config,
            streams,
            body,
            decoder,
        })
    }

    /// Builds the model and its parameters from a seed.
    pub fn build<T: Real>(
        spec: FusionSpec,
        config: ModelConfig,
        vocab_size: usize,
        seed: u64,
    ) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut Scope::root(&mut store, &mut rng), spec, config, vocab_size)?;
        Ok((store, model))
    }

    fn stream<T: Real>(s: &mut Scope<'_, T>, kind: StreamKind, config: &ModelConfig) -> Result<Stream> {
        let bb = config.backbone.clone();
        let width = bb.out_channels();
        let net = match kind {
            StreamKind::Rgb | StreamKind::Depth | StreamKind::Rgbd | StreamKind::Hsd => {
                StreamNet::Image(Backbone::new(s, "backbone", BackboneConfig { in_channels: 3, ..bb })?)
            }
            StreamKind::Dmf => StreamNet::Dmf {
                dmf: Dmf::new(s, "dmf")?,
                backbone: Backbone::new(s, "backbone", BackboneConfig { in_channels: 3, ..bb })?,
            },
            StreamKind::Conv1e => {
                StreamNet::Conv1e(Backbone::new(s, "backbone", BackboneConfig { in_channels: 4, ..bb })?)
            }
            StreamKind::Conv1sRgb => {
                let backbone = Backbone::new(s, "backbone", BackboneConfig { in_channels: 3, ..bb })?;
                StreamNet::Conv1s {
                    branch: Conv1sBranch::new(s, "conv1s", &backbone)?,
                    backbone,
                }
            }
            StreamKind::MaeCd => {
                return Ok(Stream {
                    kind,
                    net: StreamNet::Precomputed,
                    width: config.feature_dims.1,
                })
            }
        };
        Ok(Stream { kind, net, width })
    }

    /// Number of encoder instances in the graph (one per stream for late
    /// fusion, otherwise one).
    pub fn encoder_instances(&self) -> usize {
        match &self.body {
            Body::Late { encoders, .. } => encoders.len(),
            _ => 1,
        }
    }

    /// True when stream `i` has no trainable parameter, so its features are
    /// a pure function of the sample and may be cached.
    pub fn stream_is_static<T: Real>(&self, store: &ParamStore<T>, i: usize) -> bool {
        match &self.streams[i].net {
            StreamNet::Image(b) => b.params().iter().all(|&p| !store.entry(p).trainable),
            _ => false,
        }
    }

    fn depth<'a, T: Real>(&self, inputs: &'a ModelInputs<T>) -> Result<&'a Tensor<T>> {
        inputs.depth.as_ref().ok_or_else(|| missing(&self.spec, "a depth map"))
    }

    /// Runs one stream's feature extractor; returns `[B, P, width]`.
    pub fn stream_forward<T: Real>(&self, fx: &mut Fx<'_, T>, i: usize, inputs: &ModelInputs<T>) -> Result<Var> {
        let st = &self.streams[i];
        let fm = match (&st.net, st.kind) {
            (StreamNet::Image(b), StreamKind::Rgb) => {
                let x = fx.input(inputs.rgb.clone());
                b.forward(fx, x)?
            }
            (StreamNet::Image(b), StreamKind::Depth) => {
                let x = fx.input(replicate_depth(self.depth(inputs)?)?);
                b.forward(fx, x)?
            }
            (StreamNet::Image(b), kind) => {
                let stack = RgbdStack::new(inputs.rgb.clone(), self.depth(inputs)?.clone())?;
                let img = if kind == StreamKind::Hsd {
                    make_hsd(&stack)
                } else {
                    make_rgbd_image(&stack)
                };
                let x = fx.input(img);
                b.forward(fx, x)?
            }
            (StreamNet::Dmf { dmf, backbone }, _) => {
                let rgb = fx.input(inputs.rgb.clone());
                let d = fx.input(self.depth(inputs)?.clone());
                let x = dmf.forward(fx, rgb, d)?;
                backbone.forward(fx, x)?
            }
            (StreamNet::Conv1e(b), _) => {
                let rgb = fx.input(inputs.rgb.clone());
                let d = fx.input(self.depth(inputs)?.clone());
                let x = fx.tape.concat(&[rgb, d], 3)?;
                b.forward(fx, x)?
            }
            (StreamNet::Conv1s { branch, backbone }, _) => {
                let rgb = fx.input(inputs.rgb.clone());
                let d = fx.input(self.depth(inputs)?.clone());
                branch.inject(fx, backbone, rgb, d)?
            }
            (StreamNet::Precomputed, _) => {
                let f = inputs
                    .features
                    .as_ref()
                    .ok_or_else(|| missing(&self.spec, "precomputed features"))?;
                let (p, c) = self.config.feature_dims;
                if f.shape()[1..] != [p, c] {
                    return Err(Error::shape(
                        "precomputed features",
                        format!("got {:?}, model expects [B, {p}, {c}]", f.shape()),
                    ));
                }
                crate::backbone::precomputed_map(fx, f.clone())
            }
        };
        Ok(fm.data)
    }

    /// Encoder memory `[B, P, d_model]`.
    pub fn encode<T: Real>(&self, fx: &mut Fx<'_, T>, inputs: &ModelInputs<T>) -> Result<Var> {
        let feats = (0..self.streams.len())
            .map(|i| match inputs.cached.get(i).and_then(Option::as_ref) {
                Some(t) => Ok(fx.input(t.clone())),
                None => self.stream_forward(fx, i, inputs),
            })
            .collect::<Result<Vec<Var>>>()?;
        match &self.body {
            Body::Single(e) => e.forward(fx, feats[0]),
            Body::Early {
                proj_a,
                proj_b,
                fuser,
                encoder,
            } => {
                let a = proj_a.forward(fx, feats[0])?;
                let b = proj_b.forward(fx, feats[1])?;
                let f = fuser.forward(fx, a, b)?;
                encoder.forward(fx, f)
            }
            Body::Middle(m) => m.forward(fx, feats[0], feats[1]),
            Body::Late { encoders, fuser } => {
                let a = encoders[0].forward(fx, feats[0])?;
                let b = encoders[1].forward(fx, feats[1])?;
                fuser.forward(fx, a, b)
            }
        }
    }

    /// Teacher-forced logits `[B, T, V]`.
    pub fn forward<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        inputs: &ModelInputs<T>,
        tokens: &[usize],
    ) -> Result<Var> {
        let memory = self.encode(fx, inputs)?;
        self.decoder.forward(fx, tokens, inputs.batch(), memory)
    }

    /// Mean cross-entropy over non-PAD targets.
    pub fn loss<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        inputs: &ModelInputs<T>,
        tokens: &[usize],
        targets: &[usize],
    ) -> Result<Var> {
        let logits = self.forward(fx, inputs, tokens)?;
        fx.tape.cross_entropy(logits, targets, PAD)
    }

    /// Greedy captions (content token ids) for every sample in the batch.
    pub fn caption<T: Real>(&self, store: &ParamStore<T>, inputs: &ModelInputs<T>) -> Result<Vec<Vec<usize>>> {
        let memory = {
            let mut fx = Fx::eval(store);
            let m = self.encode(&mut fx, inputs)?;
            fx.tape.value(m).clone()
        };
        self.decoder.greedy_decode(store, &memory)
    }
}
