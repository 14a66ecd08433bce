//! Checkpoint files: `FCKP1\n`, one JSON header line, then little-endian f32
//! payload (every parameter in header order, then optimizer moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::nn::ParamStore;
use crate::tensor::{AdamW, MomentState, Tensor};

const MAGIC: &[u8] = b"FCKP1\n";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    has_moments: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    step: u64,
    optimizer_t: u64,
    params: Vec<ParamHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    /// Parameters in registration order, keyed by canonical path.
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer_t: u64,
    pub moments: Vec<Option<MomentState<f32>>>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        vocab: &Vocabulary,
        store: &ParamStore<f32>,
        opt: &AdamW<f32>,
        step: u64,
    ) -> Self {
        let params = store
            .entries()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        let moments = (0..store.len()).map(|i| opt.moment(i).cloned()).collect();
        Self {
            config: config.clone(),
            vocab: vocab.clone(),
            step,
            params,
            optimizer_t: opt.steps_taken(),
            moments,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            optimizer_t: self.optimizer_t,
            params: self
                .params
                .iter()
                .zip(&self.moments)
                .map(|((name, t), m)| ParamHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    has_moments: m.is_some(),
                })
                .collect(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        let mut put = |xs: &[f32]| xs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (_, t) in &self.params {
            put(t.data());
        }
        for m in self.moments.iter().flatten() {
            put(&m.m);
            put(&m.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::format(origin, "not a checkpoint (missing FCKP1 magic)"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(origin, "unterminated header"))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format(origin, e.to_string()))?;
        let payload = &rest[nl + 1..];
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let want: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>() * if p.has_moments { 3 } else { 1 })
            .sum();
        if payload.len() != want * 4 {
            return Err(Error::format(
                origin,
                format!("payload has {} bytes, header needs {}", payload.len(), want * 4),
            ));
        }
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            let t = Tensor::new(p.shape.clone(), take(n)).map_err(|e| Error::format(origin, e.to_string()))?;
            params.push((p.name.clone(), t));
        }
        let moments = header
            .params
            .iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                p.has_moments.then(|| MomentState { m: take(n), v: take(n) })
            })
            .collect();
        let vocab_text: String = header.vocab.iter().map(|t| format!("{t}\n")).collect();
        Ok(Self {
            config: header.config,
            vocab: Vocabulary::from_text(&vocab_text, origin)?,
            step: header.step,
            params,
            optimizer_t: header.optimizer_t,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored parameter values into it.
    pub fn restore(&self) -> Result<(ParamStore<f32>, CaptionModel)> {
        let (mut store, model) = CaptionModel::build::<f32>(
            self.config.fusion.clone(),
            self.config.model.clone(),
            self.vocab.len(),
            self.config.train.seed,
        )?;
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} not in model")))?;
            store.set_value(id, t.clone())?;
        }
        Ok((store, model))
    }

    /// Optimizer with the stored step count and moments.
    pub fn optimizer(&self, config: crate::tensor::AdamWConfig) -> AdamW<f32> {
        let mut opt = AdamW::new(config);
        opt.restore(self.optimizer_t, self.moments.clone());
        opt
    }
}
