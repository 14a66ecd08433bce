//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Stage;
use crate::error::{Error, Result};
use crate::feature_fusion::{Family, FusionSpec, Method, Modality, Position};
use crate::metrics::{MetricOptions, RefAggregate};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub unfreeze_last_k: usize,
    pub weight_decay: f64,
    /// Output directory for logs, reports and the checkpoint.
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            unfreeze_last_k: 0,
            weight_decay: 0.01,
            out: None,
        }
    }
}

/// The four grid-search axes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lr: Vec<f64>,
    pub heads: Vec<usize>,
    pub encoder_dropout: Vec<f64>,
    pub decoder_dropout: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory of `<id>.fcf` files overriding the manifests' feature paths.
    pub features: Option<PathBuf>,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            features: None,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rouge_beta: f64,
    pub aggregate: RefAggregate,
    pub cider_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let m = MetricOptions::standard();
        Self {
            rouge_beta: m.rouge_beta,
            aggregate: m.aggregate,
            cider_sigma: m.cider.sigma,
        }
    }
}

impl EvalConfig {
    pub fn metric_options(&self) -> MetricOptions {
        let mut m = MetricOptions::standard();
        m.rouge_beta = self.rouge_beta;
        m.aggregate = self.aggregate;
        m.cider.sigma = self.cider_sigma;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fusion: FusionSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fusion: FusionSpec::baseline(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn bool_of(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let (mut family, mut method, mut position, mut inputs) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            match k {
                "fusion.family" => family = Some(v.to_string()),
                "fusion.method" => method = Some(v.to_string()),
                "fusion.position" => position = Some(v.to_string()),
                "fusion.inputs" => inputs = Some(v.to_string()),
                _ => cfg.set(k, v, base).map_err(at)?,
            }
        }
        if family.is_some() || method.is_some() || position.is_some() || inputs.is_some() {
            let b = FusionSpec::baseline();
            cfg.fusion = FusionSpec::parse(
                family.as_deref().unwrap_or(&b.family.to_string()),
                method.as_deref().unwrap_or(&b.method.to_string()),
                position.as_deref().unwrap_or(&b.position.to_string()),
                inputs.as_deref().unwrap_or("rgb"),
            )?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Sets one non-fusion key.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| Some(base.join(v));
        let (m, t, g, d, e) = (
            &mut self.model,
            &mut self.train,
            &mut self.grid,
            &mut self.data,
            &mut self.eval,
        );
        match key {
            "model.d_model" => {
                let w = parse(key, v)?;
                m.encoder.d_model = w;
                m.encoder.dense = w;
                m.decoder.d_model = w;
            }
            "model.heads" => {
                let h = parse(key, v)?;
                m.encoder.heads = h;
                m.decoder.heads = h;
            }
            "model.encoder_dropout" => m.encoder.dropout = parse(key, v)?,
            "model.decoder_dropout" => m.decoder.dropout = parse(key, v)?,
            "model.stack_count" => m.encoder.stack_count = parse(key, v)?,
            "model.decoder_layers" => m.decoder.layers = parse(key, v)?,
            "model.decoder_ff" => m.decoder.ff = parse(key, v)?,
            "model.max_len" => m.decoder.max_len = parse(key, v)?,
            "model.backbone_channels" => {
                let (k, s) = m.backbone.stages.first().map_or((3, 2), |s| (s.kernel, s.stride));
                m.backbone.stages = list::<usize>(key, v)?
                    .into_iter()
                    .map(|c| Stage {
                        out_channels: c,
                        kernel: k,
                        stride: s,
                    })
                    .collect();
            }
            "model.backbone_kernel" => {
                let k = parse(key, v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.kernel = k);
            }
            "model.backbone_stride" => {
                let st = parse(key, v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.stride = st);
            }
            "model.feature_positions" => m.feature_dims.0 = parse(key, v)?,
            "model.feature_channels" => m.feature_dims.1 = parse(key, v)?,
            "model.rgb_queries" | "fusion.rgb_queries" => m.rgb_queries = bool_of(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.unfreeze_last_k" => t.unfreeze_last_k = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.out" => t.out = path(v),
            "grid.lr" => g.lr = list(key, v)?,
            "grid.heads" => g.heads = list(key, v)?,
            "grid.encoder_dropout" => g.encoder_dropout = list(key, v)?,
            "grid.decoder_dropout" => g.decoder_dropout = list(key, v)?,
            "data.train" => d.train = path(v),
            "data.val" => d.val = path(v),
            "data.test" => d.test = path(v),
            "data.features" => d.features = path(v),
            "data.image_size" => m.backbone.image_size = parse(key, v)?,
            "data.min_count" => d.min_count = parse(key, v)?,
            "eval.rouge_beta" => e.rouge_beta = parse(key, v)?,
            "eval.aggregate" => {
                e.aggregate = match v {
                    "max" => RefAggregate::Max,
                    "mean" => RefAggregate::Mean,
                    _ => return Err(Error::Config(format!("{key}: expected max or mean, got {v:?}"))),
                }
            }
            "eval.cider_sigma" => e.cider_sigma = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Derives dependent fields and validates the whole config.
    pub fn finish(&mut self) -> Result<()> {
        let layers = self.model.backbone.num_layers();
        if self.train.unfreeze_last_k > layers {
            return Err(Error::Config(format!(
                "train.unfreeze_last_k = {} exceeds the {layers} backbone layers",
                self.train.unfreeze_last_k
            )));
        }
        self.model.backbone.frozen_through = layers - self.train.unfreeze_last_k;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        self.fusion.validate()?;
        self.model.validate()
    }

    pub fn metric_options(&self) -> MetricOptions {
        self.eval.metric_options()
    }

    /// Flat text form that [`RunConfig::parse`] reads back (paths absolute).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = &self.fusion;
        let m = &self.model;
        let inputs: Vec<String> = f.inputs.iter().map(Modality::to_string).collect();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("fusion.family", f.family.to_string());
        kv("fusion.method", f.method.to_string());
        kv("fusion.position", f.position.to_string());
        kv("fusion.inputs", inputs.join("+"));
        kv("model.d_model", m.encoder.d_model.to_string());
        kv("model.heads", m.encoder.heads.to_string());
        kv("model.encoder_dropout", m.encoder.dropout.to_string());
        kv("model.decoder_dropout", m.decoder.dropout.to_string());
        kv("model.stack_count", m.encoder.stack_count.to_string());
        kv("model.decoder_layers", m.decoder.layers.to_string());
        kv("model.decoder_ff", m.decoder.ff.to_string());
        kv("model.max_len", m.decoder.max_len.to_string());
        let chans: Vec<usize> = m.backbone.stages.iter().map(|s| s.out_channels).collect();
        kv("model.backbone_channels", join(&chans));
        if let Some(st) = m.backbone.stages.first() {
            kv("model.backbone_kernel", st.kernel.to_string());
            kv("model.backbone_stride", st.stride.to_string());
        }
        kv("model.feature_positions", m.feature_dims.0.to_string());
        kv("model.feature_channels", m.feature_dims.1.to_string());
        kv("model.rgb_queries", m.rgb_queries.to_string());
        let t = &self.train;
        kv("train.lr", t.lr.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.unfreeze_last_k", t.unfreeze_last_k.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        let g = &self.grid;
        for (k, v) in [
            ("grid.lr", join(&g.lr)),
            ("grid.heads", join(&g.heads)),
            ("grid.encoder_dropout", join(&g.encoder_dropout)),
            ("grid.decoder_dropout", join(&g.decoder_dropout)),
        ] {
            if !v.is_empty() {
                kv(k, v);
            }
        }
        let d = &self.data;
        for (k, p) in [
            ("train.out", &t.out),
            ("data.train", &d.train),
            ("data.val", &d.val),
            ("data.test", &d.test),
            ("data.features", &d.features),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("data.image_size", m.backbone.image_size.to_string());
        kv("data.min_count", d.min_count.to_string());
        kv("eval.rouge_beta", self.eval.rouge_beta.to_string());
        kv(
            "eval.aggregate",
            match self.eval.aggregate {
                RefAggregate::Max => "max",
                RefAggregate::Mean => "mean",
            }
            .into(),
        );
        kv("eval.cider_sigma", self.eval.cider_sigma.to_string());
        s
    }

    /// Convenience for tests and the harness: a config for `spec` with the
    /// rest at defaults.
    pub fn for_spec(family: Family, method: Method, position: Position, inputs: &[Modality]) -> Self {
        Self {
            fusion: FusionSpec::new(family, method, position, inputs),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_resolves_paths() {
        let text = "# run\nfusion.family = feature\nfusion.method = cross_attention\nfusion.position = late\nfusion.inputs = rgb+depth\nmodel.d_model = 64\ntrain.unfreeze_last_k = 1\ngrid.lr = 1e-3, 5e-4\ndata.train = d/train.jsonl\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.fusion.method, Method::CrossAttention);
        assert_eq!(c.model.decoder.d_model, 64);
        assert_eq!(c.model.backbone.frozen_through, 2);
        assert_eq!(c.grid.lr, vec![1e-3, 5e-4]);
        assert_eq!(c.data.train.as_deref(), Some(Path::new("/base/d/train.jsonl")));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::for_spec(Family::Hybrid, Method::Concat, Position::Late, &[Modality::Rgb, Modality::MaeCd]);
        c.grid.heads = vec![2, 4];
        c.data.test = Some(PathBuf::from("/x/test.jsonl"));
        c.finish().unwrap();
        assert_eq!(RunConfig::parse(&c.to_text(), Path::new("/")).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line_or_rule() {
        let e = RunConfig::parse("train.lr = 1\nbogus = 2\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::parse("train.unfreeze_last_k = 9\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("unfreeze_last_k"), "{e}");
        let e = RunConfig::parse("fusion.family = pixel\nfusion.method = dmf\nfusion.position = late\nfusion.inputs = rgb+depth\n", Path::new(".")).unwrap_err();
        assert!(e.is_validation());
    }
}
