//! Training, evaluation, grid search and parameter accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::comparison_word;
use crate::data::{load_depth_sized, load_features_flat, load_rgb_sized, load_samples, Batcher, DepthNorm, ImageSample, Manifest, Needs};
use crate::decoder::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{EvalPair, MetricOptions, MetricReport, REPORT_HEADER};
use crate::model::{CaptionModel, ModelInputs};
use crate::nn::{Fx, ParamStore};
use crate::tensor::{AdamW, AdamWConfig, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.fckp";
pub const LOSS_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const HYPOTHESES_FILE: &str = "hypotheses.txt";
pub const GRID_FILE: &str = "grid.csv";
pub const BEST_CONFIG_FILE: &str = "best.cfg";

const EVAL_BATCH: usize = 32;

fn needs(cfg: &RunConfig) -> Needs {
    Needs {
        depth: cfg.fusion.needs_depth(),
        features: cfg.fusion.needs_features().then_some(cfg.model.feature_dims),
    }
}

/// Loads a manifest for `cfg`: applies the feature-directory override and
/// checks modality coverage before anything is decoded.
pub fn load_manifest_for(cfg: &RunConfig, path: &Path) -> Result<Manifest> {
    let mut m = Manifest::load(path)?;
    if cfg.fusion.needs_features() {
        if let Some(dir) = &cfg.data.features {
            m = m.with_feature_dir(dir)?;
        }
    }
    m.check_modalities(&cfg.fusion)?;
    Ok(m)
}

pub fn load_split(cfg: &RunConfig, path: &Path) -> Result<Vec<ImageSample>> {
    let m = load_manifest_for(cfg, path)?;
    load_samples(&m, cfg.model.backbone.image_size, needs(cfg))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn adamw_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Model inputs for `samples[idx]`, with static stream features taken from
/// `cache` (one entry per stream, each holding per-sample `[P, C]` maps).
fn batch_inputs(
    samples: &[ImageSample],
    idx: &[usize],
    cache: &[Option<Vec<Tensor<f32>>>],
) -> Result<ModelInputs<f32>> {
    let picked: Vec<&ImageSample> = idx.iter().map(|&i| &samples[i]).collect();
    let mut inputs = ModelInputs::from_samples(&picked)?;
    inputs.cached = cache
        .iter()
        .map(|c| {
            c.as_ref()
                .map(|per| Tensor::stack(&idx.iter().map(|&i| per[i].clone()).collect::<Vec<_>>()))
                .transpose()
        })
        .collect::<Result<_>>()?;
    Ok(inputs)
}

/// Per-stream features for streams without trainable parameters.
fn static_cache(
    model: &CaptionModel,
    store: &ParamStore<f32>,
    samples: &[ImageSample],
) -> Result<Vec<Option<Vec<Tensor<f32>>>>> {
    (0..model.streams.len())
        .map(|i| {
            if !model.stream_is_static(store, i) {
                return Ok(None);
            }
            let mut per = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(EVAL_BATCH) {
                let refs: Vec<&ImageSample> = chunk.iter().collect();
                let inputs = ModelInputs::from_samples(&refs)?;
                let mut fx = Fx::eval(store);
                let v = model.stream_forward(&mut fx, i, &inputs)?;
                let t = fx.tape.value(v);
                let s = t.shape();
                let (p, c) = (s[1], s[2]);
                for row in t.data().chunks_exact(p * c) {
                    per.push(Tensor::new(vec![p, c], row.to_vec())?);
                }
            }
            Ok(Some(per))
        })
        .collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: CaptionModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
    pub losses: Vec<f32>,
    samples: Vec<ImageSample>,
    batcher: Batcher,
    cache: Vec<Option<Vec<Tensor<f32>>>>,
}

fn framed(vocab: &Vocabulary, samples: &[ImageSample], max_len: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    samples
        .iter()
        .map(|s| {
            s.captions
                .iter()
                .map(|c| {
                    let f = vocab.encode_framed(c);
                    if f.len() - 1 > max_len {
                        return Err(Error::Config(format!(
                            "caption of {} tokens for {:?} exceeds model.max_len {max_len}",
                            f.len() - 2,
                            s.id
                        )));
                    }
                    Ok(f)
                })
                .collect()
        })
        .collect()
}

impl Trainer {
    /// Builds a fresh model for `cfg` over already-loaded training samples.
    pub fn new(config: &RunConfig, samples: Vec<ImageSample>, vocab: Vocabulary) -> Result<Self> {
        let (store, model) = CaptionModel::build::<f32>(
            config.fusion.clone(),
            config.model.clone(),
            vocab.len(),
            config.train.seed,
        )?;
        let opt = AdamW::new(adamw_config(config));
        Self::assemble(config.clone(), samples, vocab, model, store, opt, 0)
    }

    fn assemble(
        config: RunConfig,
        samples: Vec<ImageSample>,
        vocab: Vocabulary,
        model: CaptionModel,
        store: ParamStore<f32>,
        opt: AdamW<f32>,
        step: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let batcher = Batcher::new(
            framed(&vocab, &samples, config.model.decoder.max_len)?,
            config.train.batch_size,
            config.train.seed,
        )?;
        let cache = static_cache(&model, &store, &samples)?;
        Ok(Self {
            config,
            vocab,
            model,
            store,
            opt,
            step,
            losses: Vec::new(),
            samples,
            batcher,
            cache,
        })
    }

    /// Loads `data.train`, builds the vocabulary from it, and builds the model.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let samples = load_split(config, require(&config.data.train, "data.train")?)?;
        let caps: Vec<&str> = samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
        let vocab = Vocabulary::build(&caps, config.data.min_count)?;
        Self::new(config, samples, vocab)
    }

    /// Continues from a checkpoint: parameters, optimizer state and step.
    pub fn resume(ckpt: &Checkpoint, samples: Vec<ImageSample>) -> Result<Self> {
        let (store, model) = ckpt.restore()?;
        let opt = ckpt.optimizer(adamw_config(&ckpt.config));
        Self::assemble(ckpt.config.clone(), samples, ckpt.vocab.clone(), model, store, opt, ckpt.step)
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    /// One AdamW step on the next batch; returns its loss.
    pub fn step_once(&mut self) -> Result<f32> {
        let batch = self.batcher.step(self.step);
        let inputs = batch_inputs(&self.samples, &batch.indices, &self.cache)?;
        let (grads, value) = {
            let mut fx = Fx::train(&self.store, self.config.train.seed, self.step);
            let loss = self.model.loss(&mut fx, &inputs, &batch.tokens.inputs, &batch.tokens.targets)?;
            let value = fx.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at step {}", self.step)));
            }
            let mut g = fx.tape.backward(loss)?;
            (fx.param_grads(&mut g), value)
        };
        self.store.apply(&mut self.opt, &grads)?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    /// Runs until `train.steps` steps have been taken in total.
    pub fn run(&mut self) -> Result<()> {
        let total = self.config.train.steps as u64;
        let every = (total / 20).max(1);
        while self.step < total {
            let l = self.step_once()?;
            if self.step.is_multiple_of(every) || self.step == total {
                info!("step {}/{total} loss {l:.4}", self.step);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.vocab, &self.store, &self.opt, self.step)
    }

    pub fn evaluate(&self, samples: &[ImageSample]) -> Result<Evaluation> {
        evaluate_model(
            &self.model,
            &self.store,
            &self.vocab,
            samples,
            &self.config.metric_options(),
        )
    }

    /// Writes the per-step loss log.
    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let first = self.step as usize - self.losses.len();
        csv_io(path, w.write_record(["step", "loss"]))?;
        for (i, l) in self.losses.iter().enumerate() {
            csv_io(path, w.write_record([(first + i + 1).to_string(), l.to_string()]))?;
        }
        csv_io(path, w.flush().map_err(csv::Error::from))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path.display(), e.to_string()))
}

fn csv_io(path: &Path, r: std::result::Result<(), csv::Error>) -> Result<()> {
    r.map_err(|e| Error::format(path.display(), e.to_string()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.train.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<f32>,
}

/// Full training run: loss log and checkpoint written to `train.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::from_config(cfg)?;
    t.run()?;
    let dir = out_dir(cfg)?;
    let log = dir.join(LOSS_LOG_FILE);
    t.write_loss_log(&log)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    t.checkpoint().save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        losses: t.losses,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub ids: Vec<String>,
    pub hypotheses: Vec<String>,
    pub references: Vec<Vec<String>>,
    /// Near/far word accuracy, when every reference carries one.
    pub discriminating_accuracy: Option<f64>,
}

impl Evaluation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let report = dir.join(REPORT_FILE);
        fs::write(&report, format!("{REPORT_HEADER}\n{}\n", self.report.csv_row()))
            .map_err(|e| Error::io(&report, e))?;
        let per = dir.join(SAMPLES_FILE);
        let mut w = csv_writer(&per)?;
        csv_io(&per, w.write_record(["id", "hypothesis", "references"]))?;
        for ((id, h), r) in self.ids.iter().zip(&self.hypotheses).zip(&self.references) {
            csv_io(&per, w.write_record([id.as_str(), h.as_str(), r.join("\t").as_str()]))?;
        }
        csv_io(&per, w.flush().map_err(csv::Error::from))?;
        let hyp = dir.join(HYPOTHESES_FILE);
        let text: String = self.hypotheses.iter().map(|h| format!("{h}\n")).collect();
        fs::write(&hyp, text).map_err(|e| Error::io(&hyp, e))
    }
}

/// Greedy-decodes every sample and scores against its references.
pub fn evaluate_model(
    model: &CaptionModel,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    samples: &[ImageSample],
    opts: &MetricOptions,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut hypotheses = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let inputs = ModelInputs::from_samples(&refs)?;
        for ids in model.caption(store, &inputs)? {
            hypotheses.push(vocab.decode(&ids));
        }
    }
    let pairs = samples
        .iter()
        .zip(&hypotheses)
        .map(|(s, h)| EvalPair::from_text(h, &s.captions))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::compute(&pairs, opts)?;
    let refs: Vec<&str> = samples.iter().map(|s| s.captions[0].as_str()).collect();
    let discriminating_accuracy = if refs.iter().all(|r| comparison_word(r).is_some()) {
        Some(crate::data::discriminating_accuracy(&hypotheses, &refs)?)
    } else {
        None
    };
    Ok(Evaluation {
        report,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        hypotheses,
        references: samples.iter().map(|s| s.captions.clone()).collect(),
        discriminating_accuracy,
    })
}

/// Evaluates a saved checkpoint on a manifest; writes reports to `out` if given.
pub fn evaluate(checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (store, model) = ckpt.restore()?;
    let samples = load_split(&ckpt.config, manifest)?;
    let unknown = samples
        .iter()
        .flat_map(|s| s.captions.iter())
        .flat_map(|c| tokenize(c))
        .filter(|t| ckpt.vocab.id(t) == crate::decoder::UNK)
        .count();
    if unknown > 0 {
        warn!("{unknown} reference tokens are outside the checkpoint vocabulary");
    }
    let eval = evaluate_model(&model, &store, &ckpt.vocab, &samples, &ckpt.config.metric_options())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        eval.write(dir)?;
    }
    Ok(eval)
}

/// Captions one image pair with a saved checkpoint.
pub fn caption_image(
    checkpoint: &Path,
    rgb: &Path,
    depth: Option<&Path>,
    features: Option<&Path>,
) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (store, model) = ckpt.restore()?;
    let cfg = &ckpt.config;
    let size = cfg.model.backbone.image_size;
    let depth = match (cfg.fusion.needs_depth(), depth) {
        (true, Some(p)) => Some(load_depth_sized(p, DepthNorm::Max, size)?),
        (true, None) => {
            return Err(Error::Data(format!("fusion spec {} needs a depth map (--depth)", cfg.fusion)))
        }
        (false, Some(p)) => {
            warn!("ignoring depth map {}: fusion spec {} does not use depth", p.display(), cfg.fusion);
            None
        }
        (false, None) => None,
    };
    let features = match (cfg.fusion.needs_features(), features) {
        (true, Some(p)) => Some(load_features_flat(p, cfg.model.feature_dims)?),
        (true, None) => {
            return Err(Error::Data(format!(
                "fusion spec {} needs precomputed features (--features)",
                cfg.fusion
            )))
        }
        (false, Some(p)) => {
            warn!("ignoring feature file {}: fusion spec {} does not use it", p.display(), cfg.fusion);
            None
        }
        (false, None) => None,
    };
    let sample = ImageSample {
        id: rgb.display().to_string(),
        rgb: load_rgb_sized(rgb, size)?,
        depth,
        features,
        captions: Vec::new(),
    };
    let inputs = ModelInputs::from_samples(&[&sample])?;
    let ids = model.caption(&store, &inputs)?;
    Ok(ckpt.vocab.decode(&ids[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub lr: f64,
    pub heads: usize,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
}

impl GridCell {
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        c.train.lr = self.lr;
        c.model.encoder.heads = self.heads;
        c.model.decoder.heads = self.heads;
        c.model.encoder.dropout = self.encoder_dropout;
        c.model.decoder.dropout = self.decoder_dropout;
        c.finish()?;
        Ok(c)
    }

    fn key(&self) -> (u64, usize, u64, u64) {
        (
            self.lr.to_bits(),
            self.heads,
            self.encoder_dropout.to_bits(),
            self.decoder_dropout.to_bits(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub cell: GridCell,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_config: RunConfig,
}

pub fn grid_cells(cfg: &RunConfig) -> Result<Vec<GridCell>> {
    let g = &cfg.grid;
    for (name, empty) in [
        ("grid.lr", g.lr.is_empty()),
        ("grid.heads", g.heads.is_empty()),
        ("grid.encoder_dropout", g.encoder_dropout.is_empty()),
        ("grid.decoder_dropout", g.decoder_dropout.is_empty()),
    ] {
        if empty {
            return Err(Error::Config(format!("{name} must list at least one value")));
        }
    }
    let mut cells = Vec::new();
    for &lr in &g.lr {
        for &heads in &g.heads {
            for &encoder_dropout in &g.encoder_dropout {
                for &decoder_dropout in &g.decoder_dropout {
                    cells.push(GridCell {
                        lr,
                        heads,
                        encoder_dropout,
                        decoder_dropout,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Index of the best row: highest B-4, then highest R-L, then the smallest
/// cell coordinates, so the choice does not depend on row order.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    (0..rows.len()).max_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        ra.report
            .b4
            .total_cmp(&rb.report.b4)
            .then(ra.report.rl.total_cmp(&rb.report.rl))
            .then(rb.cell.key().cmp(&ra.cell.key()))
    })
}

/// Trains and evaluates every grid cell in sequence. Every cell starts from
/// the same `train.seed`, so a cell's result does not depend on its position
/// in the grid.
pub fn gridsearch_with(
    cfg: &RunConfig,
    train: &[ImageSample],
    vocab: &Vocabulary,
    val: &[ImageSample],
) -> Result<GridResult> {
    let cells = grid_cells(cfg)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.into_iter().enumerate() {
        let c = cell.apply(cfg)?;
        info!("grid cell {}: {cell:?}", i + 1);
        let mut t = Trainer::new(&c, train.to_vec(), vocab.clone())?;
        t.run()?;
        let report = t.evaluate(val)?.report;
        rows.push(GridRow { cell, report });
    }
    let best = select_best(&rows).expect("grid is non-empty");
    let best_config = rows[best].cell.apply(cfg)?;
    Ok(GridResult {
        rows,
        best,
        best_config,
    })
}

pub fn gridsearch(cfg: &RunConfig) -> Result<GridResult> {
    grid_cells(cfg)?;
    let train = load_split(cfg, require(&cfg.data.train, "data.train")?)?;
    let val = load_split(cfg, require(&cfg.data.val, "data.val")?)?;
    let caps: Vec<&str> = train.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&caps, cfg.data.min_count)?;
    let result = gridsearch_with(cfg, &train, &vocab, &val)?;
    let dir = out_dir(cfg)?;
    write_grid(&dir.join(GRID_FILE), &result)?;
    let best = dir.join(BEST_CONFIG_FILE);
    fs::write(&best, result.best_config.to_text()).map_err(|e| Error::io(&best, e))?;
    Ok(result)
}

pub fn write_grid(path: &Path, result: &GridResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["lr", "heads", "encoder_dropout", "decoder_dropout"];
    header.extend(REPORT_HEADER.split(','));
    header.push("best");
    csv_io(path, w.write_record(&header))?;
    for (i, r) in result.rows.iter().enumerate() {
        let mut rec = vec![
            r.cell.lr.to_string(),
            r.cell.heads.to_string(),
            r.cell.encoder_dropout.to_string(),
            r.cell.decoder_dropout.to_string(),
        ];
        rec.extend(r.report.values().iter().map(|v| format!("{v:.4}")));
        rec.push((i == result.best).to_string());
        csv_io(path, w.write_record(&rec))?;
    }
    csv_io(path, w.flush().map_err(csv::Error::from))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Trainable parameters per group.
    pub trainable: BTreeMap<String, usize>,
    /// All parameters per group, frozen included.
    pub all: BTreeMap<String, usize>,
}

impl ParamCounts {
    pub fn trainable_total(&self) -> usize {
        self.trainable.values().sum()
    }

    pub fn total(&self) -> usize {
        self.all.values().sum()
    }

    pub fn group(&self, g: &str) -> usize {
        self.all.get(g).copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,trainable,total\n");
        for (g, n) in &self.all {
            s.push_str(&format!("{g},{},{n}\n", self.trainable.get(g).copied().unwrap_or(0)));
        }
        s.push_str(&format!("total,{},{}\n", self.trainable_total(), self.total()));
        s
    }
}

/// Per-group parameter counts of the model `cfg` describes, for a
/// vocabulary of `vocab_size` entries.
pub fn param_count(cfg: &RunConfig, vocab_size: usize) -> Result<ParamCounts> {
    let (store, _) = CaptionModel::build::<f32>(cfg.fusion.clone(), cfg.model.clone(), vocab_size, cfg.train.seed)?;
    Ok(ParamCounts {
        trainable: store.trainable_by_group(),
        all: store.total_by_group(),
    })
}
