//! Synthetic depth-discriminative scenes.
//!
//! Each scene holds two colored boxes on a horizontal gray gradient. The
//! caption's subject is the larger box; its left/right side is visible in
//! RGB, while whether it is nearer or farther than the other box lives only
//! in the depth map. Every scene is written twice with the two box depths
//! swapped, so RGB files are identical across the pair and the near/far word
//! is independent of RGB content.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::{write_image_depth, write_image_rgb};
use super::manifest::{write_manifest, RawRecord};
use crate::backbone::write_features;
use crate::decoder::tokenize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.15]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
];

pub const NEARER: &str = "nearer";
pub const FARTHER: &str = "farther";

/// Feature files use a 4×4 cell grid.
pub const FEATURE_GRID: usize = 4;
pub const FEATURE_POSITIONS: usize = FEATURE_GRID * FEATURE_GRID;
pub const FEATURE_CHANNELS: usize = 64;
const FEATURE_STATS: usize = 6;
const FEATURE_SEED: u64 = 0x5EED_FEA7;

pub const BACKGROUND_DEPTH: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: usize,
}

impl BoxSpec {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.w).contains(&x) && (self.y..self.y + self.h).contains(&y)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// One rendered variant: `depths[0]` belongs to the subject box.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub subject: BoxSpec,
    pub other: BoxSpec,
    pub depths: [f32; 2],
}

impl Scene {
    pub fn subject_nearer(&self) -> bool {
        self.depths[0] < self.depths[1]
    }

    pub fn subject_left(&self) -> bool {
        self.subject.x < self.other.x
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} box is {} than the {} box and is on the {}",
            COLORS[self.subject.color].0,
            if self.subject_nearer() { NEARER } else { FARTHER },
            COLORS[self.other.color].0,
            if self.subject_left() { "left" } else { "right" },
        )
    }

    /// The same layout with the two box depths exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            depths: [self.depths[1], self.depths[0]],
            ..self.clone()
        }
    }

    pub fn background(&self, x: usize) -> f32 {
        0.2 + 0.6 * x as f32 / (self.size - 1) as f32
    }

    pub fn render_rgb(&self) -> Tensor<f32> {
        let s = self.size;
        let mut data = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                let px = if self.subject.contains(x, y) {
                    COLORS[self.subject.color].1
                } else if self.other.contains(x, y) {
                    COLORS[self.other.color].1
                } else {
                    [self.background(x); 3]
                };
                data.extend_from_slice(&px);
            }
        }
        Tensor::new(vec![s, s, 3], data).expect("positive size")
    }

    pub fn render_depth(&self) -> Tensor<f32> {
        let s = self.size;
        let data = (0..s * s)
            .map(|i| {
                let (x, y) = (i % s, i / s);
                if self.subject.contains(x, y) {
                    self.depths[0]
                } else if self.other.contains(x, y) {
                    self.depths[1]
                } else {
                    BACKGROUND_DEPTH
                }
            })
            .collect();
        Tensor::new(vec![s, s, 1], data).expect("positive size")
    }
}

/// Draws one layout. The subject sits in one half, the other box in the
/// other half, so left/right is never ambiguous.
pub fn random_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let half = size / 2;
    let span = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let (lo, hi) = ((lo * size as f64).round() as usize, (hi * size as f64).round() as usize);
        rng.gen_range(lo.max(1)..=hi.max(lo.max(1)))
    };
    let (bw, bh) = (span(rng, 0.28, 0.375), span(rng, 0.28, 0.375));
    let (sw, sh) = (span(rng, 0.16, 0.25), span(rng, 0.16, 0.25));
    let left = rng.gen_bool(0.5);
    let place = |rng: &mut ChaCha8Rng, w: usize, h: usize, left_half: bool| {
        let x0 = if left_half { 0 } else { half };
        (x0 + rng.gen_range(0..=half - w), rng.gen_range(0..=size - h))
    };
    let c1 = rng.gen_range(0..COLORS.len());
    let c2 = (c1 + rng.gen_range(1..COLORS.len())) % COLORS.len();
    let (x, y) = place(rng, bw, bh, left);
    let subject = BoxSpec { x, y, w: bw, h: bh, color: c1 };
    let (x, y) = place(rng, sw, sh, !left);
    let other = BoxSpec { x, y, w: sw, h: sh, color: c2 };
    let near = 0.3 + rng.gen_range(-0.05..0.05f32);
    let far = 0.6 + rng.gen_range(-0.05..0.05f32);
    Scene {
        size,
        subject,
        other,
        depths: [near, far],
    }
}

/// Which modalities a feature file encodes; the rest are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    RgbDepth,
    Rgb,
    Depth,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::RgbDepth, FeatureKind::Rgb, FeatureKind::Depth];

    pub fn dir_name(self) -> &'static str {
        match self {
            FeatureKind::RgbDepth => "mae_cd",
            FeatureKind::Rgb => "mae_rgb",
            FeatureKind::Depth => "mae_depth",
        }
    }
}

fn feature_projection() -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
    let bound = (3.0 / FEATURE_STATS as f32).sqrt();
    (0..FEATURE_STATS * FEATURE_CHANNELS)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Stand-in for masked-autoencoder features: per-cell color/depth means and
/// cell coordinates through a fixed random projection and tanh.
pub fn scene_features(rgb: &Tensor<f32>, depth: &Tensor<f32>, kind: FeatureKind) -> Tensor<f32> {
    let s = rgb.shape()[0];
    let cell = s / FEATURE_GRID;
    let proj = feature_projection();
    let mut out = Vec::with_capacity(FEATURE_POSITIONS * FEATURE_CHANNELS);
    for cy in 0..FEATURE_GRID {
        for cx in 0..FEATURE_GRID {
            let mut stats = [0.0f32; FEATURE_STATS];
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    let i = y * s + x;
                    stats.iter_mut().zip(&rgb.data()[i * 3..i * 3 + 3]).for_each(|(a, v)| *a += v);
                    stats[3] += depth.data()[i];
                }
            }
            let n = (cell * cell) as f32;
            stats[..4].iter_mut().for_each(|v| *v /= n);
            if kind == FeatureKind::Depth {
                stats[..3].fill(0.0);
            }
            if kind == FeatureKind::Rgb {
                stats[3] = 0.0;
            }
            stats[4] = cx as f32 / (FEATURE_GRID - 1) as f32;
            stats[5] = cy as f32 / (FEATURE_GRID - 1) as f32;
            for c in 0..FEATURE_CHANNELS {
                let z: f32 = (0..FEATURE_STATS).map(|j| stats[j] * proj[j * FEATURE_CHANNELS + c]).sum();
                out.push(z.tanh());
            }
        }
    }
    Tensor::new(vec![1, FEATURE_POSITIONS, FEATURE_CHANNELS], out).expect("fixed dims")
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub feature_dirs: Vec<(FeatureKind, PathBuf)>,
}

/// Layouts for one split, pairs first; an odd count ends with a single variant.
pub fn split_scenes(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let mut out = Vec::with_capacity(n);
    while out.len() + 1 < n {
        let s = random_scene(rng, size);
        out.push(s.swapped());
        out.push(s);
    }
    if out.len() < n {
        let s = random_scene(rng, size);
        out.push(if rng.gen_bool(0.5) { s.swapped() } else { s });
    }
    // Within a pair the subject-nearer variant comes second; alternate so
    // variant position in the file carries no label information.
    for (k, pair) in out.chunks_mut(2).enumerate() {
        if k % 2 == 1 && pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
    out
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` plus `rgb/`, `depth/`
/// and the three feature directories under `out`.
pub fn generate_synthetic_dataset(out: &Path, cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.n_train < 2 || !cfg.n_train.is_multiple_of(2) {
        return Err(Error::Config(format!("n_train must be even and >= 2, got {}", cfg.n_train)));
    }
    if cfg.n_test == 0 {
        return Err(Error::Config("n_test must be >= 1".into()));
    }
    if cfg.image_size < 16 || !cfg.image_size.is_multiple_of(FEATURE_GRID) {
        return Err(Error::Config(format!(
            "synthetic image size must be >= 16 and divisible by {FEATURE_GRID}, got {}",
            cfg.image_size
        )));
    }
    for d in ["rgb", "depth"] {
        mkdir(&out.join(d))?;
    }
    let feature_dirs: Vec<(FeatureKind, PathBuf)> = FeatureKind::ALL
        .iter()
        .map(|&k| (k, out.join("features").join(k.dir_name())))
        .collect();
    for (_, d) in &feature_dirs {
        mkdir(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut paths = Vec::new();
    for (split, n) in [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)] {
        let scenes = split_scenes(n, cfg.image_size, &mut rng);
        let mut records = Vec::with_capacity(n);
        for (i, scene) in scenes.iter().enumerate() {
            let id = format!("{split}_{:04}{}", i / 2, if i % 2 == 0 { 'a' } else { 'b' });
            let (rgb, depth) = (scene.render_rgb(), scene.render_depth());
            let rgb_rel = format!("rgb/{id}.ppm");
            let depth_rel = format!("depth/{id}.pgm");
            write_image_rgb(&out.join(&rgb_rel), &rgb)?;
            write_image_depth(&out.join(&depth_rel), &depth, true)?;
            for (kind, dir) in &feature_dirs {
                write_features(&dir.join(format!("{id}.fcf")), &scene_features(&rgb, &depth, *kind))?;
            }
            records.push(RawRecord {
                id: id.clone(),
                rgb: rgb_rel,
                depth: Some(depth_rel),
                features: Some(format!("features/mae_cd/{id}.fcf")),
                captions: vec![scene.caption()],
                normalize: None,
                depth_scale: None,
            });
        }
        let p = out.join(format!("{split}.jsonl"));
        write_manifest(&p, &records)?;
        paths.push(p);
    }
    let test = paths.pop().expect("three splits");
    let val = paths.pop().expect("three splits");
    let train = paths.pop().expect("three splits");
    Ok(SynthOutput {
        train,
        val,
        test,
        feature_dirs,
    })
}

/// Which of the two comparison words a caption uses, if exactly one.
pub fn comparison_word(caption: &str) -> Option<&'static str> {
    let toks = tokenize(caption);
    let near = toks.iter().any(|t| t == NEARER);
    let far = toks.iter().any(|t| t == FARTHER);
    match (near, far) {
        (true, false) => Some(NEARER),
        (false, true) => Some(FARTHER),
        _ => None,
    }
}

/// Fraction of hypotheses whose near/far word matches the reference's.
/// A hypothesis with neither or both words counts as wrong.
pub fn discriminating_accuracy<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::Data(format!(
            "need equally many hypotheses and references, got {} and {}",
            hyps.len(),
            refs.len()
        )));
    }
    let mut hits = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let want = comparison_word(r.as_ref())
            .ok_or_else(|| Error::Data(format!("reference {:?} has no comparison word", r.as_ref())))?;
        if comparison_word(h.as_ref()) == Some(want) {
            hits += 1;
        }
    }
    Ok(hits as f64 / hyps.len() as f64)
}
