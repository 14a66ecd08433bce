//! Ablation suites over a base config: fusion position with parameter
//! equalization, precomputed-feature modality, and backbone unfreezing.
//! Every arm trains on the same seeds, and a seed fixes the data order, so
//! arms are paired.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::config::RunConfig;
use crate::decoder::Vocabulary;
use crate::error::{Error, Result};
use crate::feature_fusion::{Family, FusionSpec, Method, Modality, Position};
use crate::metrics::{MetricReport, REPORT_HEADER};
use crate::nn::ParamStore;
use crate::trainer::{load_split, param_count, Trainer};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Position,
    Modality,
    Freeze,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Suite::Position),
            "modality" => Ok(Suite::Modality),
            "freeze" => Ok(Suite::Freeze),
            _ => Err(Error::Config(format!("unknown suite {s:?} (position, modality or freeze)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Position => "position",
            Suite::Modality => "modality",
            Suite::Freeze => "freeze",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub trainable_params: usize,
    pub report: MetricReport,
    pub discriminating_accuracy: Option<f64>,
    /// Backbone layers whose parameters changed during training.
    pub backbone_layers_changed: usize,
}

#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub arm: String,
    pub trainable_params: usize,
    pub mean: MetricReport,
    pub discriminating_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub suite: Suite,
    pub runs: Vec<ArmRun>,
    pub summaries: Vec<ArmSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "suite,arm,seed,trainable_params,{REPORT_HEADER},discriminating_accuracy,backbone_layers_changed\n"
        );
        let vals = |r: &MetricReport| r.values().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.suite,
                r.arm,
                r.seed,
                r.trainable_params,
                vals(&r.report),
                fmt_opt(r.discriminating_accuracy),
                r.backbone_layers_changed
            ));
        }
        for m in &self.summaries {
            s.push_str(&format!(
                "{},{},mean,{},{},{},\n",
                self.suite,
                m.arm,
                m.trainable_params,
                vals(&m.mean),
                fmt_opt(m.discriminating_accuracy)
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

/// Early (one block), early (two stacked blocks) and late fusion with the
/// base config's fusion method and inputs.
pub fn position_arms(base: &RunConfig) -> Result<Vec<Arm>> {
    let (family, method, inputs) = match base.fusion.fuse_method() {
        Some(_) if base.fusion.inputs.len() == 2 => (base.fusion.family, base.fusion.method, base.fusion.inputs.clone()),
        _ => (Family::Feature, Method::Concat, vec![Modality::Rgb, Modality::Depth]),
    };
    let make = |name: &str, position, stack| -> Result<Arm> {
        let mut c = base.clone();
        c.fusion = FusionSpec::new(family, method, position, &inputs);
        c.model.encoder.stack_count = stack;
        c.finish()?;
        Ok(Arm {
            name: name.into(),
            config: c,
        })
    };
    Ok(vec![
        make("early_stack1", Position::Early, 1)?,
        make("early_stack2", Position::Early, 2)?,
        make("late", Position::Late, 1)?,
    ])
}

/// Root holding `mae_rgb/`, `mae_depth/` and `mae_cd/`.
fn feature_root(base: &RunConfig) -> Result<PathBuf> {
    let start = match (&base.data.features, &base.data.train) {
        (Some(f), _) => f.clone(),
        (None, Some(t)) => t.parent().unwrap_or(Path::new(".")).join("features"),
        (None, None) => return Err(Error::Config("data.features or data.train must be set".into())),
    };
    if start.join("mae_cd").is_dir() {
        return Ok(start);
    }
    match start.parent() {
        Some(p) if p.join("mae_cd").is_dir() => Ok(p.to_path_buf()),
        _ => Err(Error::Config(format!(
            "no mae_rgb/mae_depth/mae_cd feature directories under {}",
            start.display()
        ))),
    }
}

/// Three late-concat RGB + precomputed-feature arms; only `data.features` differs.
pub fn modality_arms(base: &RunConfig) -> Result<Vec<Arm>> {
    let root = feature_root(base)?;
    [("rgb", "mae_rgb"), ("depth", "mae_depth"), ("rgb+depth", "mae_cd")]
        .into_iter()
        .map(|(name, dir)| {
            let mut c = base.clone();
            c.fusion = FusionSpec::new(Family::Hybrid, Method::Concat, Position::Late, &[Modality::Rgb, Modality::MaeCd]);
            c.data.features = Some(root.join(dir));
            c.finish()?;
            Ok(Arm {
                name: name.into(),
                config: c,
            })
        })
        .collect()
}

/// One arm per number of unfrozen top backbone layers.
pub fn freeze_arms(base: &RunConfig, k_list: &[usize]) -> Result<Vec<Arm>> {
    let layers = base.model.backbone.num_layers();
    k_list
        .iter()
        .map(|&k| {
            if k > layers {
                return Err(Error::Config(format!("k = {k} exceeds the {layers} backbone layers")));
            }
            let mut c = base.clone();
            c.train.unfreeze_last_k = k;
            c.finish()?;
            Ok(Arm {
                name: format!("unfreeze_{k}"),
                config: c,
            })
        })
        .collect()
}

/// Backbone layers (`*.backbone.convN`) whose values differ between stores.
pub fn changed_backbone_layers(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
    let mut layers: Vec<String> = before
        .entries()
        .filter(|(_, e)| e.group == "backbone")
        .filter(|(id, e)| after.value(*id) != &e.value)
        .map(|(_, e)| e.name.rsplit_once('.').map_or(e.name.clone(), |(l, _)| l.to_string()))
        .collect();
    layers.dedup();
    layers
}

fn mean_report(rs: &[MetricReport]) -> MetricReport {
    let n = rs.len() as f64;
    let mut acc = [0.0; 7];
    for r in rs {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v / n;
        }
    }
    let [b1, b4, r1, r2, rl, meteor, cider] = acc;
    MetricReport {
        b1,
        b4,
        r1,
        r2,
        rl,
        meteor,
        cider,
    }
}

/// Trains and evaluates every arm for every seed. Evaluation uses
/// `data.test`, falling back to `data.val`.
pub fn run_arms(suite: Suite, arms: &[Arm], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for arm in arms {
        let c = &arm.config;
        let train_path = c.data.train.as_deref().ok_or_else(|| Error::Config("data.train is not set".into()))?;
        let eval_path = c
            .data
            .test
            .as_deref()
            .or(c.data.val.as_deref())
            .ok_or_else(|| Error::Config("data.test or data.val must be set".into()))?;
        let train = load_split(c, train_path)?;
        let eval = load_split(c, eval_path)?;
        let caps: Vec<&str> = train.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
        let vocab = Vocabulary::build(&caps, c.data.min_count)?;
        let params = param_count(c, vocab.len())?.trainable_total();
        let mut reports = Vec::new();
        let mut accs = Vec::new();
        for &seed in seeds {
            info!("{suite} arm {} seed {seed}", arm.name);
            let mut sc = c.clone();
            sc.train.seed = seed;
            let mut t = Trainer::new(&sc, train.clone(), vocab.clone())?;
            let before = t.store.clone();
            t.run()?;
            let e = t.evaluate(&eval)?;
            runs.push(ArmRun {
                arm: arm.name.clone(),
                seed,
                trainable_params: params,
                report: e.report,
                discriminating_accuracy: e.discriminating_accuracy,
                backbone_layers_changed: changed_backbone_layers(&before, &t.store).len(),
            });
            reports.push(e.report);
            accs.extend(e.discriminating_accuracy);
        }
        summaries.push(ArmSummary {
            arm: arm.name.clone(),
            trainable_params: params,
            mean: mean_report(&reports),
            discriminating_accuracy: (accs.len() == seeds.len()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        });
    }
    Ok(AblationReport {
        suite,
        runs,
        summaries,
    })
}

pub fn run_position_ablation(base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    run_arms(Suite::Position, &position_arms(base)?, seeds)
}

pub fn run_modality_ablation(base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    run_arms(Suite::Modality, &modality_arms(base)?, seeds)
}

pub fn run_freeze_ablation(base: &RunConfig, k_list: &[usize], seeds: &[u64]) -> Result<AblationReport> {
    run_arms(Suite::Freeze, &freeze_arms(base, k_list)?, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny;

    #[test]
    fn position_suite_shape() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path(), &[("train.steps", "3")]);
        let arms = position_arms(&base).unwrap();
        assert_eq!(arms.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(), ["early_stack1", "early_stack2", "late"]);
        assert_eq!(arms[1].config.model.encoder.stack_count, 2);
        let r = run_arms(Suite::Position, &arms, &DEFAULT_SEEDS).unwrap();
        assert_eq!(r.runs.len(), 9);
        assert_eq!(r.summaries.len(), 3);
        assert_eq!(r.to_csv().lines().count(), 1 + 9 + 3);
        let late = r.summary("late").unwrap();
        let early2 = r.summary("early_stack2").unwrap();
        assert!(late.trainable_params > r.summary("early_stack1").unwrap().trainable_params);
        assert!(early2.discriminating_accuracy.is_some());
    }

    #[test]
    fn reruns_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path(), &[("train.steps", "3")]);
        let arms = freeze_arms(&base, &[0, 1]).unwrap();
        let a = run_arms(Suite::Freeze, &arms, &[4]).unwrap();
        let b = run_arms(Suite::Freeze, &arms, &[4]).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn unfreezing_moves_exactly_the_top_layers() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path(), &[("train.steps", "3")]);
        let layers = base.model.backbone.num_layers();
        let arms = freeze_arms(&base, &[0, 1, layers]).unwrap();
        let r = run_arms(Suite::Freeze, &arms, &[0]).unwrap();
        // Late fusion over RGB and depth: two backbones.
        let changed: Vec<usize> = r.runs.iter().map(|x| x.backbone_layers_changed).collect();
        assert_eq!(changed, [0, 2, 2 * layers]);
        assert!(freeze_arms(&base, &[layers + 1]).is_err());
    }

    #[test]
    fn modality_arms_swap_only_the_feature_directory() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path(), &[]);
        let arms = modality_arms(&base).unwrap();
        assert_eq!(arms.len(), 3);
        for (arm, sub) in arms.iter().zip(["mae_rgb", "mae_depth", "mae_cd"]) {
            assert!(arm.config.data.features.as_ref().unwrap().ends_with(sub));
            assert_eq!(arm.config.fusion, arms[0].config.fusion);
            assert_eq!(arm.config.train, base.train);
        }
    }

    #[test]
    fn suite_names() {
        for s in [Suite::Position, Suite::Modality, Suite::Freeze] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("all".parse::<Suite>().is_err());
    }
}
