#![allow(dead_code)]

pub mod oracle;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusecap::config::RunConfig;
use fusecap::data::{generate_synthetic_dataset, SynthConfig, SynthOutput};
use fusecap::decoder::{BOS, EOS, PAD};
use fusecap::feature_fusion::{Family, FusionSpec, Method, Modality, Position};
use fusecap::metrics::EvalPair;
use fusecap::model::ModelInputs;
use fusecap::nn::ParamStore;
use fusecap::tensor::{Real, Tensor};

/// Toy dimensions: d = 32, an 8×8 image reduced to P = 4 positions, and
/// feature files shaped to match.
pub const TOY: &[(&str, &str)] = &[
    ("model.d_model", "32"),
    ("model.heads", "4"),
    ("model.decoder_layers", "1"),
    ("model.decoder_ff", "64"),
    ("model.max_len", "8"),
    ("model.backbone_channels", "4,8"),
    ("data.image_size", "8"),
    ("model.feature_positions", "4"),
    ("model.feature_channels", "12"),
];

pub fn configured(spec: FusionSpec, settings: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig {
        fusion: spec,
        ..RunConfig::default()
    };
    for (k, v) in settings {
        c.set(k, v, Path::new(".")).unwrap();
    }
    c.finish().unwrap();
    c
}

pub fn spec(family: Family, method: Method, position: Position, inputs: &[Modality]) -> FusionSpec {
    FusionSpec::new(family, method, position, inputs)
}

pub fn random_inputs<T: Real>(batch: usize, size: usize, features: (usize, usize), seed: u64) -> ModelInputs<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)));
    ModelInputs {
        rgb: draw(vec![batch, size, size, 3], 0.0, 1.0),
        depth: Some(draw(vec![batch, size, size, 1], 0.05, 1.0)),
        features: Some(draw(vec![batch, features.0, features.1], -1.0, 1.0)),
        cached: Vec::new(),
    }
}

/// Teacher-forcing inputs and targets for `batch` random captions of up to
/// `len` tokens; the last row is one token shorter and padded.
pub fn random_tokens(batch: usize, len: usize, vocab: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for b in 0..batch {
        let content = if b + 1 == batch && batch > 1 { len - 2 } else { len - 1 };
        let words: Vec<usize> = (0..content).map(|_| rng.gen_range(4..vocab)).collect();
        let mut inp = vec![BOS];
        inp.extend(&words);
        let mut tgt = words;
        tgt.push(EOS);
        inp.resize(len, PAD);
        tgt.resize(len, PAD);
        inputs.extend(inp);
        targets.extend(tgt);
    }
    (inputs, targets)
}

/// Copies parameters of `to` from `from`; `rename` maps a name in `to` to
/// its source, or `None` to leave that parameter as it is.
pub fn transplant<T: Real>(from: &ParamStore<T>, to: &mut ParamStore<T>, rename: impl Fn(&str) -> Option<String>) {
    let ids: Vec<_> = to.entries().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let Some(src) = rename(&name) else { continue };
        let sid = from.id(&src).unwrap_or_else(|| panic!("{src} (for {name}) not in source"));
        to.set_value(id, from.value(sid).clone()).unwrap();
    }
}

pub fn synth(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> SynthOutput {
    generate_synthetic_dataset(
        dir,
        &SynthConfig {
            n_train,
            n_val: n_test,
            n_test,
            image_size: 32,
            seed,
        },
    )
    .unwrap()
}

const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

/// A random pair over a six-word vocabulary: hypothesis and 1 to 3
/// references of 1 to `max_len` tokens each.
pub fn random_pair(rng: &mut ChaCha8Rng, max_len: usize) -> (oracle::Pair, EvalPair) {
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(1..=max_len);
        (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
    };
    let hyp = sent(rng);
    let refs: Vec<Vec<String>> = (0..rng.gen_range(1..=3)).map(|_| sent(rng)).collect();
    let ep = EvalPair::new(hyp.clone(), refs.clone()).unwrap();
    (oracle::Pair { hyp, refs }, ep)
}

/// Writes straight to the process's stderr, bypassing the test harness's
/// output capture, so summary lines show up in a plain `cargo test` log.
pub fn emit(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

/// One row per named fusion configuration: pixel, feature, concat versus
/// cross-attention, hybrid inputs and fusion positions.
pub fn table_rows() -> Vec<(&'static str, FusionSpec)> {
    use Family::*;
    use Method::{Concat, Conv1e, Conv1s, CrossAttention, Dmf, None};
    use Modality::*;
    use Position::*;
    let na = NotApplicable;
    vec![
        ("DMF RGB+Depth", spec(Pixel, Dmf, na, &[Rgb, Depth])),
        ("Conv1E RGB+Depth", spec(Pixel, Conv1e, na, &[Rgb, Depth])),
        ("HSV conversion HSD", spec(Pixel, Method::Hsd, na, &[Hsd])),
        ("HSV conversion RGBD", spec(Pixel, Method::Rgbd, na, &[Rgbd])),
        ("Conv1S RGB+Depth", spec(Feature, Conv1s, na, &[Rgb, Depth])),
        ("MultiMAE features", spec(Feature, None, na, &[MaeCd])),
        ("early concat RGB+Depth", spec(Feature, Concat, Early, &[Rgb, Depth])),
        ("middle concat RGB+Depth", spec(Feature, Concat, Middle, &[Rgb, Depth])),
        ("late concat RGB+Depth", spec(Feature, Concat, Late, &[Rgb, Depth])),
        ("early CA RGB+Depth", spec(Feature, CrossAttention, Early, &[Rgb, Depth])),
        ("middle CA RGB+Depth", spec(Feature, CrossAttention, Middle, &[Rgb, Depth])),
        ("late CA RGB+Depth", spec(Feature, CrossAttention, Late, &[Rgb, Depth])),
        ("early concat RGB+RGBD", spec(Hybrid, Concat, Early, &[Rgb, Rgbd])),
        ("middle concat RGB+RGBD", spec(Hybrid, Concat, Middle, &[Rgb, Rgbd])),
        ("late concat RGB+RGBD", spec(Hybrid, Concat, Late, &[Rgb, Rgbd])),
        ("early CA RGB+RGBD", spec(Hybrid, CrossAttention, Early, &[Rgb, Rgbd])),
        ("middle CA RGB+RGBD", spec(Hybrid, CrossAttention, Middle, &[Rgb, Rgbd])),
        ("late CA RGB+RGBD", spec(Hybrid, CrossAttention, Late, &[Rgb, Rgbd])),
        ("early CA RGB+HSD", spec(Hybrid, CrossAttention, Early, &[Rgb, Hsd])),
        ("middle CA RGB+HSD", spec(Hybrid, CrossAttention, Middle, &[Rgb, Hsd])),
        ("late CA RGB+HSD", spec(Hybrid, CrossAttention, Late, &[Rgb, Hsd])),
        ("middle concat RGB+MAE_CD", spec(Hybrid, Concat, Middle, &[Rgb, MaeCd])),
        ("late concat RGB+MAE_CD", spec(Hybrid, Concat, Late, &[Rgb, MaeCd])),
        ("late CA RGB+MAE_CD", spec(Hybrid, CrossAttention, Late, &[Rgb, MaeCd])),
        ("Conv1S + middle concat RGB+Depth+MAE_CD", spec(Hybrid, Concat, Middle, &[Rgb, Depth, MaeCd])),
    ]
}
