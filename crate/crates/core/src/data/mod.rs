//! Dataset ingestion: manifests, image codecs, resizing, batching, and the
//! synthetic depth-discriminative generator.

pub mod batch;
pub mod codec;
pub mod manifest;
pub mod resize;
pub mod synth;

pub use batch::{Batch, Batcher, TokenBatch};
pub use codec::{load_image_depth, load_image_rgb, DepthNorm};
pub use manifest::{Manifest, RawRecord, Record};
pub use resize::resize_bilinear;
pub use synth::{discriminating_accuracy, generate_synthetic_dataset, SynthConfig, SynthOutput};

use std::path::Path;

use crate::backbone::load_precomputed_features;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One decoded record, resized to the model's input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[S, S, 3]`
    pub rgb: Tensor<f32>,
    /// `[S, S, 1]`
    pub depth: Option<Tensor<f32>>,
    /// `[positions, channels]`
    pub features: Option<Tensor<f32>>,
    pub captions: Vec<String>,
}

/// Which optional inputs to decode per record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Needs {
    pub depth: bool,
    /// Expected `(positions, channels)` of feature files.
    pub features: Option<(usize, usize)>,
}

fn fit(img: Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let mut img = if img.shape()[..2] == [size, size] {
        img
    } else {
        resize_bilinear(&img, size, size)?
    };
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

pub fn load_rgb_sized(path: &Path, size: usize) -> Result<Tensor<f32>> {
    fit(load_image_rgb(path)?, size)
}

pub fn load_depth_sized(path: &Path, norm: DepthNorm, size: usize) -> Result<Tensor<f32>> {
    fit(load_image_depth(path, norm)?, size)
}

pub fn load_features_flat(path: &Path, dims: (usize, usize)) -> Result<Tensor<f32>> {
    let t = load_precomputed_features(path, dims)?;
    if t.shape()[0] != 1 {
        return Err(Error::format(
            path.display(),
            format!("expected one feature map per file, found batch {}", t.shape()[0]),
        ));
    }
    t.reshape(vec![dims.0, dims.1])
}

pub fn load_sample(record: &Record, size: usize, needs: Needs) -> Result<ImageSample> {
    let missing = |what: &str| Error::Data(format!("record {:?} has no {what}", record.id));
    let depth = if needs.depth {
        let p = record.depth.as_deref().ok_or_else(|| missing("depth map"))?;
        Some(load_depth_sized(p, record.depth_norm, size)?)
    } else {
        None
    };
    let features = match needs.features {
        Some(dims) => {
            let p = record.features.as_deref().ok_or_else(|| missing("feature file"))?;
            Some(load_features_flat(p, dims)?)
        }
        None => None,
    };
    Ok(ImageSample {
        id: record.id.clone(),
        rgb: load_rgb_sized(&record.rgb, size)?,
        depth,
        features,
        captions: record.captions.clone(),
    })
}

/// Decodes every record of a manifest, in manifest order.
pub fn load_samples(manifest: &Manifest, size: usize, needs: Needs) -> Result<Vec<ImageSample>> {
    manifest
        .records
        .iter()
        .map(|r| load_sample(r, size, needs))
        .collect()
}
