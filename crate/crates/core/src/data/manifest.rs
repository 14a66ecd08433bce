//! JSON-lines dataset manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::DepthNorm;
use crate::error::{Error, Result};
use crate::feature_fusion::FusionSpec;

/// One manifest line as written on disk; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub captions: Vec<String>,
    pub depth_norm: DepthNorm,
    /// 1-based line in the manifest file.
    pub line: usize,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<Record>,
}

fn line_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

fn depth_norm(raw: &RawRecord) -> std::result::Result<DepthNorm, String> {
    match (raw.normalize.as_deref(), raw.depth_scale) {
        (_, Some(s)) if !(s > 0.0 && s.is_finite()) => Err(format!("depth_scale must be positive, got {s}")),
        (None | Some("scale"), Some(s)) => Ok(DepthNorm::Scale(s)),
        (None | Some("max"), None) => Ok(DepthNorm::Max),
        (Some("none"), None) => Ok(DepthNorm::Raw),
        (Some("scale"), None) => Err("normalize: scale needs depth_scale".into()),
        (Some(other), _) => Err(format!("unknown normalize mode {other:?} (max, scale or none)")),
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses and validates a manifest: unique ids, non-empty captions and
    /// existing files, all reported with their line number.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut records = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            if raw_line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(raw_line).map_err(|e| line_err(path, line, e))?;
            if let Some(first) = seen.insert(raw.id.clone(), line) {
                return Err(line_err(
                    path,
                    line,
                    format!("duplicate id {:?} (lines {first} and {line})", raw.id),
                ));
            }
            if raw.captions.is_empty() || raw.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(line_err(path, line, format!("record {:?} has an empty caption list or caption", raw.id)));
            }
            let depth_norm = depth_norm(&raw).map_err(|m| line_err(path, line, m))?;
            let resolve = |rel: &str| -> Result<PathBuf> {
                let p = dir.join(rel);
                if p.is_file() {
                    Ok(p)
                } else {
                    Err(line_err(path, line, format!("missing file {}", p.display())))
                }
            };
            records.push(Record {
                rgb: resolve(&raw.rgb)?,
                depth: raw.depth.as_deref().map(resolve).transpose()?,
                features: raw.features.as_deref().map(resolve).transpose()?,
                id: raw.id,
                captions: raw.captions,
                depth_norm,
                line,
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    /// Points every record at `<dir>/<id>.fcf`, checking the files exist.
    pub fn with_feature_dir(mut self, dir: &Path) -> Result<Self> {
        for r in &mut self.records {
            let p = dir.join(format!("{}.fcf", r.id));
            if !p.is_file() {
                return Err(line_err(
                    &self.path,
                    r.line,
                    format!("missing feature file {} for {:?}", p.display(), r.id),
                ));
            }
            r.features = Some(p);
        }
        Ok(self)
    }

    /// Checks that every record carries the modalities `spec` consumes.
    pub fn check_modalities(&self, spec: &FusionSpec) -> Result<()> {
        for r in &self.records {
            if spec.needs_depth() && r.depth.is_none() {
                return Err(line_err(
                    &self.path,
                    r.line,
                    format!("record {:?} has no depth map but fusion spec {spec} needs one", r.id),
                ));
            }
            if spec.needs_features() && r.features.is_none() {
                return Err(line_err(
                    &self.path,
                    r.line,
                    format!("record {:?} has no feature file but fusion spec {spec} needs one", r.id),
                ));
            }
        }
        Ok(())
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| r.captions.iter().map(String::as_str))
    }
}

/// Serializes records as manifest lines.
pub fn write_manifest(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
