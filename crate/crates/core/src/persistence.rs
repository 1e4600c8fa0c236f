//! `.gkm` model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "GKRLSMDL"
//! major     u16
//! minor     u16
//! meta_len  u64
//! data_len  u64
//! sha256    32 bytes over meta ‖ payload
//! meta      JSON (meta_len bytes)
//! payload   f64 little-endian, row-major matrices (data_len bytes)
//! ```
//!
//! Matrices are referenced from the JSON by name; each entry records its
//! byte offset into the payload and its dimensions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{StandardizationTransform, StandardizeKind};
use crate::design::{ColumnSource, DesignRecipe, FixedLayout, ReducedBlock, TermRecipe};
use crate::error::{GkrlsError, Result};
use crate::family::Family;
use crate::inference::{SeKind, VarianceEstimate, VarianceKind};
use crate::kernel::{KernelPredictor, SketchMethod, SketchPlanSummary};
use crate::model::{FitDiagnostics, FittedModel};
use crate::spec::ModelSpec;

pub const MAGIC: &[u8; 8] = b"GKRLSMDL";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;
pub const EXTENSION: &str = "gkm";
const PREAMBLE: usize = 8 + 2 + 2 + 8 + 8 + 32;

/// Location of one matrix inside the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
    index: BTreeMap<String, MatrixEntry>,
}

impl PayloadWriter {
    fn put(&mut self, name: String, m: &Mat<f64>) -> String {
        let entry = MatrixEntry {
            offset: self.bytes.len() as u64,
            rows: m.nrows(),
            cols: m.ncols(),
        };
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        self.index.insert(name.clone(), entry);
        name
    }

    fn put_vec(&mut self, name: String, v: &[f64]) -> String {
        self.put(name, &Mat::from_fn(1, v.len(), |_, j| v[j]))
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    index: &'a BTreeMap<String, MatrixEntry>,
}

impl PayloadReader<'_> {
    fn get(&self, name: &str) -> Result<Mat<f64>> {
        let e = self
            .index
            .get(name)
            .ok_or_else(|| GkrlsError::Format(format!("matrix '{name}' missing from payload index")))?;
        let len = e
            .rows
            .checked_mul(e.cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| GkrlsError::Format(format!("matrix '{name}' has impossible dimensions")))?;
        let start = e.offset as usize;
        let end = start
            .checked_add(len)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| GkrlsError::Format(format!("matrix '{name}' extends past the payload")))?;
        let data = &self.bytes[start..end];
        Ok(Mat::from_fn(e.rows, e.cols, |i, j| decode_f64(&data[(i * e.cols + j) * 8..])))
    }

    fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.get(name)?;
        if m.nrows() != 1 && m.ncols() > 0 {
            return Err(GkrlsError::Format(format!("'{name}' is not a vector")));
        }
        Ok((0..m.ncols()).map(|j| m[(0, j)]).collect())
    }
}

fn decode_f64(b: &[u8]) -> f64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    f64::from_le_bytes(a)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredStandardizer {
    kind: StandardizeKind,
    center: Vec<f64>,
    transform: String,
    inverse: String,
    rank: usize,
    dropped: Vec<usize>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredPredictor {
    method: SketchMethod,
    bandwidth: f64,
    reference: String,
    projection: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StoredTerm {
    RandomIntercept {
        label: String,
        group: String,
        levels: Vec<String>,
    },
    Kernel {
        label: String,
        inputs: Vec<ColumnSource>,
        standardizer: StoredStandardizer,
        predictor: StoredPredictor,
        plan: SketchPlanSummary,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredBlock {
    label: String,
    offset: usize,
    rank: usize,
    basis: Option<String>,
    log_pdet: f64,
    min_rel_eigen: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredVariance {
    kind: VarianceKind,
    matrix: String,
    n_clusters: Option<usize>,
    correction: f64,
    warnings: Vec<String>,
}

/// JSON header of a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    spec: ModelSpec,
    formula: String,
    family: Family,
    fixed: FixedLayout,
    terms: Vec<StoredTerm>,
    blocks: Vec<StoredBlock>,
    coef: String,
    lambda: Vec<f64>,
    scale: f64,
    se_kind: SeKind,
    variance: StoredVariance,
    diagnostics: FitDiagnostics,
    matrices: BTreeMap<String, MatrixEntry>,
}

fn store_recipe(recipe: &DesignRecipe, w: &mut PayloadWriter) -> (Vec<StoredTerm>, Vec<StoredBlock>) {
    let terms = recipe
        .terms
        .iter()
        .enumerate()
        .map(|(t, term)| match term {
            TermRecipe::RandomIntercept { label, group, levels } => StoredTerm::RandomIntercept {
                label: label.clone(),
                group: group.clone(),
                levels: levels.clone(),
            },
            TermRecipe::Kernel {
                label,
                inputs,
                standardizer,
                predictor,
                plan,
            } => StoredTerm::Kernel {
                label: label.clone(),
                inputs: inputs.clone(),
                standardizer: StoredStandardizer {
                    kind: standardizer.kind,
                    center: standardizer.center.clone(),
                    transform: w.put(format!("term{t}.standardizer.transform"), &standardizer.transform),
                    inverse: w.put(format!("term{t}.standardizer.inverse"), &standardizer.inverse),
                    rank: standardizer.rank,
                    dropped: standardizer.dropped.clone(),
                    warnings: standardizer.warnings.clone(),
                },
                predictor: StoredPredictor {
                    method: predictor.method,
                    bandwidth: predictor.bandwidth,
                    reference: w.put(format!("term{t}.reference"), &predictor.reference),
                    projection: predictor
                        .projection
                        .as_ref()
                        .map(|p| w.put(format!("term{t}.projection"), p)),
                },
                plan: plan.clone(),
            },
        })
        .collect();
    let blocks = recipe
        .blocks
        .iter()
        .enumerate()
        .map(|(t, b)| StoredBlock {
            label: b.label.clone(),
            offset: b.offset,
            rank: b.rank,
            basis: b.basis.as_ref().map(|u| w.put(format!("term{t}.basis"), u)),
            log_pdet: b.log_pdet,
            min_rel_eigen: b.min_rel_eigen,
        })
        .collect();
    (terms, blocks)
}

fn restore_recipe(fixed: FixedLayout, terms: Vec<StoredTerm>, blocks: Vec<StoredBlock>, r: &PayloadReader) -> Result<DesignRecipe> {
    if terms.len() != blocks.len() {
        return Err(GkrlsError::Format("term and block counts differ".into()));
    }
    let terms = terms
        .into_iter()
        .map(|t| {
            Ok(match t {
                StoredTerm::RandomIntercept { label, group, levels } => {
                    TermRecipe::RandomIntercept { label, group, levels }
                }
                StoredTerm::Kernel {
                    label,
                    inputs,
                    standardizer: s,
                    predictor: p,
                    plan,
                } => TermRecipe::Kernel {
                    label,
                    inputs,
                    standardizer: StandardizationTransform {
                        kind: s.kind,
                        center: s.center,
                        transform: r.get(&s.transform)?,
                        inverse: r.get(&s.inverse)?,
                        rank: s.rank,
                        dropped: s.dropped,
                        warnings: s.warnings,
                    },
                    predictor: KernelPredictor {
                        method: p.method,
                        bandwidth: p.bandwidth,
                        reference: r.get(&p.reference)?,
                        projection: p.projection.map(|n| r.get(&n)).transpose()?,
                    },
                    plan,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let blocks = blocks
        .into_iter()
        .map(|b| {
            Ok(ReducedBlock {
                label: b.label,
                offset: b.offset,
                rank: b.rank,
                basis: b.basis.map(|n| r.get(&n)).transpose()?,
                log_pdet: b.log_pdet,
                min_rel_eigen: b.min_rel_eigen,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignRecipe { fixed, terms, blocks })
}

/// Serialize a fitted model into the `.gkm` byte layout.
pub fn encode_model(model: &FittedModel) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::default();
    let (terms, blocks) = store_recipe(&model.recipe, &mut w);
    let coef = w.put_vec("coef".into(), &model.coef);
    let variance = StoredVariance {
        kind: model.variance.kind,
        matrix: w.put("variance".into(), &model.variance.reduced),
        n_clusters: model.variance.n_clusters,
        correction: model.variance.correction,
        warnings: model.variance.warnings.clone(),
    };
    let meta = ModelMeta {
        format: format!("gkm {FORMAT_MAJOR}.{FORMAT_MINOR}"),
        spec: model.spec.clone(),
        formula: model.spec.to_formula(),
        family: model.family,
        fixed: model.recipe.fixed.clone(),
        terms,
        blocks,
        coef,
        lambda: model.lambda.clone(),
        scale: model.scale,
        se_kind: model.se_kind.clone(),
        variance,
        diagnostics: model.diagnostics.clone(),
        matrices: w.index,
    };
    let json = serde_json::to_vec(&meta)?;
    let payload = w.bytes;
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hasher.update(&payload);
    let digest = hasher.finalize();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
    out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    u64::from_le_bytes(a)
}

/// Parse a `.gkm` byte buffer.
pub fn decode_model(bytes: &[u8]) -> Result<FittedModel> {
    if bytes.len() < PREAMBLE {
        return Err(GkrlsError::Format(format!(
            "file is truncated ({} bytes, header needs {PREAMBLE})",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(GkrlsError::Format("not a gkrls model file (bad magic)".into()));
    }
    let major = u16::from_le_bytes([bytes[8], bytes[9]]);
    let minor = u16::from_le_bytes([bytes[10], bytes[11]]);
    if major > FORMAT_MAJOR {
        return Err(GkrlsError::UnsupportedVersion {
            found: format!("{major}.{minor}"),
            supported: FORMAT_MAJOR,
        });
    }
    let meta_len = read_u64(&bytes[12..]) as usize;
    let data_len = read_u64(&bytes[20..]) as usize;
    let expected = PREAMBLE
        .checked_add(meta_len)
        .and_then(|v| v.checked_add(data_len))
        .ok_or_else(|| GkrlsError::Format("section lengths overflow".into()))?;
    if bytes.len() != expected {
        return Err(GkrlsError::Format(format!(
            "file length {} does not match the header ({expected}); partial or padded file",
            bytes.len()
        )));
    }
    let digest = &bytes[28..60];
    let body = &bytes[PREAMBLE..];
    if Sha256::digest(body).as_slice() != digest {
        return Err(GkrlsError::HashMismatch);
    }
    let meta: ModelMeta = serde_json::from_slice(&body[..meta_len])?;
    let reader = PayloadReader {
        bytes: &body[meta_len..],
        index: &meta.matrices,
    };
    let recipe = restore_recipe(meta.fixed, meta.terms, meta.blocks, &reader)?;
    let coef = reader.get_vec(&meta.coef)?;
    if coef.len() != recipe.ncoef() {
        return Err(GkrlsError::Format("coefficient count does not match the design layout".into()));
    }
    let variance = VarianceEstimate {
        kind: meta.variance.kind,
        reduced: reader.get(&meta.variance.matrix)?,
        n_clusters: meta.variance.n_clusters,
        correction: meta.variance.correction,
        warnings: meta.variance.warnings,
    };
    Ok(FittedModel {
        spec: meta.spec,
        family: meta.family,
        recipe,
        coef,
        lambda: meta.lambda,
        scale: meta.scale,
        se_kind: meta.se_kind,
        variance,
        diagnostics: meta.diagnostics,
        training: None,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> GkrlsError {
    GkrlsError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Write a model file (via a temporary sibling, then rename).
pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(GkrlsError::InvalidArgument("empty model path".into()));
    }
    if model.recipe.terms.iter().any(|t| {
        matches!(t, TermRecipe::Kernel { predictor, .. } if predictor.method == SketchMethod::Gaussian)
    }) {
        log::warn!("gaussian-sketch model stores all standardized training rows");
    }
    let bytes = encode_model(model)?;
    let tmp = path.with_extension(format!("{EXTENSION}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    if path.as_os_str().is_empty() {
        return Err(GkrlsError::InvalidArgument("empty model path".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_model(&bytes)
}

/// Pretty JSON with a trailing newline, for configs and reports.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::{fit_model, FitOptions};
    use crate::solver::Scale;
    use crate::spec::parse_spec;

    fn model() -> (Dataset, FittedModel) {
        let n = 50;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).sin() * 2.0).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i].powi(2) + 0.1 * ((i * 7) % 5) as f64).collect();
        let g: Vec<String> = (0..n).map(|i| format!("g{}", i % 4)).collect();
        let d = Dataset::builder("y", y)
            .numeric("x", x)
            .categorical("g", &g)
            .build()
            .unwrap();
        let m = fit_model(&d, &parse_spec("y ~ fixed(x) + kernel(x; size=10) + re(g)").unwrap(), &FitOptions::default()).unwrap();
        (d, m)
    }

    #[test]
    fn round_trip_predictions_are_identical() {
        let (d, m) = model();
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        let a = m.predict(&d, Scale::Response).unwrap();
        let b = back.predict(&d, Scale::Response).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.lambda, m.lambda);
        assert!(back.training.is_none());
    }

    #[test]
    fn corruption_version_and_truncation() {
        let (_, m) = model();
        let bytes = encode_model(&m).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x40;
        assert!(matches!(decode_model(&bad), Err(GkrlsError::HashMismatch)));
        let mut newer = bytes.clone();
        newer[8..10].copy_from_slice(&(FORMAT_MAJOR + 1).to_le_bytes());
        let err = decode_model(&newer).unwrap_err();
        assert!(matches!(err, GkrlsError::UnsupportedVersion { .. }));
        assert!(err.to_string().contains("newer"));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 8]), Err(GkrlsError::Format(_))));
        assert!(matches!(decode_model(&bytes[..20]), Err(GkrlsError::Format(_))));
        assert!(load_model(Path::new("")).is_err());
    }

    #[test]
    fn payload_is_little_endian() {
        let mut w = PayloadWriter::default();
        w.put_vec("v".into(), &[1.0, -2.5]);
        assert_eq!(&w.bytes[..8], &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
        assert_eq!(&w.bytes[8..], &[0, 0, 0, 0, 0, 0, 0x04, 0xc0]);
        let r = PayloadReader {
            bytes: &w.bytes,
            index: &w.index,
        };
        assert_eq!(r.get_vec("v").unwrap(), vec![1.0, -2.5]);
    }
}
