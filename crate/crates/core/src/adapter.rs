//! Linear adapters over frozen embeddings.
//!
//! Each tower (descriptor text, object-list text, image) gets a square matrix
//! applied before re-normalization. Identity matrices reproduce the zero-shot
//! scores exactly: an identity tower is skipped rather than multiplied.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{read_store, write_store, EmbeddingStore, EmbeddingVector};

/// CLIP's customary initial temperature.
pub const INIT_TAU: f64 = 0.07;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("dimension mismatch: adapter is {expected}-dimensional, input has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("adapter maps the input to the zero vector")]
    ZeroVector,
    #[error("adapter parameters are not finite")]
    NonFinite,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    Desc,
    Obj,
    Img,
}

impl Tower {
    pub const ALL: [Tower; 3] = [Tower::Desc, Tower::Obj, Tower::Img];

    pub fn key(self) -> &'static str {
        match self {
            Tower::Desc => "A_desc",
            Tower::Obj => "A_obj",
            Tower::Img => "A_img",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub desc: Array2<f64>,
    pub obj: Array2<f64>,
    pub img: Array2<f64>,
    /// Temperature is `exp(log_tau)`.
    pub log_tau: f64,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            desc: Array2::eye(dim),
            obj: Array2::eye(dim),
            img: Array2::eye(dim),
            log_tau: INIT_TAU.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.desc.nrows()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn matrix(&self, tower: Tower) -> &Array2<f64> {
        match tower {
            Tower::Desc => &self.desc,
            Tower::Obj => &self.obj,
            Tower::Img => &self.img,
        }
    }

    pub fn matrix_mut(&mut self, tower: Tower) -> &mut Array2<f64> {
        match tower {
            Tower::Desc => &mut self.desc,
            Tower::Obj => &mut self.obj,
            Tower::Img => &mut self.img,
        }
    }

    pub fn is_identity(&self, tower: Tower) -> bool {
        self.matrix(tower).indexed_iter().all(|((r, c), &v)| v == if r == c { 1.0 } else { 0.0 })
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        let d = self.dim();
        for t in Tower::ALL {
            let m = self.matrix(t);
            if m.nrows() != d || m.ncols() != d {
                return Err(AdapterError::DimMismatch { expected: d, found: m.ncols() });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(AdapterError::NonFinite);
            }
        }
        if !self.log_tau.is_finite() {
            return Err(AdapterError::NonFinite);
        }
        Ok(())
    }

    /// Projects unit vectors through one tower; identity towers pass through
    /// untouched.
    pub fn project_all(&self, tower: Tower, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AdapterError> {
        if self.is_identity(tower) {
            if let Some(v) = vectors.iter().find(|v| v.len() != self.dim()) {
                return Err(AdapterError::DimMismatch { expected: self.dim(), found: v.len() });
            }
            return Ok(vectors.to_vec());
        }
        let m = self.matrix(tower);
        vectors.iter().map(|v| project(m, v)).collect()
    }
}

/// Normalized `m · v` in double precision.
pub fn project(m: &Array2<f64>, v: &[f64]) -> Result<Vec<f64>, AdapterError> {
    if m.ncols() != v.len() {
        return Err(AdapterError::DimMismatch { expected: m.ncols(), found: v.len() });
    }
    let y: Array1<f64> = m.dot(&ArrayView1::from(v));
    let norm = y.dot(&y).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(AdapterError::ZeroVector);
    }
    Ok(y.iter().map(|x| x / norm).collect())
}

/// Returns the L2-normalized `a · v`.
pub fn adapter_forward(a: &Array2<f64>, v: &EmbeddingVector) -> Result<EmbeddingVector, AdapterError> {
    let out = project(a, &v.to_f64())?;
    EmbeddingVector::from_f64(&out).map_err(|_| AdapterError::ZeroVector)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    log_tau: f64,
    meta: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes adapters as an EMBS store (one flattened `dim x dim` record per
/// tower plus `log_tau`) and a JSON sidecar with `meta`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &AdapterParams,
    meta: serde_json::Value,
) -> Result<(), AdapterError> {
    let path = path.as_ref();
    let err = |message: String| AdapterError::Checkpoint { path: path.display().to_string(), message };
    params.validate()?;
    let d = params.dim();
    let mut store = EmbeddingStore::new(d * d);
    for t in Tower::ALL {
        let flat: Vec<f32> = params.matrix(t).iter().map(|&v| v as f32).collect();
        store.insert(t.key(), flat).map_err(|e| err(e.to_string()))?;
    }
    let mut tau_record = vec![0.0f32; d * d];
    tau_record[0] = params.log_tau as f32;
    store.insert("log_tau", tau_record).map_err(|e| err(e.to_string()))?;
    write_store(path, &store).map_err(|e| err(e.to_string()))?;
    let sidecar = Sidecar { dim: d, log_tau: params.log_tau, meta };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(sidecar_path(path), json + "\n").map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AdapterParams, serde_json::Value), AdapterError> {
    let path = path.as_ref();
    let err = |message: String| AdapterError::Checkpoint { path: path.display().to_string(), message };
    let store = read_store(path).map_err(|e| err(e.to_string()))?;
    let sidecar: Sidecar = fs::read_to_string(sidecar_path(path))
        .map_err(|e| err(e.to_string()))
        .and_then(|s| serde_json::from_str(&s).map_err(|e| err(e.to_string())))?;
    let d = sidecar.dim;
    if store.dim() != d * d {
        return Err(err(format!("store dim {} is not {d}^2", store.dim())));
    }
    let matrix = |t: Tower| -> Result<Array2<f64>, AdapterError> {
        let flat = store.get(t.key()).ok_or_else(|| err(format!("missing {}", t.key())))?;
        Ok(Array2::from_shape_vec((d, d), flat.iter().map(|&v| v as f64).collect()).expect("d*d values"))
    };
    let params = AdapterParams {
        desc: matrix(Tower::Desc)?,
        obj: matrix(Tower::Obj)?,
        img: matrix(Tower::Img)?,
        log_tau: sidecar.log_tau,
    };
    params.validate()?;
    Ok((params, sidecar.meta))
}
