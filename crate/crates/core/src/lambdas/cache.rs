//! Persistent store for computed moment tables: one binary payload plus a
//! JSON sidecar per key, under `<dir>/lambda/<hex-key>.{bin,json}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_lambdas, LambdaError, LambdaSet, SaturationFunction};
use crate::sysmodel::SystemModel;

const MAGIC: &[u8; 8] = b"SHRCLAM1";

/// Everything that affects the table values. Two keys hash equal exactly
/// when the computation would be bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LambdaCacheKey {
    pub model_hash: String,
    pub n_horizon: usize,
    pub sat: String,
    pub p_hash: String,
    pub count: u64,
    pub seed: u64,
}

fn hash_matrix(h: &mut Sha256, m: &DMatrix<f64>) {
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            h.update(m[(i, j)].to_bits().to_le_bytes());
        }
    }
}

fn matrix_digest(m: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    hash_matrix(&mut h, m);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl LambdaCacheKey {
    pub fn new(
        model: &SystemModel,
        n_horizon: usize,
        sat: &SaturationFunction,
        p_err: &DMatrix<f64>,
        count: u64,
        seed: u64,
    ) -> Self {
        let mut h = Sha256::new();
        for m in [
            &model.a,
            &model.b,
            &model.c,
            &model.sigma_w,
            &model.sigma_v,
            &model.sigma_x0,
        ] {
            hash_matrix(&mut h, m);
        }
        let xhat0 = DMatrix::from_column_slice(model.xhat0.len(), 1, model.xhat0.as_slice());
        hash_matrix(&mut h, &xhat0);
        LambdaCacheKey {
            model_hash: hex(&h.finalize()),
            n_horizon,
            sat: sat.descriptor(),
            p_hash: matrix_digest(p_err),
            count,
            seed,
        }
    }

    /// Filename stem: digest over all key fields.
    pub fn hex_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_hash.as_bytes());
        h.update((self.n_horizon as u64).to_le_bytes());
        h.update(self.sat.as_bytes());
        h.update(self.p_hash.as_bytes());
        h.update(self.count.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    /// Entry found and loaded.
    Hit,
    /// No entry; computed and persisted.
    Computed,
    /// Entry failed its integrity check; recomputed and overwritten.
    RecomputedCorrupt,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    key: LambdaCacheKey,
    payload_sha256: String,
    created_unix: u64,
}

fn write_mat(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], LambdaError> {
        if self.at + len > self.bytes.len() {
            return Err(LambdaError::CacheCorrupt("payload truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + len];
        self.at += len;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, LambdaError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self) -> Result<DMatrix<f64>, LambdaError> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows.saturating_mul(cols) > 1 << 28 {
            return Err(LambdaError::CacheCorrupt("implausible matrix size".into()));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let bits = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
                m[(i, j)] = f64::from_bits(bits);
            }
        }
        Ok(m)
    }
}

fn encode(set: &LambdaSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let phi_mat = DMatrix::from_column_slice(set.phi.len(), 1, set.phi.as_slice());
    write_mat(&mut buf, &phi_mat);
    write_mat(&mut buf, &set.phi_e);
    write_mat(&mut buf, &set.w_phi);
    write_mat(&mut buf, &set.phi_phi);
    write_mat(&mut buf, &set.p_used);
    buf.extend_from_slice(&set.sample_count.to_le_bytes());
    buf.extend_from_slice(&set.seed.to_le_bytes());
    buf
}

fn decode(bytes: &[u8]) -> Result<LambdaSet, LambdaError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(LambdaError::CacheCorrupt("bad magic".into()));
    }
    let phi_mat = r.mat()?;
    let phi = DVector::from_column_slice(phi_mat.as_slice());
    let phi_e = r.mat()?;
    let w_phi = r.mat()?;
    let phi_phi = r.mat()?;
    let p_used = r.mat()?;
    let sample_count = r.u64()?;
    let seed = r.u64()?;
    Ok(LambdaSet {
        phi,
        phi_e,
        w_phi,
        phi_phi,
        p_used,
        sample_count,
        seed,
    })
}

fn paths(dir: &Path, key: &LambdaCacheKey) -> (PathBuf, PathBuf) {
    let stem = dir.join("lambda").join(key.hex_key());
    (stem.with_extension("bin"), stem.with_extension("json"))
}

fn io_err(e: std::io::Error) -> LambdaError {
    LambdaError::Io(e.to_string())
}

fn save(dir: &Path, key: &LambdaCacheKey, set: &LambdaSet) -> Result<(), LambdaError> {
    let (bin_path, json_path) = paths(dir, key);
    fs::create_dir_all(bin_path.parent().unwrap()).map_err(io_err)?;
    let payload = encode(set);
    let digest = hex(&Sha256::digest(&payload));
    let sidecar = Sidecar {
        version: 1,
        key: key.clone(),
        payload_sha256: digest,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let mut f = fs::File::create(&bin_path).map_err(io_err)?;
    f.write_all(&payload).map_err(io_err)?;
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(io_err)?;
    Ok(())
}

fn load(dir: &Path, key: &LambdaCacheKey) -> Result<Option<LambdaSet>, LambdaError> {
    let (bin_path, json_path) = paths(dir, key);
    if !bin_path.exists() || !json_path.exists() {
        return Ok(None);
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json_path).map_err(io_err)?)
        .map_err(|e| LambdaError::CacheCorrupt(format!("sidecar: {e}")))?;
    if &sidecar.key != key {
        return Err(LambdaError::CacheCorrupt("sidecar key mismatch".into()));
    }
    let payload = fs::read(&bin_path).map_err(io_err)?;
    if hex(&Sha256::digest(&payload)) != sidecar.payload_sha256 {
        return Err(LambdaError::CacheCorrupt("payload hash mismatch".into()));
    }
    Ok(Some(decode(&payload)?))
}

/// Returns the cached table for the key if present and intact; otherwise
/// computes it, persists it, and returns it. A corrupt entry is recomputed
/// and overwritten rather than surfaced as an error.
pub fn lambda_cache_get_or_compute(
    dir: &Path,
    model: &SystemModel,
    n_horizon: usize,
    sat: &SaturationFunction,
    p_err: &DMatrix<f64>,
    count: u64,
    seed: u64,
) -> Result<(LambdaSet, CacheOutcome), LambdaError> {
    let key = LambdaCacheKey::new(model, n_horizon, sat, p_err, count, seed);
    match load(dir, &key) {
        Ok(Some(set)) => Ok((set, CacheOutcome::Hit)),
        Ok(None) => {
            let set = estimate_lambdas(p_err, model, n_horizon, sat, count, seed);
            save(dir, &key, &set)?;
            Ok((set, CacheOutcome::Computed))
        }
        Err(LambdaError::CacheCorrupt(_)) => {
            let set = estimate_lambdas(p_err, model, n_horizon, sat, count, seed);
            save(dir, &key, &set)?;
            Ok((set, CacheOutcome::RecomputedCorrupt))
        }
        Err(e) => Err(e),
    }
}

/// Unconditionally recompute and overwrite the entry for the key.
pub fn lambda_cache_force_compute(
    dir: &Path,
    model: &SystemModel,
    n_horizon: usize,
    sat: &SaturationFunction,
    p_err: &DMatrix<f64>,
    count: u64,
    seed: u64,
) -> Result<LambdaSet, LambdaError> {
    let key = LambdaCacheKey::new(model, n_horizon, sat, p_err, count, seed);
    let set = estimate_lambdas(p_err, model, n_horizon, sat, count, seed);
    save(dir, &key, &set)?;
    Ok(set)
}
