//! Prefill/decode cache store and load-latency model.
//!
//! A collective cache entry holds the user-specific keys and values
//! (`n×d_u` each) plus one key index and one value index per item. The pool
//! itself stays resident and is never part of per-request traffic.
//!
//! Entry file layout (`.cke`, all little-endian):
//!
//! ```text
//! "CKE1" | u32 id_len | id bytes | u32 n | u16 d_u | u8 elem_width | u8 idx_width
//! K_u (n·d_u elems) | V_u (n·d_u elems) | I_k (n idx) | I_v (n idx)
//! ```
//!
//! `idx_width = 0` marks a full-KV entry with no index blocks, in which case
//! `d_u` is the full attention width.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::{CtrModel, TargetScore};
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::collective::{route, Mode, Side, SideParams};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const ENTRY_MAGIC: &[u8; 4] = b"CKE1";
const MANIFEST: &str = "index.tsv";

/// Storage width of cached K/V elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemWidth {
    F32,
    F64,
}

impl ElemWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElemWidth::F32 => 4,
            ElemWidth::F64 => 8,
        }
    }

    pub fn from_bytes(b: u8) -> Result<Self> {
        match b {
            4 => Ok(ElemWidth::F32),
            8 => Ok(ElemWidth::F64),
            other => Err(Error::usage(format!(
                "element width must be 4 or 8 bytes, got {other}"
            ))),
        }
    }

    fn round(self, x: f64) -> f64 {
        match self {
            ElemWidth::F32 => x as f32 as f64,
            ElemWidth::F64 => x,
        }
    }
}

/// Storage width of cached pool indices; `None` for full-KV entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxWidth {
    None,
    U8,
    U16,
    U32,
}

impl IdxWidth {
    pub fn bytes(self) -> usize {
        match self {
            IdxWidth::None => 0,
            IdxWidth::U8 => 1,
            IdxWidth::U16 => 2,
            IdxWidth::U32 => 4,
        }
    }

    pub fn from_bytes(b: u8) -> Result<Self> {
        match b {
            0 => Ok(IdxWidth::None),
            1 => Ok(IdxWidth::U8),
            2 => Ok(IdxWidth::U16),
            4 => Ok(IdxWidth::U32),
            other => Err(Error::usage(format!(
                "index width must be 0, 1, 2 or 4 bytes, got {other}"
            ))),
        }
    }

    /// Largest pool size addressable at this width.
    pub fn capacity(self) -> usize {
        match self {
            IdxWidth::None => 0,
            IdxWidth::U8 => 1 << 8,
            IdxWidth::U16 => 1 << 16,
            IdxWidth::U32 => 1 << 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageWidths {
    pub elem: ElemWidth,
    pub idx: IdxWidth,
}

impl Default for StorageWidths {
    fn default() -> Self {
        Self {
            elem: ElemWidth::F32,
            idx: IdxWidth::U16,
        }
    }
}

/// Bytes of a collective entry: `n·(2·d_u·elem + 2·idx)`.
pub fn collective_entry_bytes(n: usize, user_dim: usize, widths: StorageWidths) -> usize {
    n * (2 * user_dim * widths.elem.bytes() + 2 * widths.idx.bytes())
}

/// Bytes of a full-KV entry: `2·n·d_a·elem`.
pub fn baseline_entry_bytes(n: usize, attn_dim: usize, elem: ElemWidth) -> usize {
    2 * n * attn_dim * elem.bytes()
}

/// Per-user cached artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub user_id: String,
    /// `n×d_u` (or `n×d_a` for full-KV entries).
    pub user_keys: Matrix,
    pub user_values: Matrix,
    /// Empty for full-KV entries.
    pub key_indices: Vec<u32>,
    pub value_indices: Vec<u32>,
    pub widths: StorageWidths,
}

impl CacheEntry {
    pub fn len(&self) -> usize {
        self.user_keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_dim(&self) -> usize {
        self.user_keys.cols()
    }

    /// Payload bytes, excluding the file header.
    pub fn byte_size(&self) -> usize {
        collective_entry_bytes(self.len(), self.user_dim(), self.widths)
    }

    fn header_len(&self) -> usize {
        4 + 4 + self.user_id.len() + 4 + 2 + 1 + 1
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(ENTRY_MAGIC)
            .u32(self.user_id.len() as u32)
            .bytes(self.user_id.as_bytes())
            .u32(self.len() as u32)
            .u16(self.user_dim() as u16)
            .u8(self.widths.elem.bytes() as u8)
            .u8(self.widths.idx.bytes() as u8);
        for m in [&self.user_keys, &self.user_values] {
            for &x in m.as_slice() {
                match self.widths.elem {
                    ElemWidth::F32 => w.f32(x as f32),
                    ElemWidth::F64 => w.f64(x),
                };
            }
        }
        if self.widths.idx != IdxWidth::None {
            for block in [&self.key_indices, &self.value_indices] {
                for &i in block.iter() {
                    match self.widths.idx {
                        IdxWidth::U8 => w.u8(i as u8),
                        IdxWidth::U16 => w.u16(i as u16),
                        IdxWidth::U32 => w.u32(i),
                        IdxWidth::None => unreachable!(),
                    };
                }
            }
        }
        debug_assert_eq!(w.len(), self.header_len() + self.byte_size());
        w.finish()
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "cache entry");
        r.expect_magic(ENTRY_MAGIC)?;
        let id_len = r.u32()? as usize;
        let user_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format("cache entry", "user id is not UTF-8"))?;
        let n = r.u32()? as usize;
        let d_u = r.u16()? as usize;
        let elem = ElemWidth::from_bytes(r.u8()?)?;
        let idx = IdxWidth::from_bytes(r.u8()?)?;
        let read_matrix = |r: &mut ByteReader| -> Result<Matrix> {
            let data = (0..n * d_u)
                .map(|_| match elem {
                    ElemWidth::F32 => r.f32().map(f64::from),
                    ElemWidth::F64 => r.f64(),
                })
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_vec(n, d_u, data)
        };
        let user_keys = read_matrix(&mut r)?;
        let user_values = read_matrix(&mut r)?;
        let read_idx = |r: &mut ByteReader| -> Result<Vec<u32>> {
            if idx == IdxWidth::None {
                return Ok(Vec::new());
            }
            (0..n)
                .map(|_| match idx {
                    IdxWidth::U8 => r.u8().map(u32::from),
                    IdxWidth::U16 => r.u16().map(u32::from),
                    IdxWidth::U32 => r.u32(),
                    IdxWidth::None => unreachable!(),
                })
                .collect()
        };
        let key_indices = read_idx(&mut r)?;
        let value_indices = read_idx(&mut r)?;
        r.finish()?;
        Ok(Self {
            user_id,
            user_keys,
            user_values,
            key_indices,
            value_indices,
            widths: StorageWidths { elem, idx },
        })
    }
}

/// Full-dimension K/V of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineEntry {
    pub user_id: String,
    pub keys: Matrix,
    pub values: Matrix,
    pub elem: ElemWidth,
}

impl BaselineEntry {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_size(&self) -> usize {
        baseline_entry_bytes(self.len(), self.keys.cols(), self.elem)
    }
}

/// Entry bytes over full-KV bytes for the same user and length.
pub fn compression_rate(entry: &CacheEntry, baseline: &BaselineEntry) -> Result<f64> {
    if entry.len() != baseline.len() {
        return Err(Error::shape(
            "compression_rate",
            format!(
                "entry has {} items, baseline has {}",
                entry.len(),
                baseline.len()
            ),
        ));
    }
    let base = baseline.byte_size();
    if base == 0 {
        return Err(Error::UndefinedMetric(
            "compression rate against a zero-byte baseline".into(),
        ));
    }
    Ok(entry.byte_size() as f64 / base as f64)
}

/// Compression rate from dimensions alone (independent of `n`).
pub fn compression_rate_for(user_dim: usize, attn_dim: usize, widths: StorageWidths) -> f64 {
    collective_entry_bytes(1, user_dim, widths) as f64
        / baseline_entry_bytes(1, attn_dim, widths.elem) as f64
}

/// Widths a model's entries are stored with: full-KV models store no indices.
pub fn widths_for(model: &CtrModel, widths: StorageWidths) -> StorageWidths {
    if model.config.collective.is_baseline() {
        StorageWidths {
            idx: IdxWidth::None,
            ..widths
        }
    } else {
        widths
    }
}

/// Transfer-cost model: `T_setup + bytes / B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TierModel {
    pub setup_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
}

impl TierModel {
    pub fn new(setup_ms: f64, bandwidth_bytes_per_ms: f64) -> Result<Self> {
        if !(setup_ms >= 0.0) || !(bandwidth_bytes_per_ms > 0.0) {
            return Err(Error::usage(format!(
                "tier needs setup >= 0 and bandwidth > 0, got {setup_ms} and {bandwidth_bytes_per_ms}"
            )));
        }
        Ok(Self {
            setup_ms,
            bandwidth_bytes_per_ms,
        })
    }
}

pub fn simulated_load_latency(bytes: usize, tier: &TierModel) -> f64 {
    tier.setup_ms + bytes as f64 / tier.bandwidth_bytes_per_ms
}

/// Weighted least-squares fit of `y = a + b·x`; returns `(a, b)`.
pub fn fit_affine(xs: &[f64], ys: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() != weights.len() || xs.len() < 2 {
        return Err(Error::usage(
            "affine fit needs at least two weighted points",
        ));
    }
    let sw: f64 = weights.iter().sum();
    let sx: f64 = xs.iter().zip(weights).map(|(x, w)| w * x).sum();
    let sy: f64 = ys.iter().zip(weights).map(|(y, w)| w * y).sum();
    let sxx: f64 = xs.iter().zip(weights).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .zip(weights)
        .map(|((x, y), w)| w * x * y)
        .sum();
    let det = sw * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return Err(Error::Numeric("affine fit is singular".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    Ok((intercept, slope))
}

/// Coefficient of determination of an affine fit.
pub fn r_squared(xs: &[f64], ys: &[f64], intercept: f64, slope: f64) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Batch sizes of the reference latency measurements.
pub const REFERENCE_BATCH_SIZES: [usize; 7] = [1, 8, 32, 64, 128, 256, 512];
/// Reference full-KV load latency (ms) at [`REFERENCE_BATCH_SIZES`].
pub const REFERENCE_BASELINE_MS: [f64; 7] = [0.099, 1.030, 1.808, 3.418, 6.679, 15.216, 32.991];
/// Reference collective decode latency (ms) at [`REFERENCE_BATCH_SIZES`].
pub const REFERENCE_COLLECTIVE_MS: [f64; 7] = [0.084, 0.129, 0.136, 0.152, 0.222, 0.375, 0.695];

/// Fits a tier to the reference full-KV latencies, given the bytes of one
/// full-KV entry.
///
/// Minimizes squared relative error (weights `1/y²`) and clamps the setup
/// latency at zero, refitting the slope through the origin when needed.
pub fn fit_reference_tier(entry_bytes: usize) -> Result<TierModel> {
    let xs: Vec<f64> = REFERENCE_BATCH_SIZES
        .iter()
        .map(|&b| (b * entry_bytes) as f64)
        .collect();
    let ys = REFERENCE_BASELINE_MS;
    let weights: Vec<f64> = ys.iter().map(|y| 1.0 / (y * y)).collect();
    let (mut setup, mut slope) = fit_affine(&xs, &ys, &weights)?;
    if setup < 0.0 {
        setup = 0.0;
        let num: f64 = xs
            .iter()
            .zip(&ys)
            .zip(&weights)
            .map(|((x, y), w)| w * x * y)
            .sum();
        let den: f64 = xs.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
        slope = num / den;
    }
    TierModel::new(setup, 1.0 / slope)
}

/// Cached K/V for one user, computed in inference mode.
///
/// Collective models store user-specific parts and both index arrays;
/// full-KV models store the full K/V with no indices. Models sharing only one
/// side cannot be cached in this format.
pub fn prefill(
    user_id: &str,
    history: &Matrix,
    model: &CtrModel,
    widths: StorageWidths,
) -> Result<CacheEntry> {
    let cc = &model.config.collective;
    let p = &model.params.collective;
    if history.cols() != cc.embed_dim {
        return Err(Error::shape(
            "prefill",
            format!(
                "history has {} columns, embed_dim is {}",
                history.cols(),
                cc.embed_dim
            ),
        ));
    }
    let round = |m: Matrix| m.map(|x| widths.elem.round(x));
    match (&p.keys, &p.values) {
        (SideParams::Full(k), SideParams::Full(v)) => Ok(CacheEntry {
            user_id: user_id.to_string(),
            user_keys: round(k.forward(history)?),
            user_values: round(v.forward(history)?),
            key_indices: Vec::new(),
            value_indices: Vec::new(),
            widths: StorageWidths {
                idx: IdxWidth::None,
                ..widths
            },
        }),
        (SideParams::Shared { projection: pk, .. }, SideParams::Shared { projection: pv, .. }) => {
            if widths.idx == IdxWidth::None || cc.pool_size > widths.idx.capacity() {
                return Err(Error::usage(format!(
                    "pool of {} rows does not fit {}-byte indices",
                    cc.pool_size,
                    widths.idx.bytes()
                )));
            }
            let key_router = p.router_for(Side::Keys).expect("shared side has a router");
            let value_router = p
                .router_for(Side::Values)
                .expect("shared side has a router");
            let to_u32 = |v: Vec<usize>| v.into_iter().map(|i| i as u32).collect();
            Ok(CacheEntry {
                user_id: user_id.to_string(),
                user_keys: round(pk.forward(history)?),
                user_values: round(pv.forward(history)?),
                key_indices: to_u32(route(history, key_router)?.indices),
                value_indices: to_u32(route(history, value_router)?.indices),
                widths,
            })
        }
        _ => Err(Error::usage(
            "cache entries need both sides shared or neither; single-side sharing is not cacheable",
        )),
    }
}

/// Rebuilds full `K` and `V` from an entry by gathering pool rows.
pub fn gather_entry(entry: &CacheEntry, model: &CtrModel) -> Result<(Matrix, Matrix)> {
    let p = &model.params.collective;
    match (p.keys.pool(), p.values.pool()) {
        (None, None) => Ok((entry.user_keys.clone(), entry.user_values.clone())),
        (Some(pool_k), Some(pool_v)) => {
            let keys = assemble_from_pool(&entry.user_keys, pool_k, &entry.key_indices)?;
            let values = assemble_from_pool(&entry.user_values, pool_v, &entry.value_indices)?;
            Ok((keys, values))
        }
        _ => Err(Error::usage("single-side sharing is not cacheable")),
    }
}

fn assemble_from_pool(user: &Matrix, pool: &Matrix, indices: &[u32]) -> Result<Matrix> {
    if indices.len() != user.rows() {
        return Err(Error::format(
            "cache entry",
            format!("{} indices for {} items", indices.len(), user.rows()),
        ));
    }
    let d_u = user.cols();
    let mut out = Matrix::zeros(user.rows(), d_u + pool.cols());
    for (i, &j) in indices.iter().enumerate() {
        let j = j as usize;
        if j >= pool.rows() {
            return Err(Error::format(
                "cache entry",
                format!("index {j} outside a pool of {} rows", pool.rows()),
            ));
        }
        let row = out.row_mut(i);
        row[..d_u].copy_from_slice(user.row(i));
        row[d_u..].copy_from_slice(pool.row(j));
    }
    Ok(out)
}

/// Copies the pool rows of an entry's key and value indices into `out_k` and
/// `out_v` (`n×d_g` each).
pub fn gather_pool_rows_into(
    entry: &CacheEntry,
    pool_k: &Matrix,
    pool_v: &Matrix,
    out_k: &mut Matrix,
    out_v: &mut Matrix,
) {
    for (out, pool, idx) in [
        (out_k, pool_k, &entry.key_indices),
        (out_v, pool_v, &entry.value_indices),
    ] {
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(pool.row(j as usize));
        }
    }
}

/// Gathers only the pool rows (`n×d_g`) for the key and value indices.
pub fn gather_pool_rows(entry: &CacheEntry, pool_k: &Matrix, pool_v: &Matrix) -> (Matrix, Matrix) {
    let mut k = Matrix::zeros(entry.key_indices.len(), pool_k.cols());
    let mut v = Matrix::zeros(entry.value_indices.len(), pool_v.cols());
    gather_pool_rows_into(entry, pool_k, pool_v, &mut k, &mut v);
    (k, v)
}

/// One decode's latency accounting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencySample {
    pub bytes: usize,
    pub simulated_load_ms: f64,
    pub measured_load_ms: f64,
    pub measured_gather_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub score: TargetScore,
    pub latency: LatencySample,
}

/// Directory of per-user entry files plus an `index.tsv` manifest.
pub struct CacheStore {
    dir: PathBuf,
    index: BTreeMap<String, (String, usize, usize)>,
}

fn file_stem(user_id: &str) -> String {
    let safe: String = user_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    // Hash suffix keeps distinct ids distinct after sanitizing.
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(user_id.as_bytes());
    format!("{safe}-{:02x}{:02x}{:02x}{:02x}", h[0], h[1], h[2], h[3])
}

impl CacheStore {
    /// Opens (creating if needed) a store rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut index = BTreeMap::new();
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            for line in text.lines().skip(1) {
                let parts: Vec<&str> = line.split('\t').collect();
                if parts.len() != 4 {
                    return Err(Error::format(
                        "cache manifest",
                        format!("bad line '{line}'"),
                    ));
                }
                let n = parts[2]
                    .parse()
                    .map_err(|_| Error::format("cache manifest", "bad n"))?;
                let bytes = parts[3]
                    .parse()
                    .map_err(|_| Error::format("cache manifest", "bad bytes"))?;
                index.insert(parts[0].to_string(), (parts[1].to_string(), n, bytes));
            }
        }
        Ok(Self { dir, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn path_for(&self, user_id: &str) -> PathBuf {
        self.dir.join(format!("{}.cke", file_stem(user_id)))
    }

    /// Writes the entry through temp-file-and-rename, then the manifest.
    pub fn write(&mut self, entry: &CacheEntry) -> Result<PathBuf> {
        let path = self.path_for(&entry.user_id);
        write_atomic(&path, &entry.encode())?;
        let file = path.file_name().unwrap().to_string_lossy().into_owned();
        self.index.insert(
            entry.user_id.clone(),
            (file, entry.len(), entry.byte_size()),
        );
        self.write_manifest()?;
        Ok(path)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::from("user_id\tfile\tn\tpayload_bytes\n");
        for (id, (file, n, bytes)) in &self.index {
            text.push_str(&format!("{id}\t{file}\t{n}\t{bytes}\n"));
        }
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())
    }

    pub fn read(&self, user_id: &str) -> Result<CacheEntry> {
        if !self.index.contains_key(user_id) {
            return Err(Error::CacheMiss(user_id.to_string()));
        }
        let path = self.path_for(user_id);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::CacheMiss(user_id.to_string()),
            _ => Error::io(&path, e),
        })?;
        CacheEntry::decode_bytes(&bytes)
    }

    /// Computes and stores one user's entry.
    pub fn prefill(
        &mut self,
        user_id: &str,
        history: &Matrix,
        model: &CtrModel,
        widths: StorageWidths,
    ) -> Result<CacheEntry> {
        let entry = prefill(user_id, history, model, widths)?;
        self.write(&entry)?;
        Ok(entry)
    }

    /// Loads a user's entry, gathers pool rows, and scores `target`.
    pub fn decode(
        &self,
        user_id: &str,
        target: &[f64],
        model: &CtrModel,
        tier: &TierModel,
    ) -> Result<DecodeOutput> {
        let t0 = Instant::now();
        let entry = self.read(user_id)?;
        let measured_load_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let (keys, values) = gather_entry(&entry, model)?;
        let measured_gather_ms = t1.elapsed().as_secs_f64() * 1e3;

        let score = model.score_target(target, &keys, &values, Mode::Inference)?;
        let bytes = entry.byte_size();
        Ok(DecodeOutput {
            score,
            latency: LatencySample {
                bytes,
                simulated_load_ms: simulated_load_latency(bytes, tier),
                measured_load_ms,
                measured_gather_ms,
            },
        })
    }
}

/// One benchmark point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub baseline_ms: f64,
    pub collective_load_ms: f64,
    pub collective_gather_ms: f64,
    pub collective_gather_std_ms: f64,
    pub ratio: f64,
}

impl BenchRow {
    pub fn collective_ms(&self) -> f64 {
        self.collective_load_ms + self.collective_gather_ms
    }
}

pub const BENCH_CSV_HEADER: &str =
    "batch_size,baseline_ms,collective_load_ms,collective_gather_ms,ratio,collective_gather_std_ms";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.6}",
            self.batch_size,
            self.baseline_ms,
            self.collective_load_ms,
            self.collective_gather_ms,
            self.ratio,
            self.collective_gather_std_ms
        )
    }
}

/// Latency table over batch sizes.
///
/// A batch of `b` takes the first `b` entries, cycling when fewer are cached.
/// The full-KV column is the simulated load of the batch's full K/V; the
/// collective column is the simulated load of the compact entries plus the
/// measured wall-clock pool gather (mean over `repeats`).
pub fn bench_latency(
    batch_sizes: &[usize],
    baseline_tier: &TierModel,
    collective_tier: &TierModel,
    entries: &[CacheEntry],
    model: &CtrModel,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if entries.is_empty() {
        return Err(Error::usage("bench needs at least one cached entry"));
    }
    let p = &model.params.collective;
    let (pool_k, pool_v) = match (p.keys.pool(), p.values.pool()) {
        (Some(k), Some(v)) => (k, v),
        _ => {
            return Err(Error::usage(
                "bench needs a model that shares both keys and values",
            ))
        }
    };
    let attn_dim = model.attn_dim();
    let repeats = repeats.max(1);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let batch: Vec<&CacheEntry> = entries.iter().cycle().take(b).collect();
        let full_bytes: usize = batch
            .iter()
            .map(|e| baseline_entry_bytes(e.len(), attn_dim, e.widths.elem))
            .sum();
        let compact_bytes: usize = batch.iter().map(|e| e.byte_size()).sum();

        // Output buffers are allocated once, as a server would keep them.
        let mut buffers: Vec<(Matrix, Matrix)> = batch
            .iter()
            .map(|e| {
                (
                    Matrix::zeros(e.key_indices.len(), pool_k.cols()),
                    Matrix::zeros(e.value_indices.len(), pool_v.cols()),
                )
            })
            .collect();
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            for (e, (k, v)) in batch.iter().zip(buffers.iter_mut()) {
                gather_pool_rows_into(e, pool_k, pool_v, k, v);
            }
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&buffers);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };

        let baseline_ms = simulated_load_latency(full_bytes, baseline_tier);
        let collective_load_ms = simulated_load_latency(compact_bytes, collective_tier);
        rows.push(BenchRow {
            batch_size: b,
            baseline_ms,
            collective_load_ms,
            collective_gather_ms: mean,
            collective_gather_std_ms: std,
            ratio: baseline_ms / (collective_load_ms + mean),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_formula_anchors() {
        let w = StorageWidths::default();
        assert_eq!(collective_entry_bytes(0, 4, w), 0);
        assert_eq!(collective_entry_bytes(100, 4, w), 3600);
        let cr = compression_rate_for(4, 256, w);
        assert_eq!(cr, 36.0 / 2048.0);
        assert!((cr - 0.017578).abs() < 1e-6);
    }

    #[test]
    fn latency_formula() {
        let tier = TierModel::new(0.05, 1e6).unwrap();
        assert_eq!(simulated_load_latency(0, &tier), 0.05);
        assert!((simulated_load_latency(100_000, &tier) - 0.15).abs() < 1e-15);
        let zero = TierModel::new(0.0, 250.0).unwrap();
        assert_eq!(
            2.0 * simulated_load_latency(1000, &zero),
            simulated_load_latency(2000, &zero)
        );
        assert!(TierModel::new(-1.0, 1.0).is_err());
        assert!(TierModel::new(0.0, 0.0).is_err());
    }

    #[test]
    fn affine_fit_recovers_tier() {
        let tier = TierModel::new(0.037, 12_345.0).unwrap();
        let xs: Vec<f64> = [0usize, 10, 1000, 55_555, 1 << 20]
            .iter()
            .map(|&b| b as f64)
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| simulated_load_latency(x as usize, &tier))
            .collect();
        let (a, b) = fit_affine(&xs, &ys, &[1.0; 5]).unwrap();
        assert!((a - tier.setup_ms).abs() < 1e-9);
        assert!((1.0 / b - tier.bandwidth_bytes_per_ms).abs() / tier.bandwidth_bytes_per_ms < 1e-9);
    }

    #[test]
    fn entry_round_trip_and_sizes() {
        let entry = CacheEntry {
            user_id: "user/7".into(),
            user_keys: Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0]]),
            user_values: Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 4.0]]),
            key_indices: vec![3, 900],
            value_indices: vec![0, 65535],
            widths: StorageWidths::default(),
        };
        let bytes = entry.encode();
        assert_eq!(bytes.len(), entry.header_len() + entry.byte_size());
        assert_eq!(CacheEntry::decode_bytes(&bytes).unwrap(), entry);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CacheEntry::decode_bytes(&bad).is_err());
        assert!(CacheEntry::decode_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn compression_rate_checks() {
        let w = StorageWidths {
            elem: ElemWidth::F32,
            idx: IdxWidth::None,
        };
        let full = CacheEntry {
            user_id: "a".into(),
            user_keys: Matrix::zeros(3, 8),
            user_values: Matrix::zeros(3, 8),
            key_indices: vec![],
            value_indices: vec![],
            widths: w,
        };
        let base = BaselineEntry {
            user_id: "a".into(),
            keys: Matrix::zeros(3, 8),
            values: Matrix::zeros(3, 8),
            elem: ElemWidth::F32,
        };
        assert_eq!(compression_rate(&full, &base).unwrap(), 1.0);
        let empty = BaselineEntry {
            keys: Matrix::zeros(0, 8),
            values: Matrix::zeros(0, 8),
            ..base.clone()
        };
        let empty_entry = CacheEntry {
            user_keys: Matrix::zeros(0, 8),
            user_values: Matrix::zeros(0, 8),
            ..full.clone()
        };
        assert!(matches!(
            compression_rate(&empty_entry, &empty),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(compression_rate(&empty_entry, &base).is_err());
    }

    #[test]
    fn reference_fit_is_non_negative() {
        let tier = fit_reference_tier(1000).unwrap();
        assert!(tier.setup_ms >= 0.0 && tier.bandwidth_bytes_per_ms > 0.0);
    }
}
