//! Deterministic synthetic sequential-recommendation data with planted
//! collaborative structure.
//!
//! Item embeddings live (up to a small isotropic noise) in an `r`-dimensional
//! subspace of `R^{d_e}`. Group preference vectors share a common component,
//! so users from different groups still overlap; each user perturbs their
//! group vector by `noise_scale`. Histories are drawn with probability
//! `∝ exp(strength·⟨z_item, u⟩)` and labels are
//! `Bernoulli(σ(⟨u, z_target⟩ / temperature))`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::attention::SequenceBatch;
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numkit::{dot, sigmoid, Matrix, Rng};

const DATA_MAGIC: &[u8; 4] = b"CKD1";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_groups: usize,
    pub embed_dim: usize,
    pub latent_rank: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Spread of each user's preference around their group vector.
    pub noise_scale: f64,
    /// Labels become deterministic in `sign(affinity)` as this goes to 0.
    pub label_temperature: f64,
    pub seed: u64,
    pub targets_per_user: usize,
    /// Relative amplitude of embedding noise outside the latent subspace.
    pub item_noise: f64,
    /// Spread of group vectors around the shared component (which has unit norm).
    pub group_spread: f64,
    /// Sharpness of preference-driven item sampling.
    pub preference_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 2000,
            num_groups: 8,
            embed_dim: 32,
            latent_rank: 10,
            min_len: 40,
            max_len: 120,
            noise_scale: 0.3,
            label_temperature: 0.5,
            seed: 7,
            targets_per_user: 16,
            item_noise: 0.01,
            group_spread: 0.8,
            preference_strength: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_users == 0 {
            problems.push("num_users must be >= 1".to_string());
        }
        if self.num_items == 0 {
            problems.push("num_items must be >= 1".to_string());
        }
        if self.num_groups == 0 {
            problems.push("num_groups must be >= 1".to_string());
        }
        if self.latent_rank == 0 || self.latent_rank > self.embed_dim {
            problems.push(format!(
                "latent_rank must be in 1..={} (embed_dim), got {}",
                self.embed_dim, self.latent_rank
            ));
        }
        if self.min_len > self.max_len {
            problems.push(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            ));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("item_noise", self.item_noise),
            ("group_spread", self.group_spread),
            ("preference_strength", self.preference_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.label_temperature > 0.0 && self.label_temperature.is_finite()) {
            problems.push(format!(
                "label_temperature must be > 0, got {}",
                self.label_temperature
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "invalid synthetic data config: {}",
                problems.join("; ")
            )))
        }
    }

    /// Flat `key = value` lines, in a fixed order.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_users", self.num_users.to_string()),
            ("num_items", self.num_items.to_string()),
            ("num_groups", self.num_groups.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("latent_rank", self.latent_rank.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("label_temperature", self.label_temperature.to_string()),
            ("seed", self.seed.to_string()),
            ("targets_per_user", self.targets_per_user.to_string()),
            ("item_noise", self.item_noise.to_string()),
            ("group_spread", self.group_spread.to_string()),
            ("preference_strength", self.preference_strength.to_string()),
        ]
    }

    /// Applies one `key = value` setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::usage(format!("cannot parse '{v}' for {key}")))
        }
        match key {
            "num_users" => self.num_users = p(key, value)?,
            "num_items" => self.num_items = p(key, value)?,
            "num_groups" => self.num_groups = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "latent_rank" => self.latent_rank = p(key, value)?,
            "min_len" => self.min_len = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "noise_scale" => self.noise_scale = p(key, value)?,
            "label_temperature" => self.label_temperature = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "targets_per_user" => self.targets_per_user = p(key, value)?,
            "item_noise" => self.item_noise = p(key, value)?,
            "group_spread" => self.group_spread = p(key, value)?,
            "preference_strength" => self.preference_strength = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut config = SynthConfig::default();
        for (k, v) in parse_key_values(text)? {
            if !config.set(&k, &v)? {
                return Err(Error::format(
                    "dataset manifest",
                    format!("unknown key '{k}'"),
                ));
            }
        }
        Ok(config)
    }
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::usage(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUser {
    pub id: u32,
    pub group: u32,
    pub history: Vec<u32>,
    pub targets: Vec<u32>,
    pub labels: Vec<u8>,
    /// Planted preference vector in latent space; used by oracle scorers.
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// `num_items×d_e`.
    pub item_embeddings: Matrix,
    /// `num_items×r`.
    pub item_latents: Matrix,
    pub users: Vec<SynthUser>,
}

/// User-disjoint train/eval partition, by user id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

impl Split {
    /// Stable digest of the partition; used to confirm arms share data.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.train {
            h.update(id.to_le_bytes());
        }
        h.update(b"|");
        for id in &self.eval {
            h.update(id.to_le_bytes());
        }
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut basis = Matrix::zeros(rows, cols);
    let mut r = 0;
    while r < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        for prev in 0..r {
            let proj = dot(&v, basis.row(prev));
            for (x, &b) in v.iter_mut().zip(basis.row(prev)) {
                *x -= proj * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (dst, x) in basis.row_mut(r).iter_mut().zip(v) {
            *dst = x / norm;
        }
        r += 1;
    }
    basis
}

fn gaussian_vec(len: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| std * rng.normal()).collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let r = config.latent_rank;
    let d_e = config.embed_dim;
    let root = Rng::new(config.seed);
    let mut rng_struct = root.fork(1);
    let mut rng_items = root.fork(2);
    let mut rng_users = root.fork(3);

    let basis = orthonormal_rows(r, d_e, &mut rng_struct);
    let inv_sqrt_r = 1.0 / (r as f64).sqrt();
    let common: Vec<f64> = {
        let v = gaussian_vec(r, 1.0, &mut rng_struct);
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let groups: Vec<Vec<f64>> = (0..config.num_groups)
        .map(|_| {
            common
                .iter()
                .map(|c| c + config.group_spread * inv_sqrt_r * rng_struct.normal())
                .collect()
        })
        .collect();

    let item_latents = rng_items.normal_matrix(config.num_items, r, 1.0);
    let mut item_embeddings = item_latents.matmul(&basis)?;
    let noise_std = config.item_noise * (r as f64 / d_e as f64).sqrt();
    for x in item_embeddings.as_mut_slice() {
        *x += noise_std * rng_items.normal();
    }

    let mut users = Vec::with_capacity(config.num_users);
    let mut cumulative = vec![0.0; config.num_items];
    for id in 0..config.num_users {
        let group = rng_users.below(config.num_groups);
        let latent: Vec<f64> = groups[group]
            .iter()
            .map(|g| g + config.noise_scale * inv_sqrt_r * rng_users.normal())
            .collect();

        let logits: Vec<f64> = (0..config.num_items)
            .map(|j| config.preference_strength * dot(item_latents.row(j), &latent))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        for (c, l) in cumulative.iter_mut().zip(&logits) {
            acc += (l - max).exp();
            *c = acc;
        }
        let len = rng_users.range_inclusive(config.min_len, config.max_len);
        let history = (0..len)
            .map(|_| rng_users.sample_cumulative(&cumulative) as u32)
            .collect();

        let mut targets = Vec::with_capacity(config.targets_per_user);
        let mut labels = Vec::with_capacity(config.targets_per_user);
        for _ in 0..config.targets_per_user {
            let t = rng_users.below(config.num_items);
            let affinity = dot(&latent, item_latents.row(t));
            let p = sigmoid(affinity / config.label_temperature);
            targets.push(t as u32);
            labels.push(u8::from(rng_users.bernoulli(p)));
        }
        users.push(SynthUser {
            id: id as u32,
            group: group as u32,
            history,
            targets,
            labels,
            latent,
        });
    }

    Ok(SynthDataset {
        config: config.clone(),
        item_embeddings,
        item_latents,
        users,
    })
}

/// Seed-deterministic user-disjoint split. `train_fraction` of users (rounded)
/// go to train.
pub fn split(dataset: &SynthDataset, train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::usage(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.users.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::usage(format!(
            "train fraction {train_fraction} leaves one side empty for {n} users"
        )));
    }
    let mut ids: Vec<u32> = dataset.users.iter().map(|u| u.id).collect();
    Rng::new(dataset.config.seed).fork(4).shuffle(&mut ids);
    let mut train = ids[..n_train].to_vec();
    let mut eval = ids[n_train..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train, eval })
}

impl SynthDataset {
    pub fn user(&self, id: u32) -> Option<&SynthUser> {
        self.users.get(id as usize).filter(|u| u.id == id)
    }

    pub fn history_matrix(&self, user: &SynthUser) -> Matrix {
        let idx: Vec<usize> = user.history.iter().map(|&i| i as usize).collect();
        self.item_embeddings.select_rows(&idx)
    }

    pub fn sequence_batch(&self, user: &SynthUser) -> SequenceBatch {
        let targets: Vec<usize> = user.targets.iter().map(|&i| i as usize).collect();
        SequenceBatch {
            user_id: user.id,
            history: self.history_matrix(user),
            targets: self.item_embeddings.select_rows(&targets),
            labels: user.labels.iter().map(|&y| f64::from(y)).collect(),
        }
    }

    pub fn batches(&self, ids: &[u32]) -> Result<Vec<SequenceBatch>> {
        ids.iter()
            .map(|&id| {
                self.user(id)
                    .map(|u| self.sequence_batch(u))
                    .ok_or_else(|| Error::usage(format!("unknown user id {id}")))
            })
            .collect()
    }

    /// Mean item embedding of each user's history.
    pub fn mean_embeddings(&self) -> Vec<Vec<f64>> {
        self.users
            .iter()
            .map(|u| self.history_matrix(u).col_means().into_vec())
            .collect()
    }

    /// Users grouped by planted group id.
    pub fn groups(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for u in &self.users {
            out.entry(u.group).or_default().push(u.id);
        }
        out
    }

    /// Writes `manifest.txt` and `data.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(
            &dir.join("manifest.txt"),
            self.config.to_manifest().as_bytes(),
        )?;
        let mut w = ByteWriter::new();
        w.bytes(DATA_MAGIC)
            .matrix(&self.item_embeddings)
            .matrix(&self.item_latents)
            .u32(self.users.len() as u32);
        for u in &self.users {
            w.u32(u.id)
                .u32(u.group)
                .u32_block(&u.history)
                .u32_block(&u.targets);
            w.u64(u.labels.len() as u64).bytes(&u.labels);
            w.matrix(&Matrix::row_vector(&u.latent));
        }
        write_atomic(&dir.join("data.bin"), &w.finish())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let config = SynthConfig::from_manifest(&text)?;
        let data_path = dir.join("data.bin");
        let bytes = std::fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut r = ByteReader::new(&bytes, "dataset blocks");
        r.expect_magic(DATA_MAGIC)?;
        let item_embeddings = r.matrix()?;
        let item_latents = r.matrix()?;
        let count = r.u32()? as usize;
        let mut users = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.u32()?;
            let group = r.u32()?;
            let history = r.u32_block()?;
            let targets = r.u32_block()?;
            let n = r.u64()? as usize;
            let labels = r.take(n)?.to_vec();
            let latent = r.matrix()?.into_vec();
            users.push(SynthUser {
                id,
                group,
                history,
                targets,
                labels,
                latent,
            });
        }
        r.finish()?;
        Ok(Self {
            config,
            item_embeddings,
            item_latents,
            users,
        })
    }
}
