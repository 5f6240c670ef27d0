//! Flat `key = value` run configuration shared by every subcommand.

use sha2::{Digest, Sha256};

use crate::attention::{AttentionMode, ModelConfig};
use crate::cachesim::{ElemWidth, IdxWidth, StorageWidths};
use crate::collective::{
    CollectiveConfig, DEFAULT_BALANCE_WEIGHT, DEFAULT_PEAK_WEIGHT, DEFAULT_POOL_SIZE,
};
use crate::error::{Error, Result};
use crate::synthdata::{parse_key_values, SynthConfig};
use crate::trainer::TrainConfig;

/// Which sides go through the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    None,
    Keys,
    Values,
    Both,
}

impl Sharing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Sharing::None),
            "k" | "keys" => Ok(Sharing::Keys),
            "v" | "values" => Ok(Sharing::Values),
            "kv" | "both" | "collective" => Ok(Sharing::Both),
            other => Err(Error::usage(format!(
                "unknown sharing '{other}' (none, k, v, kv)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sharing::None => "none",
            Sharing::Keys => "k",
            Sharing::Values => "v",
            Sharing::Both => "kv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub sharing: Sharing,
    pub attention: AttentionMode,
    pub user_dim: usize,
    pub global_dim: usize,
    pub pool_size: usize,
    pub peak_weight: f64,
    pub balance_weight: f64,
    pub tie_routers: bool,
    pub epochs: usize,
    pub batch_users: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub elem_width: ElemWidth,
    pub idx_width: IdxWidth,
    pub out: String,
    /// Empty means derived from the config hash.
    pub run_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: SynthConfig::default(),
            sharing: Sharing::Both,
            attention: AttentionMode::Target,
            user_dim: 4,
            global_dim: 28,
            pool_size: DEFAULT_POOL_SIZE,
            peak_weight: DEFAULT_PEAK_WEIGHT,
            balance_weight: DEFAULT_BALANCE_WEIGHT,
            tie_routers: false,
            epochs: train.epochs,
            batch_users: train.batch_users,
            learning_rate: train.learning_rate,
            train_fraction: 0.8,
            elem_width: ElemWidth::F32,
            idx_width: IdxWidth::U16,
            out: "runs".into(),
            run_id: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::usage(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!(
            "bad value '{value}' for {key} (true/false)"
        ))),
    }
}

impl RunConfig {
    /// Applies one setting. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        if self.data.set(&key, value)? {
            return Ok(());
        }
        match key.as_str() {
            "sharing" | "share" => self.sharing = Sharing::parse(value.trim())?,
            "mode" => {
                self.sharing = match value.trim() {
                    "baseline" => Sharing::None,
                    "collective" => Sharing::Both,
                    other => Sharing::parse(other)?,
                }
            }
            "attention" => self.attention = AttentionMode::parse(value.trim())?,
            "d_u" | "user_dim" => self.user_dim = parse(&key, value)?,
            "d_g" | "global_dim" => self.global_dim = parse(&key, value)?,
            "pool_size" | "m" => self.pool_size = parse(&key, value)?,
            "peak_weight" => self.peak_weight = parse(&key, value)?,
            "balance_weight" => self.balance_weight = parse(&key, value)?,
            "tie_routers" => self.tie_routers = parse_bool(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_users" => self.batch_users = parse(&key, value)?,
            "learning_rate" => self.learning_rate = parse(&key, value)?,
            "train_fraction" => self.train_fraction = parse(&key, value)?,
            "elem_width" => self.elem_width = ElemWidth::from_bytes(parse(&key, value)?)?,
            "idx_width" => self.idx_width = IdxWidth::from_bytes(parse(&key, value)?)?,
            "out" => self.out = value.trim().to_string(),
            "run_id" => self.run_id = value.trim().to_string(),
            other => return Err(Error::usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Canonical entries; `out` and `run_id` are excluded so they do not
    /// change the hash.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .data
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("sharing", self.sharing.as_str().into());
        push("attention", self.attention.as_str().into());
        push("d_u", self.user_dim.to_string());
        push("d_g", self.global_dim.to_string());
        push("pool_size", self.pool_size.to_string());
        push("peak_weight", format!("{:?}", self.peak_weight));
        push("balance_weight", format!("{:?}", self.balance_weight));
        push("tie_routers", self.tie_routers.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_users", self.batch_users.to_string());
        push("learning_rate", format!("{:?}", self.learning_rate));
        push("train_fraction", format!("{:?}", self.train_fraction));
        push("elem_width", self.elem_width.bytes().to_string());
        push("idx_width", self.idx_width.bytes().to_string());
        out
    }

    /// First 16 hex digits of SHA-256 over the canonical entries.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Effective config as `key = value` text, including output settings.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("out = {}\nrun_id = {}\n", self.out, self.run_id));
        s
    }

    pub fn attn_dim(&self) -> usize {
        self.user_dim + self.global_dim
    }

    pub fn collective(&self) -> CollectiveConfig {
        let mut cc = match self.sharing {
            Sharing::None => CollectiveConfig::baseline(self.data.embed_dim, self.attn_dim()),
            _ => CollectiveConfig::new(
                self.data.embed_dim,
                self.user_dim,
                self.global_dim,
                self.pool_size,
            ),
        };
        cc.share_keys = matches!(self.sharing, Sharing::Keys | Sharing::Both);
        cc.share_values = matches!(self.sharing, Sharing::Values | Sharing::Both);
        cc.tie_routers = self.tie_routers && self.sharing == Sharing::Both;
        cc.peak_weight = self.peak_weight;
        cc.balance_weight = self.balance_weight;
        cc
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::new(self.collective(), self.attention)
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_users: self.batch_users,
            learning_rate: self.learning_rate,
            seed,
        }
    }

    pub fn widths(&self) -> StorageWidths {
        StorageWidths {
            elem: self.elem_width,
            idx: self.idx_width,
        }
    }

    /// Checks every cross-field constraint and reports all violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Usage(m) => m,
                    other => other.to_string(),
                });
            }
        };
        collect(self.data.validate());
        collect(self.collective().validate());
        collect(self.train(0).validate());
        if self.sharing != Sharing::None && self.pool_size > self.idx_width.capacity() {
            collect(Err(Error::usage(format!(
                "pool_size {} does not fit {}-byte indices",
                self.pool_size,
                self.idx_width.bytes()
            ))));
        }
        if self.sharing != Sharing::None && self.idx_width == IdxWidth::None {
            collect(Err(Error::usage(
                "idx_width 0 is only valid without sharing",
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            collect(Err(Error::usage(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ))));
        }
        if self.epochs == 0 {
            collect(Err(Error::usage("epochs must be >= 1")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::usage(problems.join("; ")))
        }
    }

    /// `run_id` if set, else `<command>-<hash prefix>`.
    pub fn resolved_run_id(&self, command: &str) -> String {
        if self.run_id.is_empty() {
            format!("{command}-{}", &self.hash()[..8])
        } else {
            self.run_id.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.set("pool-size", "16").unwrap();
        c.set("mode", "baseline").unwrap();
        c.set("num_groups", "3").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        c.out = "elsewhere".into();
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn validation_lists_everything() {
        let mut c = RunConfig::default();
        c.pool_size = 70_000;
        c.train_fraction = 1.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(
            msg.contains("pool_size") && msg.contains("train_fraction"),
            "{msg}"
        );
        assert!(RunConfig::default().set("nope", "1").is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
