//! Training arms shared by the train, ablate and sweep workflows.

use crate::attention::{CtrModel, SequenceBatch};
use crate::config::{RunConfig, Sharing};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Rng};
use crate::report::{evaluate, MetricsReport};
use crate::synthdata::{generate, split, Split, SynthDataset};
use crate::trainer::{train, EpochLog};

/// One generated dataset with its user split, reused by every arm.
pub struct PreparedData {
    pub dataset: SynthDataset,
    pub split: Split,
    pub train: Vec<SequenceBatch>,
    pub eval: Vec<SequenceBatch>,
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let dataset = generate(&config.data)?;
    from_dataset(dataset, config.train_fraction)
}

pub fn from_dataset(dataset: SynthDataset, train_fraction: f64) -> Result<PreparedData> {
    let split = split(&dataset, train_fraction)?;
    let train = dataset.batches(&split.train)?;
    let eval = dataset.batches(&split.eval)?;
    Ok(PreparedData {
        dataset,
        split,
        train,
        eval,
    })
}

pub struct ArmResult {
    pub model: CtrModel,
    pub logs: Vec<EpochLog>,
    pub report: MetricsReport,
}

/// Seed for an arm's initialization and shuffling.
pub fn arm_seed(config: &RunConfig, arm_id: u64) -> u64 {
    derive_seed(config.data.seed, arm_id)
}

/// Initializes, trains and evaluates one configuration.
pub fn run_arm(
    config: &RunConfig,
    data: &PreparedData,
    arm_id: u64,
    run_id: &str,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<ArmResult> {
    config.validate()?;
    let seed = arm_seed(config, arm_id);
    let mut model = CtrModel::init(config.model(), &mut Rng::new(seed))?;
    let logs = train(&mut model, &data.train, &config.train(seed), on_epoch)?;
    let report = evaluate(&model, &data.eval, run_id, config.widths())?;
    Ok(ArmResult {
        model,
        logs,
        report,
    })
}

/// The default ablation arms: loss-term arms on full sharing, then
/// sharing-layout arms with both losses.
pub fn ablation_arms(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |sharing: Sharing, peak: f64, balance: f64| RunConfig {
        sharing,
        peak_weight: peak,
        balance_weight: balance,
        ..base.clone()
    };
    let (p, b) = (base.peak_weight, base.balance_weight);
    vec![
        ("baseline".into(), with(Sharing::None, 0.0, 0.0)),
        ("kv_no_aux".into(), with(Sharing::Both, 0.0, 0.0)),
        ("kv_peak_only".into(), with(Sharing::Both, p, 0.0)),
        ("kv_balance_only".into(), with(Sharing::Both, 0.0, b)),
        ("kv_all".into(), with(Sharing::Both, p, b)),
        ("share_k".into(), with(Sharing::Keys, p, b)),
        ("share_v".into(), with(Sharing::Values, p, b)),
        ("share_kv".into(), with(Sharing::Both, p, b)),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    UserDim,
    PoolSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d_u" | "d-u" | "user_dim" => Ok(SweepAxis::UserDim),
            "pool_size" | "pool-size" | "m" => Ok(SweepAxis::PoolSize),
            other => Err(Error::usage(format!(
                "unknown sweep axis '{other}' (d_u, pool_size)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::UserDim => "d_u",
            SweepAxis::PoolSize => "pool_size",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::UserDim => vec![2, 4, 8, 16, 32],
            SweepAxis::PoolSize => vec![8, 16, 64, 256],
        }
    }
}

/// One config per axis value. The `d_u` axis holds `d_a = d_u + d_g` fixed.
pub fn sweep_arms(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<Vec<(usize, RunConfig)>> {
    if values.len() < 2 {
        return Err(Error::usage("a sweep needs at least two values"));
    }
    let d_a = base.attn_dim();
    values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match axis {
                SweepAxis::UserDim => {
                    if v == 0 || v > d_a {
                        return Err(Error::usage(format!("d_u must be in [1, {d_a}], got {v}")));
                    }
                    c.user_dim = v;
                    c.global_dim = d_a - v;
                }
                SweepAxis::PoolSize => c.pool_size = v,
            }
            c.validate()?;
            Ok((v, c))
        })
        .collect()
}
