use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collectivekv::analysis::{
    activation_histogram, cross_user_similarity, entry_overlap_ratio, longtail_slice, sample_pairs,
    split_similarity_study, KvTarget, SimilarityStudy, SimilaritySummary,
};
use collectivekv::attention::CtrModel;
use collectivekv::cachesim::{
    baseline_entry_bytes, bench_latency, fit_reference_tier, prefill, widths_for, CacheStore,
    BENCH_CSV_HEADER,
};
use collectivekv::checkpoint;
use collectivekv::codec::write_atomic;
use collectivekv::collective::{Mode, Side};
use collectivekv::config::RunConfig;
use collectivekv::experiment::{
    ablation_arms, from_dataset, prepare_data, run_arm, sweep_arms, PreparedData, SweepAxis,
};
use collectivekv::numkit::{derive_seed, Matrix, Rng};
use collectivekv::report::{csv_document, evaluate, METRICS_CSV_HEADER};
use collectivekv::synthdata::SynthDataset;
use collectivekv::trainer::EPOCH_CSV_HEADER;
use collectivekv::{Error, Result};

const OUT_ROOT_ENV: &str = "CKV_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "ckv",
    version,
    about = "CollectiveKV experiments on synthetic recommendation data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the eval split.
    Train(ConfigArgs),
    /// Train every ablation arm on one shared dataset.
    Ablate(ConfigArgs),
    /// Train one arm per value of a swept axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// d_u or pool_size
        #[arg(long)]
        axis: String,
        /// Comma-separated values (defaults depend on the axis)
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Shareability studies and router diagnostics.
    Analyze(AnalyzeArgs),
    /// Latency table over batch sizes from a prefilled cache.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,8,32,64,128,256,512")]
        batch_sizes: Vec<usize>,
        /// Timed repetitions per batch size (at least 20)
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Write cache entries for users of the dataset.
    Prefill {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cache directory (default <out>/<run_id>/cache)
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Saved dataset directory (default: regenerate from config)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// all or eval
        #[arg(long, default_value = "all")]
        users: String,
    },
    /// Score one target item for a cached user.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        user: u32,
        /// Target item id
        #[arg(long)]
        target: u32,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra KEY=VALUE settings, applied before the typed flags
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// baseline or collective
    #[arg(long)]
    mode: Option<String>,
    /// none, k, v or kv
    #[arg(long)]
    share: Option<String>,
    /// target or self
    #[arg(long)]
    attention: Option<String>,
    #[arg(long = "d-u")]
    d_u: Option<usize>,
    #[arg(long = "d-g")]
    d_g: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    peak_weight: Option<f64>,
    #[arg(long)]
    balance_weight: Option<f64>,
    #[arg(long)]
    tie_routers: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_users: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_users: Option<usize>,
    #[arg(long)]
    num_groups: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    elem_width: Option<u8>,
    #[arg(long)]
    idx_width: Option<u8>,
    /// Output root (overrides the config file and the environment)
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
}

impl ConfigArgs {
    /// defaults < config file < environment output root < flags
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text)?;
        }
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            if !root.is_empty() {
                c.out = root;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            c.set(k, v)?;
        }
        let flags: Vec<(&str, Option<String>)> = vec![
            ("mode", self.mode.clone()),
            ("sharing", self.share.clone()),
            ("attention", self.attention.clone()),
            ("d_u", self.d_u.map(|v| v.to_string())),
            ("d_g", self.d_g.map(|v| v.to_string())),
            ("pool_size", self.pool_size.map(|v| v.to_string())),
            ("peak_weight", self.peak_weight.map(|v| v.to_string())),
            ("balance_weight", self.balance_weight.map(|v| v.to_string())),
            ("tie_routers", self.tie_routers.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_users", self.batch_users.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("train_fraction", self.train_fraction.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("num_users", self.num_users.map(|v| v.to_string())),
            ("num_groups", self.num_groups.map(|v| v.to_string())),
            ("noise_scale", self.noise_scale.map(|v| v.to_string())),
            ("elem_width", self.elem_width.map(|v| v.to_string())),
            ("idx_width", self.idx_width.map(|v| v.to_string())),
            ("out", self.out.clone()),
            ("run_id", self.run_id.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// similarity, svd-split, router-viz, overlap or longtail
    #[arg(long)]
    study: String,
    /// Trained model; without it the raw item embeddings stand in for K and V
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of leading right-singular directions kept as principal
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    bin_size: usize,
    /// Users analyzed by the similarity studies
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    anchors: usize,
    /// key or value
    #[arg(long, default_value = "key")]
    target: String,
    /// Pairs of each kind for the overlap study
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 0.8)]
    min_cosine: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    rates: Vec<f64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Shape { .. } | Error::Usage(_) | Error::UndefinedMetric(_) | Error::CacheMiss(_) => {
            2
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `<out>/<run_id>/` with the effective config echoed into it.
fn run_dir(config: &mut RunConfig, command: &str) -> Result<PathBuf> {
    config.run_id = config.resolved_run_id(command);
    let dir = Path::new(&config.out).join(&config.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;
    log::info!("run {} -> {}", config.run_id, dir.display());
    Ok(dir)
}

fn write_csv<I, S>(dir: &Path, name: &str, config: &RunConfig, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let path = dir.join(name);
    write_atomic(&path, csv_document(&config.hash(), header, rows).as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_data(config: &RunConfig, dataset: Option<&Path>) -> Result<PreparedData> {
    match dataset {
        Some(dir) => from_dataset(SynthDataset::load(dir)?, config.train_fraction),
        None => prepare_data(config),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args.resolve()?),
        Command::Ablate(args) => cmd_ablate(args.resolve()?),
        Command::Sweep {
            config,
            axis,
            values,
        } => cmd_sweep(config.resolve()?, &axis, values),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Bench {
            config,
            checkpoint,
            cache,
            batch_sizes,
            repeats,
        } => cmd_bench(
            config.resolve()?,
            &checkpoint,
            &cache,
            &batch_sizes,
            repeats,
        ),
        Command::Prefill {
            config,
            checkpoint,
            cache,
            dataset,
            users,
        } => cmd_prefill(
            config.resolve()?,
            &checkpoint,
            cache,
            dataset.as_deref(),
            &users,
        ),
        Command::Decode {
            config,
            checkpoint,
            cache,
            dataset,
            user,
            target,
        } => cmd_decode(
            config.resolve()?,
            &checkpoint,
            &cache,
            dataset.as_deref(),
            user,
            target,
        ),
    }
}

fn epoch_logger(label: String) -> impl FnMut(&collectivekv::trainer::EpochLog) {
    move |log| {
        log::info!(
            "{label} epoch {} bce {:.5} peak {:.5} balance {:.5} total {:.5}",
            log.epoch,
            log.bce,
            log.peak,
            log.balance,
            log.total
        )
    }
}

fn cmd_train(mut config: RunConfig) -> Result<()> {
    let dir = run_dir(&mut config, "train")?;
    let data = prepare_data(&config)?;
    data.dataset.save(&dir.join("dataset"))?;
    let arm = run_arm(
        &config,
        &data,
        0,
        &config.run_id,
        epoch_logger("train".into()),
    )?;
    checkpoint::save(&arm.model, &dir.join("checkpoint.ckv"))?;
    write_csv(
        &dir,
        "epochs.csv",
        &config,
        EPOCH_CSV_HEADER,
        arm.logs.iter().map(|l| l.csv_line()),
    )?;
    write_csv(
        &dir,
        "metrics.csv",
        &config,
        METRICS_CSV_HEADER,
        [arm.report.csv_line()],
    )?;
    println!("{}", METRICS_CSV_HEADER);
    println!("{}", arm.report.csv_line());
    Ok(())
}

fn cmd_ablate(mut config: RunConfig) -> Result<()> {
    let dir = run_dir(&mut config, "ablate")?;
    let data = prepare_data(&config)?;
    let checksum = data.split.checksum();
    let mut rows = Vec::new();
    for (arm_id, (name, arm_config)) in ablation_arms(&config).into_iter().enumerate() {
        let run_id = format!("{}/{name}", config.run_id);
        let arm = run_arm(
            &arm_config,
            &data,
            arm_id as u64,
            &run_id,
            epoch_logger(name.clone()),
        )?;
        rows.push(format!(
            "{name},{checksum},{:.6},{:.6},{}",
            arm.logs.last().map_or(0.0, |l| l.peak),
            arm.logs.last().map_or(0.0, |l| l.balance),
            arm.report.csv_line()
        ));
    }
    let header = format!("arm,split_checksum,final_peak,final_balance,{METRICS_CSV_HEADER}");
    write_csv(&dir, "ablation.csv", &config, &header, &rows)?;
    println!("{header}");
    rows.iter().for_each(|r| println!("{r}"));
    Ok(())
}

fn cmd_sweep(mut config: RunConfig, axis: &str, values: Vec<usize>) -> Result<()> {
    let axis = SweepAxis::parse(axis)?;
    let values = if values.is_empty() {
        axis.default_values()
    } else {
        values
    };
    let arms = sweep_arms(&config, axis, &values)?;
    let dir = run_dir(&mut config, &format!("sweep-{}", axis.as_str()))?;
    let data = prepare_data(&config)?;
    let mut rows = Vec::new();
    for (arm_id, (value, arm_config)) in arms.into_iter().enumerate() {
        let run_id = format!("{}/{}={value}", config.run_id, axis.as_str());
        let arm = run_arm(
            &arm_config,
            &data,
            arm_id as u64,
            &run_id,
            epoch_logger(format!("{}={value}", axis.as_str())),
        )?;
        rows.push(format!(
            "{},{value},{}",
            axis.as_str(),
            arm.report.csv_line()
        ));
    }
    let header = format!("axis,value,{METRICS_CSV_HEADER}");
    write_csv(
        &dir,
        &format!("sweep_{}.csv", axis.as_str()),
        &config,
        &header,
        &rows,
    )?;
    println!("{header}");
    rows.iter().for_each(|r| println!("{r}"));
    Ok(())
}

fn kv_matrices(
    data: &PreparedData,
    model: Option<&CtrModel>,
    users: usize,
    target: KvTarget,
) -> Result<Vec<Matrix>> {
    data.dataset
        .users
        .iter()
        .take(users)
        .map(|u| {
            let s = data.dataset.history_matrix(u);
            match model {
                None => Ok(s),
                Some(m) => {
                    let kv = m.history_kv(&s, Mode::Inference)?;
                    Ok(match target {
                        KvTarget::Key => kv.keys,
                        KvTarget::Value => kv.values,
                    })
                }
            }
        })
        .collect()
}

fn draw_anchors(seed: u64, users: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..users).collect();
    Rng::new(derive_seed(seed, 0xA)).shuffle(&mut order);
    order.truncate(count.max(1).min(users));
    order
}

fn write_study(dir: &Path, config: &RunConfig, name: &str, study: &SimilarityStudy) -> Result<()> {
    let samples = study.samples_csv();
    let kde = study.kde.csv();
    let mut lines = samples.lines();
    let header = lines.next().unwrap_or_default().to_string();
    write_csv(dir, &format!("{name}_samples.csv"), config, &header, lines)?;
    let mut lines = kde.lines();
    let header = lines.next().unwrap_or_default().to_string();
    write_csv(dir, &format!("{name}_kde.csv"), config, &header, lines)?;
    Ok(())
}

fn require_model(checkpoint: Option<&Path>, study: &str) -> Result<CtrModel> {
    match checkpoint {
        Some(p) => checkpoint::load(p),
        None => Err(Error::usage(format!("study '{study}' needs --checkpoint"))),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let mut config = args.config.resolve()?;
    let target = match args.target.as_str() {
        "key" => KvTarget::Key,
        "value" => KvTarget::Value,
        other => {
            return Err(Error::usage(format!(
                "unknown target '{other}' (key, value)"
            )))
        }
    };
    let study = args.study.as_str();
    if ![
        "similarity",
        "svd-split",
        "router-viz",
        "overlap",
        "longtail",
    ]
    .contains(&study)
    {
        return Err(Error::usage(format!(
            "unknown study '{study}' (similarity, svd-split, router-viz, overlap, longtail)"
        )));
    }
    let model = match (study, args.checkpoint.as_deref()) {
        ("similarity" | "svd-split", p) => p.map(checkpoint::load).transpose()?,
        (s, p) => Some(require_model(p, s)?),
    };
    let data = load_data(&config, args.dataset.as_deref())?;
    let dir = run_dir(&mut config, &format!("analyze-{study}"))?;
    let users = args.users.min(data.dataset.users.len());
    let anchors = draw_anchors(config.data.seed, users, args.anchors);

    match study {
        "similarity" => {
            let mats = kv_matrices(&data, model.as_ref(), users, target)?;
            let s = cross_user_similarity(&mats, &anchors, target)?;
            write_study(&dir, &config, "similarity", &s)?;
            write_csv(
                &dir,
                "similarity_summary.csv",
                &config,
                SimilaritySummary::CSV_HEADER,
                [s.summary.csv_line()],
            )?;
            println!(
                "{}\n{}",
                SimilaritySummary::CSV_HEADER,
                s.summary.csv_line()
            );
        }
        "svd-split" => {
            let mats = kv_matrices(&data, model.as_ref(), users, target)?;
            let s = split_similarity_study(&mats, args.k, &anchors, target)?;
            write_study(&dir, &config, "svd_principal", &s.principal)?;
            write_study(&dir, &config, "svd_residual", &s.residual)?;
            let header = format!(
                "variant,{},min_retained_fraction",
                SimilaritySummary::CSV_HEADER
            );
            let min_retained = s.retained_fractions.iter().copied().fold(1.0, f64::min);
            let rows = [
                format!(
                    "principal,{},{min_retained:.6}",
                    s.principal.summary.csv_line()
                ),
                format!(
                    "residual,{},{min_retained:.6}",
                    s.residual.summary.csv_line()
                ),
            ];
            write_csv(&dir, "svd_summary.csv", &config, &header, &rows)?;
            println!("{header}");
            rows.iter().for_each(|r| println!("{r}"));
        }
        "router-viz" => {
            let model = model.expect("checked above");
            let entries = prefill_all(&data, &model, &config, false)?;
            let m = model.config.collective.pool_size;
            for (side, name) in [(Side::Keys, "keys"), (Side::Values, "values")] {
                let h = activation_histogram(&entries, args.bin_size, m, &[side])?;
                let text = h.csv();
                let mut lines = text.lines();
                let header = lines.next().unwrap_or_default().to_string();
                write_csv(
                    &dir,
                    &format!("router_viz_{name}.csv"),
                    &config,
                    &header,
                    lines,
                )?;
                println!(
                    "{name}: total {} max bin share {:.4}",
                    h.total(),
                    h.max_share()
                );
            }
        }
        "overlap" => {
            let model = model.expect("checked above");
            let entries = prefill_all(&data, &model, &config, false)?;
            let groups: Vec<u32> = data.dataset.users.iter().map(|u| u.group).collect();
            let means = data.dataset.mean_embeddings();
            let mut rng = Rng::new(derive_seed(config.data.seed, 0xB));
            let (same, cross) =
                sample_pairs(&groups, &means, args.pairs, args.min_cosine, &mut rng);
            let mut rows = Vec::new();
            for (kind, pairs) in [("same_group", &same), ("cross_group", &cross)] {
                for &(a, b) in pairs {
                    let cos =
                        collectivekv::numkit::cosine(&means[a], &means[b]).unwrap_or(f64::NAN);
                    rows.push(format!(
                        "{kind},{a},{b},{cos:.6},{:.6},{:.6}",
                        entry_overlap_ratio(&entries[a], &entries[b], Side::Keys)?,
                        entry_overlap_ratio(&entries[a], &entries[b], Side::Values)?
                    ));
                }
            }
            let header = "pair_kind,user_a,user_b,mean_cosine,overlap_keys,overlap_values";
            write_csv(&dir, "overlap.csv", &config, header, &rows)?;
            println!("{header}");
            rows.iter().for_each(|r| println!("{r}"));
        }
        "longtail" => {
            let model = model.expect("checked above");
            let lengths: Vec<(u32, usize)> = data
                .split
                .eval
                .iter()
                .map(|&id| (id, data.dataset.users[id as usize].history.len()))
                .collect();
            let mut rows = Vec::new();
            for &rate in &args.rates {
                let ids = longtail_slice(&lengths, rate)?;
                let batches = data.dataset.batches(&ids)?;
                let r = evaluate(&model, &batches, &config.run_id, config.widths())?;
                rows.push(format!("{rate},{},{}", ids.len(), r.csv_line()));
            }
            let header = format!("rate,users,{METRICS_CSV_HEADER}");
            write_csv(&dir, "longtail.csv", &config, &header, &rows)?;
            println!("{header}");
            rows.iter().for_each(|r| println!("{r}"));
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn prefill_all(
    data: &PreparedData,
    model: &CtrModel,
    config: &RunConfig,
    eval_only: bool,
) -> Result<Vec<collectivekv::cachesim::CacheEntry>> {
    let widths = widths_for(model, config.widths());
    let ids: Vec<u32> = if eval_only {
        data.split.eval.clone()
    } else {
        data.dataset.users.iter().map(|u| u.id).collect()
    };
    ids.iter()
        .map(|&id| {
            let u = &data.dataset.users[id as usize];
            prefill(
                &id.to_string(),
                &data.dataset.history_matrix(u),
                model,
                widths,
            )
        })
        .collect()
}

fn cmd_prefill(
    mut config: RunConfig,
    checkpoint_path: &Path,
    cache: Option<PathBuf>,
    dataset: Option<&Path>,
    users: &str,
) -> Result<()> {
    let eval_only = match users {
        "all" => false,
        "eval" => true,
        other => {
            return Err(Error::usage(format!(
                "--users must be all or eval, got '{other}'"
            )))
        }
    };
    let model = checkpoint::load(checkpoint_path)?;
    let data = load_data(&config, dataset)?;
    let dir = run_dir(&mut config, "prefill")?;
    let cache = cache.unwrap_or_else(|| dir.join("cache"));
    let mut store = CacheStore::open(&cache)?;
    let entries = prefill_all(&data, &model, &config, eval_only)?;
    let mut bytes = 0;
    for e in &entries {
        store.write(e)?;
        bytes += e.byte_size();
    }
    println!(
        "prefilled {} users into {} ({bytes} payload bytes)",
        entries.len(),
        cache.display()
    );
    Ok(())
}

fn cmd_decode(
    config: RunConfig,
    checkpoint_path: &Path,
    cache: &Path,
    dataset: Option<&Path>,
    user: u32,
    target: u32,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = load_data(&config, dataset)?;
    let item = target as usize;
    if item >= data.dataset.item_embeddings.rows() {
        return Err(Error::usage(format!("target item {target} does not exist")));
    }
    let store = CacheStore::open(cache)?;
    let n = data.dataset.user(user).map_or(0, |u| u.history.len());
    let tier =
        fit_reference_tier(baseline_entry_bytes(n, model.attn_dim(), config.elem_width).max(1))?;
    let out = store.decode(
        &user.to_string(),
        data.dataset.item_embeddings.row(item),
        &model,
        &tier,
    )?;
    println!(
        "user,target,probability,logit,bytes,simulated_load_ms,measured_load_ms,measured_gather_ms\n{user},{target},{:.9},{:.9},{},{:.6},{:.6},{:.6}",
        out.score.probability,
        out.score.logit,
        out.latency.bytes,
        out.latency.simulated_load_ms,
        out.latency.measured_load_ms,
        out.latency.measured_gather_ms
    );
    Ok(())
}

fn cmd_bench(
    mut config: RunConfig,
    checkpoint_path: &Path,
    cache: &Path,
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let store = CacheStore::open(cache)?;
    if store.is_empty() {
        return Err(Error::usage(format!(
            "cache {} is empty; run `ckv prefill` first",
            cache.display()
        )));
    }
    let ids: Vec<String> = store.user_ids().map(str::to_string).collect();
    let entries = ids
        .iter()
        .map(|id| store.read(id))
        .collect::<Result<Vec<_>>>()?;
    let mean_full = entries
        .iter()
        .map(|e| baseline_entry_bytes(e.len(), model.attn_dim(), e.widths.elem))
        .sum::<usize>()
        / entries.len();
    let tier = fit_reference_tier(mean_full.max(1))?;
    log::info!(
        "tier fitted to reference latencies: setup {:.6} ms, bandwidth {:.1} bytes/ms",
        tier.setup_ms,
        tier.bandwidth_bytes_per_ms
    );
    let rows = bench_latency(batch_sizes, &tier, &tier, &entries, &model, repeats.max(20))?;
    let dir = run_dir(&mut config, "bench")?;
    write_csv(
        &dir,
        "bench.csv",
        &config,
        BENCH_CSV_HEADER,
        rows.iter().map(|r| r.csv_line()),
    )?;
    println!("{BENCH_CSV_HEADER}");
    rows.iter().for_each(|r| println!("{}", r.csv_line()));
    Ok(())
}
