//! Evaluation reports and CSV output.

use crate::attention::{auc, bce_loss, gauc, CtrModel, PredictionBatch, SequenceBatch};
use crate::cachesim::StorageWidths;
use crate::collective::CollectiveConfig;
use crate::error::{Error, Result};

/// One evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub run_id: String,
    pub mode: String,
    pub d_u: usize,
    pub d_g: usize,
    pub m: usize,
    /// NaN when undefined on the evaluated users.
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    pub compression_rate: f64,
}

pub const METRICS_CSV_HEADER: &str = "run_id,mode,d_u,d_g,m,auc,gauc,logloss,compression_rate";

impl MetricsReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.run_id,
            self.mode,
            self.d_u,
            self.d_g,
            self.m,
            self.auc,
            self.gauc,
            self.logloss,
            self.compression_rate
        )
    }
}

/// Short label of the sharing layout.
pub fn mode_label(config: &CollectiveConfig) -> &'static str {
    match (config.share_keys, config.share_values) {
        (true, true) => "collective_kv",
        (true, false) => "collective_k",
        (false, true) => "collective_v",
        (false, false) => "baseline",
    }
}

/// Per-item cached bytes over full-KV bytes. A shared side costs
/// `d_u·elem + idx`, an unshared side `d_a·elem`.
pub fn model_compression_rate(config: &CollectiveConfig, widths: StorageWidths) -> f64 {
    let d_a = config.attn_dim();
    let e = widths.elem.bytes();
    let side = |shared: bool| {
        if shared {
            config.user_dim * e + widths.idx.bytes()
        } else {
            d_a * e
        }
    };
    (side(config.share_keys) + side(config.share_values)) as f64 / (2 * d_a * e) as f64
}

fn defined(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        other => other,
    }
}

pub fn report_from_predictions(
    pred: &PredictionBatch,
    config: &CollectiveConfig,
    run_id: &str,
    widths: StorageWidths,
) -> Result<MetricsReport> {
    let baseline = config.is_baseline();
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        mode: mode_label(config).to_string(),
        d_u: if baseline {
            config.attn_dim()
        } else {
            config.user_dim
        },
        d_g: if baseline { 0 } else { config.global_dim },
        m: if baseline { 0 } else { config.pool_size },
        auc: defined(auc(pred))?,
        gauc: defined(gauc(pred))?,
        logloss: defined(bce_loss(pred))?,
        compression_rate: model_compression_rate(config, widths),
    })
}

/// Inference-mode metrics over `batches`.
pub fn evaluate(
    model: &CtrModel,
    batches: &[SequenceBatch],
    run_id: &str,
    widths: StorageWidths,
) -> Result<MetricsReport> {
    let pred = model.predict(batches)?;
    report_from_predictions(&pred, &model.config.collective, run_id, widths)
}

/// CSV text: a `# config_hash=` comment line, the header, then rows.
pub fn csv_document<I, S>(config_hash: &str, header: &str, rows: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = format!("# config_hash={config_hash}\n{header}\n");
    for r in rows {
        out.push_str(r.as_ref());
        out.push('\n');
    }
    out
}

/// Reads the data rows of a [`csv_document`], skipping comments and header.
pub fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_rate_matches_entry_formula() {
        let cc = CollectiveConfig::new(32, 4, 252, 64);
        let w = StorageWidths::default();
        assert_eq!(model_compression_rate(&cc, w), 36.0 / 2048.0);
        let base = CollectiveConfig::baseline(32, 256);
        assert_eq!(model_compression_rate(&base, w), 1.0);
        let mut k_only = cc.clone();
        k_only.share_values = false;
        assert_eq!(model_compression_rate(&k_only, w), (18.0 + 1024.0) / 2048.0);
    }

    #[test]
    fn csv_round_trip() {
        let doc = csv_document("abc", "a,b", ["1,2", "3,4"]);
        assert!(doc.starts_with("# config_hash=abc\na,b\n"));
        assert_eq!(csv_rows(&doc), vec![vec!["1", "2"], vec!["3", "4"]]);
    }
}
