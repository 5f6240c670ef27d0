//! Single-layer, single-head CTR models built on top of the K/V construction.
//!
//! * Target mode: the query is the projected target item and attends over the
//!   user's history K/V.
//! * Self mode: the target item is appended to the history as the newest token
//!   and the prediction reads the last row of causal self-attention, which is
//!   the row a decode step produces against the cached history.
//!
//! Both modes score `σ(w·(o ⊙ q) + b)` where `o` is the attention output and
//! `q` the target query, so the head stays a `d_a → 1` linear map while being
//! able to express user/target affinity.

use super::attend;
use super::metrics::{clamp_probability, PredictionBatch};
use crate::collective::{
    collective_backward, collective_forward, AuxLosses, CollectiveConfig, CollectiveParams, Mode,
};
use crate::error::{Error, Result};
use crate::numkit::{dot, sigmoid, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Target,
    SelfCausal,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Target => "target",
            AttentionMode::SelfCausal => "self",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(AttentionMode::Target),
            "self" => Ok(AttentionMode::SelfCausal),
            other => Err(Error::usage(format!(
                "attention mode must be 'target' or 'self', got '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub attn_dim: usize,
}

impl AttentionConfig {
    pub fn scale(&self) -> f64 {
        1.0 / (self.attn_dim as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub collective: CollectiveConfig,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    pub fn new(collective: CollectiveConfig, mode: AttentionMode) -> Self {
        let attn_dim = collective.attn_dim();
        Self {
            collective,
            attention: AttentionConfig { mode, attn_dim },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.collective.validate()?;
        if self.attention.attn_dim != self.collective.attn_dim() {
            return Err(Error::usage(format!(
                "attention width {} must equal user_dim + global_dim = {}",
                self.attention.attn_dim,
                self.collective.attn_dim()
            )));
        }
        Ok(())
    }
}

/// Query projection and output head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d_e×d_a`
    pub query: Matrix,
    /// `d_a×1`
    pub head_weight: Matrix,
    /// `1×1`
    pub head_bias: Matrix,
}

impl AttentionParams {
    pub fn init(embed_dim: usize, attn_dim: usize, rng: &mut Rng) -> Self {
        let qb = 1.0 / (embed_dim as f64).sqrt();
        let hb = 1.0 / (attn_dim.max(1) as f64).sqrt();
        Self {
            query: rng.uniform_matrix(embed_dim, attn_dim, qb),
            head_weight: rng.uniform_matrix(attn_dim, 1, hb),
            head_bias: Matrix::zeros(1, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            query: Matrix::zeros(self.query.rows(), self.query.cols()),
            head_weight: Matrix::zeros(self.head_weight.rows(), 1),
            head_bias: Matrix::zeros(1, 1),
        }
    }
}

/// Every learnable tensor of a CTR model. Also used as the gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub collective: CollectiveParams,
    pub attention: AttentionParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            collective: self.collective.zeros_like(),
            attention: self.attention.zeros_like(),
        }
    }

    /// Named tensors in a fixed order (checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.collective.tensors();
        out.push(("attention.query".into(), &self.attention.query));
        out.push(("attention.head_weight".into(), &self.attention.head_weight));
        out.push(("attention.head_bias".into(), &self.attention.head_bias));
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.collective.tensors_mut();
        out.push(&mut self.attention.query);
        out.push(&mut self.attention.head_weight);
        out.push(&mut self.attention.head_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// One user's history and the target items scored against it.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub user_id: u32,
    /// `n×d_e` item embeddings, oldest first.
    pub history: Matrix,
    /// `t×d_e` target item embeddings.
    pub targets: Matrix,
    /// One label per target.
    pub labels: Vec<f64>,
}

impl SequenceBatch {
    fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.history.cols() != embed_dim || self.targets.cols() != embed_dim {
            return Err(Error::shape(
                "SequenceBatch",
                format!(
                    "history {}x{}, targets {}x{}, embed_dim {embed_dim}",
                    self.history.rows(),
                    self.history.cols(),
                    self.targets.rows(),
                    self.targets.cols()
                ),
            ));
        }
        if self.targets.rows() != self.labels.len() {
            return Err(Error::shape(
                "SequenceBatch",
                format!(
                    "{} targets, {} labels",
                    self.targets.rows(),
                    self.labels.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Attention output and click probability for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScore {
    pub attention_output: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

/// Loss components of one pass; `total = bce + aux`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    /// Mean unweighted peak loss over users.
    pub peak: f64,
    /// Mean unweighted balance loss over users.
    pub balance: f64,
    /// Mean weighted aux loss over users.
    pub aux: f64,
    pub total: f64,
    pub examples: usize,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtrModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

struct ScoreTrace {
    query: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    weights: Vec<f64>,
    output: Vec<f64>,
    logit: f64,
    probability: f64,
    /// Target-row collective pass in self mode.
    target_row: Option<(Matrix, crate::collective::ForwardTrace)>,
}

impl CtrModel {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let collective = CollectiveParams::init(&config.collective, rng)?;
        let attention = AttentionParams::init(
            config.collective.embed_dim,
            config.collective.attn_dim(),
            rng,
        );
        Ok(Self {
            config,
            params: ModelParams {
                collective,
                attention,
            },
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.collective.embed_dim
    }

    pub fn attn_dim(&self) -> usize {
        self.config.collective.attn_dim()
    }

    /// `t·W_q`.
    pub fn target_query(&self, target: &[f64]) -> Result<Vec<f64>> {
        let t = Matrix::row_vector(target);
        Ok(t.matmul(&self.params.attention.query)?.into_vec())
    }

    /// Builds history K/V with the collective mechanism.
    pub fn history_kv(
        &self,
        history: &Matrix,
        mode: Mode,
    ) -> Result<crate::collective::CollectiveOutput> {
        collective_forward(
            history,
            &self.config.collective,
            &self.params.collective,
            mode,
        )
    }

    fn score_traced(
        &self,
        target: &[f64],
        keys: &Matrix,
        values: &Matrix,
        mode: Mode,
    ) -> Result<ScoreTrace> {
        if target.len() != self.embed_dim() {
            return Err(Error::shape(
                "score_target",
                format!(
                    "target has {} dims, embed_dim is {}",
                    target.len(),
                    self.embed_dim()
                ),
            ));
        }
        let d_a = self.attn_dim();
        if keys.cols() != d_a || values.shape() != keys.shape() {
            return Err(Error::shape(
                "score_target",
                format!(
                    "keys {:?}, values {:?}, attn_dim {d_a}",
                    keys.shape(),
                    values.shape()
                ),
            ));
        }
        let query = self.target_query(target)?;
        let (keys, values, target_row) = match self.config.attention.mode {
            AttentionMode::Target => {
                if keys.rows() == 0 {
                    return Err(Error::shape(
                        "score_target",
                        "target attention over an empty history",
                    ));
                }
                (keys.clone(), values.clone(), None)
            }
            AttentionMode::SelfCausal => {
                let t = Matrix::row_vector(target);
                let out =
                    collective_forward(&t, &self.config.collective, &self.params.collective, mode)?;
                let k = keys.vstack(&out.keys)?;
                let v = values.vstack(&out.values)?;
                (k, v, Some((t, out.trace)))
            }
        };
        let (weights, output) = attend(&query, &keys, &values, keys.rows());
        let head = &self.params.attention;
        let h: Vec<f64> = output.iter().zip(&query).map(|(o, q)| o * q).collect();
        let logit = dot(&h, head.head_weight.as_slice()) + head.head_bias[(0, 0)];
        Ok(ScoreTrace {
            query,
            keys,
            values,
            weights,
            output,
            logit,
            probability: sigmoid(logit),
            target_row,
        })
    }

    /// Scores one target against already-built history K/V. This is the
    /// decode-stage computation; in self mode the target's own K/V row is
    /// computed here and appended.
    pub fn score_target(
        &self,
        target: &[f64],
        keys: &Matrix,
        values: &Matrix,
        mode: Mode,
    ) -> Result<TargetScore> {
        let tr = self.score_traced(target, keys, values, mode)?;
        Ok(TargetScore {
            attention_output: tr.output,
            logit: tr.logit,
            probability: tr.probability,
        })
    }

    /// Predictions for every target of one user, plus that user's aux losses.
    pub fn ctr_forward(
        &self,
        batch: &SequenceBatch,
        mode: Mode,
    ) -> Result<(PredictionBatch, AuxLosses)> {
        batch.validate(self.embed_dim())?;
        let kv = self.history_kv(&batch.history, mode)?;
        let mut pred = PredictionBatch::default();
        for (t, &y) in batch.labels.iter().enumerate() {
            let score = self.score_target(batch.targets.row(t), &kv.keys, &kv.values, mode)?;
            pred.push(score.probability, y, batch.user_id);
        }
        Ok((pred, kv.aux))
    }

    /// Inference-mode predictions over many users.
    pub fn predict(&self, batches: &[SequenceBatch]) -> Result<PredictionBatch> {
        let mut all = PredictionBatch::default();
        for b in batches {
            all.extend(self.ctr_forward(b, Mode::Inference)?.0);
        }
        Ok(all)
    }

    /// Training-mode loss: mean BCE over examples plus mean weighted aux loss
    /// over users.
    pub fn loss(&self, batches: &[SequenceBatch]) -> Result<LossBreakdown> {
        let mut acc = LossAccumulator::default();
        for b in batches {
            let (pred, aux) = self.ctr_forward(b, Mode::Training)?;
            acc.add(&pred, aux);
        }
        acc.finish()
    }

    /// Training-mode loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batches: &[SequenceBatch]) -> Result<(LossBreakdown, ModelParams)> {
        let examples: usize = batches.iter().map(|b| b.labels.len()).sum();
        if examples == 0 {
            return Err(Error::usage(
                "loss_and_grad needs at least one labelled target",
            ));
        }
        let example_scale = 1.0 / examples as f64;
        let user_scale = 1.0 / batches.len() as f64;
        let cc = &self.config.collective;
        let head = &self.params.attention;
        let scale = self.config.attention.scale();
        let d_a = self.attn_dim();

        let mut grads = self.params.zeros_like();
        let mut acc = LossAccumulator::default();

        for batch in batches {
            batch.validate(self.embed_dim())?;
            let kv = self.history_kv(&batch.history, Mode::Training)?;
            let n = batch.history.rows();
            let mut d_keys = Matrix::zeros(n, d_a);
            let mut d_values = Matrix::zeros(n, d_a);
            let mut pred = PredictionBatch::default();

            for (t, &y) in batch.labels.iter().enumerate() {
                let target = batch.targets.row(t);
                let tr = self.score_traced(target, &kv.keys, &kv.values, Mode::Training)?;
                pred.push(tr.probability, y, batch.user_id);

                let p = tr.probability;
                // The clamp has zero derivative where it is active.
                let d_logit = if clamp_probability(p) != p {
                    0.0
                } else {
                    (p - y) * example_scale
                };
                if d_logit == 0.0 {
                    continue;
                }

                let rows = tr.keys.rows();
                let h: Vec<f64> = tr
                    .output
                    .iter()
                    .zip(&tr.query)
                    .map(|(o, q)| o * q)
                    .collect();
                for (g, hv) in grads
                    .attention
                    .head_weight
                    .as_mut_slice()
                    .iter_mut()
                    .zip(&h)
                {
                    *g += d_logit * hv;
                }
                grads.attention.head_bias[(0, 0)] += d_logit;

                let dh: Vec<f64> = head
                    .head_weight
                    .as_slice()
                    .iter()
                    .map(|w| d_logit * w)
                    .collect();
                let d_out: Vec<f64> = dh.iter().zip(&tr.query).map(|(a, q)| a * q).collect();
                let mut d_query: Vec<f64> = dh.iter().zip(&tr.output).map(|(a, o)| a * o).collect();

                let mut d_weights = vec![0.0; rows];
                for i in 0..rows {
                    d_weights[i] = dot(&d_out, tr.values.row(i));
                }
                let inner: f64 = tr.weights.iter().zip(&d_weights).map(|(a, d)| a * d).sum();

                let mut d_keys_t = Matrix::zeros(rows, d_a);
                let mut d_values_t = Matrix::zeros(rows, d_a);
                for i in 0..rows {
                    let a = tr.weights[i];
                    for (dv, &g) in d_values_t.row_mut(i).iter_mut().zip(&d_out) {
                        *dv = a * g;
                    }
                    let d_score = a * (d_weights[i] - inner) * scale;
                    for ((dq, dk), (&k, &q)) in d_query
                        .iter_mut()
                        .zip(d_keys_t.row_mut(i).iter_mut())
                        .zip(tr.keys.row(i).iter().zip(&tr.query))
                    {
                        *dq += d_score * k;
                        *dk = d_score * q;
                    }
                }

                // dW_q += tᵀ·dq
                for (e, &te) in target.iter().enumerate() {
                    for (g, &dq) in grads.attention.query.row_mut(e).iter_mut().zip(&d_query) {
                        *g += te * dq;
                    }
                }

                d_keys.add_assign(&d_keys_t.slice_rows(0, n))?;
                d_values.add_assign(&d_values_t.slice_rows(0, n))?;
                if let Some((t_row, t_trace)) = &tr.target_row {
                    collective_backward(
                        t_row,
                        cc,
                        &self.params.collective,
                        t_trace,
                        &d_keys_t.slice_rows(n, n + 1),
                        &d_values_t.slice_rows(n, n + 1),
                        0.0,
                        &mut grads.collective,
                    )?;
                }
            }

            collective_backward(
                &batch.history,
                cc,
                &self.params.collective,
                &kv.trace,
                &d_keys,
                &d_values,
                user_scale,
                &mut grads.collective,
            )?;
            acc.add(&pred, kv.aux);
        }
        Ok((acc.finish()?, grads))
    }
}

#[derive(Default)]
struct LossAccumulator {
    bce_sum: f64,
    examples: usize,
    users: usize,
    peak: f64,
    balance: f64,
    aux: f64,
}

impl LossAccumulator {
    fn add(&mut self, pred: &PredictionBatch, aux: AuxLosses) {
        for (&p, &y) in pred.probabilities.iter().zip(&pred.labels) {
            let p = clamp_probability(p);
            self.bce_sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        self.examples += pred.len();
        self.users += 1;
        self.peak += aux.peak;
        self.balance += aux.balance;
        self.aux += aux.total;
    }

    fn finish(self) -> Result<LossBreakdown> {
        if self.examples == 0 || self.users == 0 {
            return Err(Error::usage("loss over an empty batch"));
        }
        let u = self.users as f64;
        let bce = self.bce_sum / self.examples as f64;
        let aux = self.aux / u;
        Ok(LossBreakdown {
            bce,
            peak: self.peak / u,
            balance: self.balance / u,
            aux,
            total: bce + aux,
            examples: self.examples,
            users: self.users,
        })
    }
}
