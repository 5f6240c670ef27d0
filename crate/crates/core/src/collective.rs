//! Cross-user K/V sharing through a learnable global pool.
//!
//! Each item embedding is split into two contributions to its key (and value):
//! a low-dimensional user-specific projection that gets cached per user, and a
//! high-dimensional row gathered from a global pool shared by every user. A
//! linear router picks the pool row by argmax over its logits, so the cache
//! only needs the user-specific part plus one index per item.
//!
//! During training the gathered row is scaled by `σ(logit)` of the selected
//! entry, which is the only path from the task loss to the router. The peak
//! loss drives those gates toward 1 so training and inference agree; the
//! balance loss keeps the average routing distribution close to uniform.

use crate::error::{Error, Result};
use crate::numkit::{log_sigmoid, sigmoid, softmax_rows, Matrix, Rng};

/// Default peak-loss weight.
pub const DEFAULT_PEAK_WEIGHT: f64 = 0.01;
/// Default balance-loss weight.
pub const DEFAULT_BALANCE_WEIGHT: f64 = 1.0;
/// Desk-scale default pool size.
pub const DEFAULT_POOL_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveConfig {
    pub embed_dim: usize,
    pub user_dim: usize,
    pub global_dim: usize,
    pub pool_size: usize,
    pub peak_weight: f64,
    pub balance_weight: f64,
    pub share_keys: bool,
    pub share_values: bool,
    /// Value side routes with the key router instead of its own head.
    pub tie_routers: bool,
}

impl CollectiveConfig {
    pub fn new(embed_dim: usize, user_dim: usize, global_dim: usize, pool_size: usize) -> Self {
        Self {
            embed_dim,
            user_dim,
            global_dim,
            pool_size,
            peak_weight: DEFAULT_PEAK_WEIGHT,
            balance_weight: DEFAULT_BALANCE_WEIGHT,
            share_keys: true,
            share_values: true,
            tie_routers: false,
        }
    }

    /// Full-KV control arm: both sides use a plain `d_e×d_a` projection.
    pub fn baseline(embed_dim: usize, attn_dim: usize) -> Self {
        Self {
            share_keys: false,
            share_values: false,
            ..Self::new(embed_dim, attn_dim, 0, 1)
        }
    }

    #[inline]
    pub fn attn_dim(&self) -> usize {
        self.user_dim + self.global_dim
    }

    pub fn is_baseline(&self) -> bool {
        !self.share_keys && !self.share_values
    }

    pub fn shared_sides(&self) -> usize {
        usize::from(self.share_keys) + usize::from(self.share_values)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.embed_dim == 0 {
            problems.push("embed_dim must be >= 1".to_string());
        }
        if self.attn_dim() == 0 {
            problems.push("user_dim + global_dim must be >= 1".to_string());
        }
        if self.pool_size == 0 {
            problems.push("pool_size must be >= 1".to_string());
        }
        if !(self.peak_weight >= 0.0 && self.peak_weight.is_finite()) {
            problems.push(format!(
                "peak_weight must be >= 0, got {}",
                self.peak_weight
            ));
        }
        if !(self.balance_weight >= 0.0 && self.balance_weight.is_finite()) {
            problems.push(format!(
                "balance_weight must be >= 0, got {}",
                self.balance_weight
            ));
        }
        if self.tie_routers && !(self.share_keys && self.share_values) {
            problems.push("tie_routers requires both keys and values to be shared".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::usage(problems.join("; ")))
        }
    }
}

/// Affine map `x·W + b`, `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: rng.uniform_matrix(input, output, bound),
            bias: rng.uniform_matrix(1, output, bound),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }

    /// Accumulates `dW += xᵀ·dy`, `db += Σ_rows dy`, and returns `dy·Wᵀ`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        grad.weight.add_assign(&x.t_matmul(dy)?)?;
        grad.bias.add_assign(&dy.col_sums())?;
        dy.matmul_t(&self.weight)
    }
}

/// Parameters of one attention side (keys or values).
#[derive(Clone, Debug, PartialEq)]
pub enum SideParams {
    /// User-specific projection to `d_u`, router head, and `m×d_g` pool.
    /// `router: None` routes with the key-side head (tied routers).
    Shared {
        projection: Linear,
        router: Option<Linear>,
        pool: Matrix,
    },
    /// Unshared side: one `d_e×d_a` projection.
    Full(Linear),
}

impl SideParams {
    pub fn is_shared(&self) -> bool {
        matches!(self, SideParams::Shared { .. })
    }

    pub fn pool(&self) -> Option<&Matrix> {
        match self {
            SideParams::Shared { pool, .. } => Some(pool),
            SideParams::Full(_) => None,
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            SideParams::Shared {
                projection,
                router,
                pool,
            } => SideParams::Shared {
                projection: Linear::zeros(projection.weight.rows(), projection.weight.cols()),
                router: router
                    .as_ref()
                    .map(|r| Linear::zeros(r.weight.rows(), r.weight.cols())),
                pool: Matrix::zeros(pool.rows(), pool.cols()),
            },
            SideParams::Full(l) => {
                SideParams::Full(Linear::zeros(l.weight.rows(), l.weight.cols()))
            }
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            SideParams::Shared {
                projection,
                router,
                pool,
            } => {
                out.push((format!("{prefix}.user_proj.weight"), &projection.weight));
                out.push((format!("{prefix}.user_proj.bias"), &projection.bias));
                if let Some(r) = router {
                    out.push((format!("{prefix}.router.weight"), &r.weight));
                    out.push((format!("{prefix}.router.bias"), &r.bias));
                }
                out.push((format!("{prefix}.pool"), pool));
            }
            SideParams::Full(l) => {
                out.push((format!("{prefix}.full_proj.weight"), &l.weight));
                out.push((format!("{prefix}.full_proj.bias"), &l.bias));
            }
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        match self {
            SideParams::Shared {
                projection,
                router,
                pool,
            } => {
                out.push(&mut projection.weight);
                out.push(&mut projection.bias);
                if let Some(r) = router {
                    out.push(&mut r.weight);
                    out.push(&mut r.bias);
                }
                out.push(pool);
            }
            SideParams::Full(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
    }
}

/// All learnable parameters of the K/V construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveParams {
    pub keys: SideParams,
    pub values: SideParams,
}

impl CollectiveParams {
    /// Router and projections uniform in `±1/√fan_in`; pool uniform in `±1/√d_g`.
    pub fn init(config: &CollectiveConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let keys = Self::init_side(config, config.share_keys, true, rng);
        let values = Self::init_side(config, config.share_values, !config.tie_routers, rng);
        Ok(Self { keys, values })
    }

    fn init_side(
        config: &CollectiveConfig,
        shared: bool,
        own_router: bool,
        rng: &mut Rng,
    ) -> SideParams {
        let d_e = config.embed_dim;
        if shared {
            let projection = Linear::init(d_e, config.user_dim, rng);
            let router = own_router.then(|| Linear::init(d_e, config.pool_size, rng));
            let bound = 1.0 / (config.global_dim.max(1) as f64).sqrt();
            let pool = rng.uniform_matrix(config.pool_size, config.global_dim, bound);
            SideParams::Shared {
                projection,
                router,
                pool,
            }
        } else {
            SideParams::Full(Linear::init(d_e, config.attn_dim(), rng))
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            keys: self.keys.zeros_like(),
            values: self.values.zeros_like(),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.keys.tensors("keys", &mut out);
        self.values.tensors("values", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.keys.tensors_mut(&mut out);
        self.values.tensors_mut(&mut out);
        out
    }

    fn key_router(&self) -> Option<&Linear> {
        match &self.keys {
            SideParams::Shared { router, .. } => router.as_ref(),
            SideParams::Full(_) => None,
        }
    }

    /// Router used by a side, resolving tied heads to the key router.
    pub fn router_for(&self, side: Side) -> Option<&Linear> {
        match (side, self.side(side)) {
            (_, SideParams::Full(_)) => None,
            (
                _,
                SideParams::Shared {
                    router: Some(r), ..
                },
            ) => Some(r),
            (Side::Values, SideParams::Shared { router: None, .. }) => self.key_router(),
            (Side::Keys, SideParams::Shared { router: None, .. }) => None,
        }
    }

    pub fn side(&self, side: Side) -> &SideParams {
        match side {
            Side::Keys => &self.keys,
            Side::Values => &self.values,
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &CollectiveConfig) -> Result<()> {
        for (side, shared) in [
            (Side::Keys, config.share_keys),
            (Side::Values, config.share_values),
        ] {
            let p = self.side(side);
            match (p, shared) {
                (
                    SideParams::Shared {
                        projection, pool, ..
                    },
                    true,
                ) => {
                    expect_shape(
                        "user projection",
                        &projection.weight,
                        config.embed_dim,
                        config.user_dim,
                    )?;
                    expect_shape("user projection bias", &projection.bias, 1, config.user_dim)?;
                    expect_shape("pool", pool, config.pool_size, config.global_dim)?;
                    let router = self
                        .router_for(side)
                        .ok_or_else(|| Error::usage(format!("{side:?} side has no router")))?;
                    expect_shape("router", &router.weight, config.embed_dim, config.pool_size)?;
                    expect_shape("router bias", &router.bias, 1, config.pool_size)?;
                }
                (SideParams::Full(l), false) => {
                    expect_shape(
                        "full projection",
                        &l.weight,
                        config.embed_dim,
                        config.attn_dim(),
                    )?;
                    expect_shape("full projection bias", &l.bias, 1, config.attn_dim())?;
                }
                _ => {
                    return Err(Error::usage(format!(
                        "{side:?} side parameters disagree with the sharing flags"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn expect_shape(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::shape(
            "collective parameters",
            format!(
                "{what} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Keys,
    Values,
}

/// Router logits and their per-row argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingMap {
    pub logits: Matrix,
    pub indices: Vec<usize>,
}

impl RoutingMap {
    /// Builds the map from logits; ties go to the lowest index.
    pub fn from_logits(logits: Matrix) -> Self {
        let indices = (0..logits.rows())
            .map(|r| argmax_lowest(logits.row(r)))
            .collect();
        Self { logits, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn selected_logit(&self, i: usize) -> f64 {
        self.logits[(i, self.indices[i])]
    }

    pub fn gates(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| sigmoid(self.selected_logit(i)))
            .collect()
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// `K_u = S·W_k + b_k`, `V_u = S·W_v + b_v`.
pub fn project_user_specific(s: &Matrix, key: &Linear, value: &Linear) -> Result<(Matrix, Matrix)> {
    Ok((key.forward(s)?, value.forward(s)?))
}

/// `M = S·W_r + b_r`, indices by row argmax.
pub fn route(s: &Matrix, head: &Linear) -> Result<RoutingMap> {
    Ok(RoutingMap::from_logits(head.forward(s)?))
}

/// Gathers pool rows by routing index. Training mode scales each row by the
/// sigmoid of its selected logit.
pub fn gather_collective(pool: &Matrix, map: &RoutingMap, mode: Mode) -> Result<Matrix> {
    let mut out = Matrix::zeros(map.len(), pool.cols());
    for (i, &j) in map.indices.iter().enumerate() {
        if j >= pool.rows() {
            return Err(Error::shape(
                "gather_collective",
                format!("index {j} out of range for a pool of {} rows", pool.rows()),
            ));
        }
        let gate = match mode {
            Mode::Training => sigmoid(map.selected_logit(i)),
            Mode::Inference => 1.0,
        };
        for (o, &p) in out.row_mut(i).iter_mut().zip(pool.row(j)) {
            *o = gate * p;
        }
    }
    Ok(out)
}

/// `[user | collective]` along columns.
pub fn assemble_kv(user: &Matrix, collective: &Matrix) -> Result<Matrix> {
    user.hcat(collective)
}

/// `−(1/n)·Σ ln σ(M[i, I[i]])`.
pub fn peak_loss(map: &RoutingMap) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::usage("peak_loss needs at least one routed item"));
    }
    let n = map.len() as f64;
    Ok(-(0..map.len())
        .map(|i| log_sigmoid(map.selected_logit(i)))
        .sum::<f64>()
        / n)
}

/// Average routing distribution `p̄_j = (1/n)·Σ_i softmax(M)_{ij}`.
pub fn mean_routing_distribution(map: &RoutingMap) -> Vec<f64> {
    softmax_rows(&map.logits).col_means().into_vec()
}

/// `KL(p̄ ‖ uniform)`.
pub fn balance_loss(map: &RoutingMap) -> Result<f64> {
    if map.is_empty() || map.logits.cols() == 0 {
        return Err(Error::usage("balance_loss needs n >= 1 and m >= 1"));
    }
    let m = map.logits.cols() as f64;
    let loss = mean_routing_distribution(map)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * m).ln())
        .sum::<f64>();
    Ok(loss.max(0.0))
}

/// Auxiliary loss terms of one forward pass, already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxLosses {
    /// Mean peak loss over shared sides (unweighted).
    pub peak: f64,
    /// Mean balance loss over shared sides (unweighted).
    pub balance: f64,
    /// `peak_weight·peak + balance_weight·balance`.
    pub total: f64,
}

#[derive(Clone, Debug)]
enum SideTrace {
    Shared { map: RoutingMap },
    Full,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    mode: Mode,
    keys: SideTrace,
    values: SideTrace,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn routing(&self, side: Side) -> Option<&RoutingMap> {
        let t = match side {
            Side::Keys => &self.keys,
            Side::Values => &self.values,
        };
        match t {
            SideTrace::Shared { map } => Some(map),
            SideTrace::Full => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CollectiveOutput {
    pub keys: Matrix,
    pub values: Matrix,
    pub aux: AuxLosses,
    pub trace: ForwardTrace,
}

fn side_forward(
    s: &Matrix,
    params: &CollectiveParams,
    side: Side,
    mode: Mode,
) -> Result<(Matrix, SideTrace)> {
    match params.side(side) {
        SideParams::Full(proj) => Ok((proj.forward(s)?, SideTrace::Full)),
        SideParams::Shared {
            projection, pool, ..
        } => {
            let router = params
                .router_for(side)
                .ok_or_else(|| Error::usage("shared side without a router"))?;
            let user_part = projection.forward(s)?;
            let map = route(s, router)?;
            let collective = gather_collective(pool, &map, mode)?;
            let kv = assemble_kv(&user_part, &collective)?;
            Ok((kv, SideTrace::Shared { map }))
        }
    }
}

/// Builds `K` and `V` (`n×d_a`) for a sequence of item embeddings.
///
/// Aux losses are averaged over the shared sides; for an empty sequence they
/// are zero.
pub fn collective_forward(
    s: &Matrix,
    config: &CollectiveConfig,
    params: &CollectiveParams,
    mode: Mode,
) -> Result<CollectiveOutput> {
    if s.cols() != config.embed_dim {
        return Err(Error::shape(
            "collective_forward",
            format!(
                "sequence has {} columns, embed_dim is {}",
                s.cols(),
                config.embed_dim
            ),
        ));
    }
    let (keys, key_trace) = side_forward(s, params, Side::Keys, mode)?;
    let (values, value_trace) = side_forward(s, params, Side::Values, mode)?;

    let mut aux = AuxLosses::default();
    if s.rows() > 0 {
        let maps: Vec<&RoutingMap> = [&key_trace, &value_trace]
            .into_iter()
            .filter_map(|t| match t {
                SideTrace::Shared { map } => Some(map),
                SideTrace::Full => None,
            })
            .collect();
        if !maps.is_empty() {
            let k = maps.len() as f64;
            for map in &maps {
                aux.peak += peak_loss(map)? / k;
                aux.balance += balance_loss(map)? / k;
            }
            aux.total = config.peak_weight * aux.peak + config.balance_weight * aux.balance;
        }
    }

    Ok(CollectiveOutput {
        keys,
        values,
        aux,
        trace: ForwardTrace {
            mode,
            keys: key_trace,
            values: value_trace,
        },
    })
}

/// Gradient of a weighted aux-loss total with respect to the logits of one
/// routing map. `peak_scale` and `balance_scale` already include the loss
/// weight, the side-averaging factor and any outer scaling.
fn aux_logit_grad(map: &RoutingMap, peak_scale: f64, balance_scale: f64, d_logits: &mut Matrix) {
    let n = map.len();
    if n == 0 {
        return;
    }
    let inv_n = 1.0 / n as f64;
    if peak_scale != 0.0 {
        for i in 0..n {
            let j = map.indices[i];
            d_logits[(i, j)] += peak_scale * inv_n * (sigmoid(map.selected_logit(i)) - 1.0);
        }
    }
    if balance_scale != 0.0 {
        let m = map.logits.cols() as f64;
        let probs = softmax_rows(&map.logits);
        let mean = probs.col_means();
        // dL/dp_ij = (1/n)(ln(p̄_j·m) + 1); the constant drops out of the
        // softmax Jacobian, so only the log term is kept.
        let dp: Vec<f64> = mean
            .as_slice()
            .iter()
            .map(|&p| balance_scale * inv_n * (p.max(f64::MIN_POSITIVE) * m).ln())
            .collect();
        for i in 0..n {
            let row = probs.row(i);
            let inner: f64 = row.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for (j, (&p, &g)) in row.iter().zip(&dp).enumerate() {
                d_logits[(i, j)] += p * (g - inner);
            }
        }
    }
}

/// Backward pass of [`collective_forward`].
///
/// `d_keys`/`d_values` are upstream gradients on `K` and `V`. `aux_scale`
/// multiplies the aux-loss gradient (use 0 to skip it, or `1/batch` when aux
/// losses are averaged over a batch). The argmax is treated as constant.
/// Gradients are accumulated into `grads`; the gradient on `S` is returned.
#[allow(clippy::too_many_arguments)]
pub fn collective_backward(
    s: &Matrix,
    config: &CollectiveConfig,
    params: &CollectiveParams,
    trace: &ForwardTrace,
    d_keys: &Matrix,
    d_values: &Matrix,
    aux_scale: f64,
    grads: &mut CollectiveParams,
) -> Result<Matrix> {
    if trace.mode != Mode::Training {
        return Err(Error::usage(
            "collective_backward needs a training-mode forward trace",
        ));
    }
    let d_a = config.attn_dim();
    for (what, g) in [("keys", d_keys), ("values", d_values)] {
        if g.shape() != (s.rows(), d_a) {
            return Err(Error::shape(
                "collective_backward",
                format!(
                    "upstream {what} gradient is {:?}, expected {:?}",
                    g.shape(),
                    (s.rows(), d_a)
                ),
            ));
        }
    }
    let active = config.shared_sides().max(1) as f64;
    let peak_scale = aux_scale * config.peak_weight / active;
    let balance_scale = aux_scale * config.balance_weight / active;

    let mut d_s = Matrix::zeros(s.rows(), s.cols());
    let mut key_router_grad: Option<Matrix> = None;

    for (side, side_trace, upstream) in [
        (Side::Keys, &trace.keys, d_keys),
        (Side::Values, &trace.values, d_values),
    ] {
        let grad_side = match side {
            Side::Keys => &mut grads.keys,
            Side::Values => &mut grads.values,
        };
        match (params.side(side), side_trace, grad_side) {
            (SideParams::Full(proj), SideTrace::Full, SideParams::Full(g)) => {
                d_s.add_assign(&proj.backward(s, upstream, g)?)?;
            }
            (
                SideParams::Shared {
                    projection, pool, ..
                },
                SideTrace::Shared { map },
                SideParams::Shared {
                    projection: g_proj,
                    router: g_router,
                    pool: g_pool,
                },
            ) => {
                let d_user = upstream.slice_cols(0, config.user_dim);
                d_s.add_assign(&projection.backward(s, &d_user, g_proj)?)?;

                let mut d_logits = Matrix::zeros(map.logits.rows(), map.logits.cols());
                for (i, &j) in map.indices.iter().enumerate() {
                    let d_c = &upstream.row(i)[config.user_dim..];
                    let gate = sigmoid(map.selected_logit(i));
                    let mut d_gate = 0.0;
                    for ((gp, &dc), &p) in g_pool.row_mut(j).iter_mut().zip(d_c).zip(pool.row(j)) {
                        *gp += gate * dc;
                        d_gate += dc * p;
                    }
                    d_logits[(i, j)] += d_gate * gate * (1.0 - gate);
                }
                aux_logit_grad(map, peak_scale, balance_scale, &mut d_logits);

                let router = params
                    .router_for(side)
                    .ok_or_else(|| Error::usage("shared side without a router"))?;
                d_s.add_assign(&d_logits.matmul_t(&router.weight)?)?;
                match g_router {
                    Some(gr) => {
                        gr.weight.add_assign(&s.t_matmul(&d_logits)?)?;
                        gr.bias.add_assign(&d_logits.col_sums())?;
                    }
                    None => {
                        // Tied head: fold into the key router after the loop.
                        key_router_grad = Some(d_logits);
                    }
                }
            }
            _ => {
                return Err(Error::usage(
                    "gradient buffers, parameters and trace disagree on side layout",
                ))
            }
        }
    }

    if let Some(d_logits) = key_router_grad {
        if let SideParams::Shared {
            router: Some(gr), ..
        } = &mut grads.keys
        {
            gr.weight.add_assign(&s.t_matmul(&d_logits)?)?;
            gr.bias.add_assign(&d_logits.col_sums())?;
        } else {
            return Err(Error::usage("tied value router without a key router"));
        }
    }
    Ok(d_s)
}
