//! Mixture of hash experts: a pool of experts that map features straight to
//! continuous codes, routed per branch by independent top-k gates.
//!
//! Parameters live in a [`ParamStore`]; the model only holds [`ParamId`]s into
//! it. With shared experts both branches route through the same pool, so the
//! same ids (and the same graph leaves once bound) appear on both paths.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::format::{write_atomic, ByteReader, ByteWriter, FormatError};
use crate::retrieval::BinaryCodes;
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLHM";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} features, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Center,
    Pairwise,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Center, Branch::Pairwise];

    fn slot(self) -> usize {
        match self {
            Branch::Center => 0,
            Branch::Pairwise => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Center => "c",
            Branch::Pairwise => "p",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Center => "center",
            Branch::Pairwise => "pairwise",
        })
    }
}

impl FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c" | "center" => Ok(Branch::Center),
            "p" | "pairwise" => Ok(Branch::Pairwise),
            other => Err(format!("unknown branch {other:?} (expected c|p)")),
        }
    }
}

/// Expert architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertKind {
    /// Two-layer perceptron whose output is the code itself.
    Hash,
    /// Two-layer perceptron back to feature width, followed by a per-branch
    /// linear hash head (conventional mixture of experts).
    Mlp,
    /// A single linear projection to the code.
    Linear,
}

impl ExpertKind {
    fn code(self) -> u8 {
        match self {
            ExpertKind::Hash => 0,
            ExpertKind::Mlp => 1,
            ExpertKind::Linear => 2,
        }
    }

    fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(ExpertKind::Hash),
            1 => Some(ExpertKind::Mlp),
            2 => Some(ExpertKind::Linear),
            _ => None,
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Hash => "hash",
            ExpertKind::Mlp => "mlp",
            ExpertKind::Linear => "linear",
        })
    }
}

impl FromStr for ExpertKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hash" | "moh" => Ok(ExpertKind::Hash),
            "mlp" | "moe" => Ok(ExpertKind::Mlp),
            "linear" => Ok(ExpertKind::Linear),
            other => Err(format!(
                "unknown expert kind {other:?} (expected hash|mlp|linear)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoHConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub bits: usize,
    pub experts: usize,
    pub activation_ratio: f64,
    pub shared_experts: bool,
    pub softmax_gate: bool,
    pub expert_kind: ExpertKind,
    /// Width of the one-hidden-layer backbone; 0 feeds features straight in.
    pub backbone_hidden: usize,
    /// When false each branch gets one plain linear hash layer and no gates.
    pub enable_moh: bool,
}

impl MoHConfig {
    pub fn new(feature_dim: usize, bits: usize) -> Self {
        MoHConfig {
            feature_dim,
            hidden_dim: (feature_dim / 2).max(1),
            bits,
            experts: 8,
            activation_ratio: 0.25,
            shared_experts: true,
            softmax_gate: false,
            expert_kind: ExpertKind::Hash,
            backbone_hidden: 0,
            enable_moh: true,
        }
    }

    /// `ceil(ratio · m)`, the number of experts each input is routed to.
    pub fn active_experts(&self) -> usize {
        // tolerate ratios like 1/3 that are not exact in binary
        let raw = self.activation_ratio * self.experts as f64;
        (raw - 1e-9).ceil().max(0.0) as usize
    }

    /// Width of `v_n`, the input to experts, gates and hash heads.
    pub fn code_input_dim(&self) -> usize {
        if self.backbone_hidden > 0 {
            self.backbone_hidden
        } else {
            self.feature_dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.feature_dim == 0 || self.bits == 0 || self.hidden_dim == 0 {
            return bad("feature_dim, hidden_dim and bits must be positive".into());
        }
        if self.enable_moh {
            if self.experts == 0 {
                return bad("need at least one expert".into());
            }
            if !(self.activation_ratio > 0.0 && self.activation_ratio <= 1.0) {
                return bad(format!(
                    "activation_ratio {} not in (0, 1]",
                    self.activation_ratio
                ));
            }
            let k = self.active_experts();
            if k < 1 || k > self.experts {
                return bad(format!("ceil(ratio*m) = {k} outside 1..={}", self.experts));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable matrices in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Graph leaves for every parameter of a model, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..=a));
        Dense {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    fn graph(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId, DiffError> {
        let h = g.matmul(x, p.node(self.weight))?;
        g.add_bias(h, p.node(self.bias))
    }

    fn eval(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor, DiffError> {
        x.matmul(s.get(self.weight))?
            .add_row_vector(s.get(self.bias))
    }
}

/// Dense layers with a rectifier between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub layers: Vec<Dense>,
}

impl Expert {
    fn graph(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId, DiffError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.graph(g, p, h)?;
        }
        Ok(h)
    }

    fn eval(&self, s: &ParamStore, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.map(|v| v.max(0.0));
            }
            h = layer.eval(s, &h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
}

/// Linear gate `G^s(v) = v·W_g + b_g` for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub branch: Branch,
    pub linear: Dense,
}

#[derive(Debug, Clone, PartialEq)]
enum HashLayer {
    Mixture {
        pools: Vec<ExpertPool>,
        gates: [Gate; 2],
        heads: Option<[Dense; 2]>,
    },
    Plain {
        heads: [Dense; 2],
    },
}

/// Continuous codes for one branch of a batch.
#[derive(Debug, Clone)]
pub struct CodeBatch {
    pub branch: Branch,
    pub u: NodeId,
    /// `N×m`, zero at experts a row was not routed to. `None` without a mixture.
    pub gate_weights: Option<Tensor>,
}

/// Backbone, expert pool(s), both gates, and any hash heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MoHModel {
    pub config: MoHConfig,
    pub params: ParamStore,
    backbone: Option<Dense>,
    layer: HashLayer,
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    row.iter_mut().for_each(|e| *e /= sum);
}

/// Per-expert routing for a batch: which rows each expert serves.
struct Routing {
    /// `routes[i]` lists the rows routed to expert `i`, ascending.
    routes: Vec<Vec<usize>>,
    weights: Tensor,
}

fn route(scores: &Tensor, k: usize) -> Result<Routing, ModelError> {
    if !scores.is_finite() {
        return Err(ModelError::NonFinite("gate scores"));
    }
    let (n, m) = scores.shape();
    let mut routes = vec![Vec::new(); m];
    let mut weights = Tensor::zeros(n, m);
    for r in 0..n {
        for i in top_k(scores.row(r), k) {
            routes[i].push(r);
            weights.set(r, i, scores.get(r, i));
        }
    }
    Ok(Routing { routes, weights })
}

/// Sparse mixture forward through `pool` under `gate` (graph path). Only experts
/// with at least one routed row are evaluated, and only on those rows.
pub fn moh_forward(
    g: &mut Graph,
    params: &Bound,
    features: NodeId,
    pool: &ExpertPool,
    gate: &Gate,
    cfg: &MoHConfig,
) -> Result<(NodeId, Tensor), ModelError> {
    let n = g.value(features).rows();
    if !g.value(features).is_finite() {
        return Err(ModelError::NonFinite("features"));
    }
    let mut scores = gate.linear.graph(g, params, features)?;
    if cfg.softmax_gate {
        scores = g.softmax_rows(scores);
    }
    let routing = route(g.value(scores), cfg.active_experts())?;
    let mut u: Option<NodeId> = None;
    for (i, rows) in routing.routes.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let x = g.gather_rows(features, rows.clone())?;
        let e = pool.experts[i].graph(g, params, x)?;
        let w = g.gather_entries(scores, rows.iter().map(|&r| (r, i)).collect())?;
        let weighted = g.row_scale(e, w)?;
        let placed = g.scatter_rows(weighted, rows.clone(), n)?;
        u = Some(match u {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    let u = u.ok_or_else(|| ModelError::InvalidConfig("no expert selected".into()))?;
    Ok((u, routing.weights))
}

fn moh_eval(
    s: &ParamStore,
    features: &Tensor,
    pool: &ExpertPool,
    gate: &Gate,
    cfg: &MoHConfig,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut scores = gate.linear.eval(s, features)?;
    if cfg.softmax_gate {
        for r in 0..scores.rows() {
            softmax_row(scores.row_mut(r));
        }
    }
    let routing = route(&scores, cfg.active_experts())?;
    let mut u: Option<Tensor> = None;
    for (i, rows) in routing.routes.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let x = Tensor::from_fn(rows.len(), features.cols(), |k, c| features.get(rows[k], c));
        let e = pool.experts[i].eval(s, &x)?;
        let mut placed = Tensor::zeros(features.rows(), e.cols());
        for (k, &r) in rows.iter().enumerate() {
            let w = scores.get(r, i);
            for (o, v) in placed.row_mut(r).iter_mut().zip(e.row(k)) {
                *o = v * w;
            }
        }
        u = Some(match u {
            Some(mut acc) => {
                acc.add_assign(&placed)?;
                acc
            }
            None => placed,
        });
    }
    let u = u.ok_or_else(|| ModelError::InvalidConfig("no expert selected".into()))?;
    Ok((u, routing.weights))
}

/// Builds a model with scaled-uniform weights and zero biases, deterministic in `seed`.
pub fn build_model(cfg: &MoHConfig, seed: u64) -> Result<MoHModel, ModelError> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    let mut store = ParamStore::default();
    let backbone = (cfg.backbone_hidden > 0).then(|| {
        Dense::new(
            &mut store,
            &mut rng,
            "backbone",
            cfg.feature_dim,
            cfg.backbone_hidden,
        )
    });
    let d = cfg.code_input_dim();
    let q = cfg.bits;

    let layer = if cfg.enable_moh {
        let pool_count = if cfg.shared_experts { 1 } else { 2 };
        let mut pools = Vec::with_capacity(pool_count);
        for p in 0..pool_count {
            let experts = (0..cfg.experts)
                .map(|i| {
                    let name = format!("pool{p}.expert{i}");
                    let layers = match cfg.expert_kind {
                        ExpertKind::Hash => vec![
                            Dense::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.l0"),
                                d,
                                cfg.hidden_dim,
                            ),
                            Dense::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.l1"),
                                cfg.hidden_dim,
                                q,
                            ),
                        ],
                        ExpertKind::Mlp => vec![
                            Dense::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.l0"),
                                d,
                                cfg.hidden_dim,
                            ),
                            Dense::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.l1"),
                                cfg.hidden_dim,
                                d,
                            ),
                        ],
                        ExpertKind::Linear => {
                            vec![Dense::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.l0"),
                                d,
                                q,
                            )]
                        }
                    };
                    Expert { layers }
                })
                .collect();
            pools.push(ExpertPool { experts });
        }
        let gates = Branch::BOTH.map(|b| Gate {
            branch: b,
            linear: Dense::new(
                &mut store,
                &mut rng,
                &format!("gate.{}", b.tag()),
                d,
                cfg.experts,
            ),
        });
        let heads = (cfg.expert_kind == ExpertKind::Mlp).then(|| {
            Branch::BOTH
                .map(|b| Dense::new(&mut store, &mut rng, &format!("head.{}", b.tag()), d, q))
        });
        HashLayer::Mixture {
            pools,
            gates,
            heads,
        }
    } else {
        HashLayer::Plain {
            heads: Branch::BOTH
                .map(|b| Dense::new(&mut store, &mut rng, &format!("head.{}", b.tag()), d, q)),
        }
    };

    Ok(MoHModel {
        config: cfg.clone(),
        params: store,
        backbone,
        layer,
    })
}

impl MoHModel {
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .values()
                .iter()
                .map(|t| g.leaf(t.clone()))
                .collect(),
        )
    }

    /// Expert pool serving `branch`, if the model has a mixture layer.
    pub fn pool(&self, branch: Branch) -> Option<&ExpertPool> {
        match &self.layer {
            HashLayer::Mixture { pools, .. } => Some(&pools[branch.slot().min(pools.len() - 1)]),
            HashLayer::Plain { .. } => None,
        }
    }

    pub fn gate(&self, branch: Branch) -> Option<&Gate> {
        match &self.layer {
            HashLayer::Mixture { gates, .. } => Some(&gates[branch.slot()]),
            HashLayer::Plain { .. } => None,
        }
    }

    /// Parameters used only by `branch` (its gate and any hash head).
    pub fn branch_params(&self, branch: Branch) -> Vec<ParamId> {
        let mut out = Vec::new();
        match &self.layer {
            HashLayer::Mixture { gates, heads, .. } => {
                let gl = gates[branch.slot()].linear;
                out.extend([gl.weight, gl.bias]);
                if let Some(h) = heads {
                    out.extend([h[branch.slot()].weight, h[branch.slot()].bias]);
                }
                if !self.config.shared_experts {
                    for e in &self.pool(branch).unwrap().experts {
                        for l in &e.layers {
                            out.extend([l.weight, l.bias]);
                        }
                    }
                }
            }
            HashLayer::Plain { heads } => {
                out.extend([heads[branch.slot()].weight, heads[branch.slot()].bias]);
            }
        }
        out
    }

    /// Expert parameters of a pool, grouped per expert.
    pub fn expert_params(pool: &ExpertPool) -> Vec<Vec<ParamId>> {
        pool.experts
            .iter()
            .map(|e| e.layers.iter().flat_map(|l| [l.weight, l.bias]).collect())
            .collect()
    }

    fn check_width(&self, width: usize) -> Result<(), ModelError> {
        if width != self.config.feature_dim {
            return Err(ModelError::FeatureWidth {
                expected: self.config.feature_dim,
                got: width,
            });
        }
        Ok(())
    }

    /// `V₀ = φ(X)`.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        params: &Bound,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        self.check_width(g.value(x).cols())?;
        if !g.value(x).is_finite() {
            return Err(ModelError::NonFinite("features"));
        }
        Ok(match &self.backbone {
            Some(layer) => {
                let h = layer.graph(g, params, x)?;
                g.relu(h)
            }
            None => x,
        })
    }

    /// Branch codes `u^s` from backbone output `v`.
    pub fn branch_forward(
        &self,
        g: &mut Graph,
        params: &Bound,
        v: NodeId,
        branch: Branch,
    ) -> Result<CodeBatch, ModelError> {
        let s = branch.slot();
        let (u, gate_weights) = match &self.layer {
            HashLayer::Mixture { gates, heads, .. } => {
                let pool = self.pool(branch).unwrap();
                let (mixed, w) = moh_forward(g, params, v, pool, &gates[s], &self.config)?;
                let u = match heads {
                    Some(h) => h[s].graph(g, params, mixed)?,
                    None => mixed,
                };
                (u, Some(w))
            }
            HashLayer::Plain { heads } => (heads[s].graph(g, params, v)?, None),
        };
        Ok(CodeBatch {
            branch,
            u,
            gate_weights,
        })
    }

    /// Continuous codes and gate weights without building a graph.
    pub fn encode_continuous(
        &self,
        features: &Tensor,
        branch: Branch,
    ) -> Result<(Tensor, Option<Tensor>), ModelError> {
        self.check_width(features.cols())?;
        if !features.is_finite() {
            return Err(ModelError::NonFinite("features"));
        }
        let s = &self.params;
        let v = match &self.backbone {
            Some(layer) => layer.eval(s, features)?.map(|v| v.max(0.0)),
            None => features.clone(),
        };
        let slot = branch.slot();
        match &self.layer {
            HashLayer::Mixture { gates, heads, .. } => {
                let pool = self.pool(branch).unwrap();
                let (mixed, w) = moh_eval(s, &v, pool, &gates[slot], &self.config)?;
                let u = match heads {
                    Some(h) => h[slot].eval(s, &mixed)?,
                    None => mixed,
                };
                Ok((u, Some(w)))
            }
            HashLayer::Plain { heads } => Ok((heads[slot].eval(s, &v)?, None)),
        }
    }

    /// Binary codes `sign(u^s)` for every row of `features`.
    pub fn encode(&self, features: &Tensor, branch: Branch) -> Result<BinaryCodes, ModelError> {
        let (u, _) = self.encode_continuous(features, branch)?;
        Ok(binarize(&u))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let c = &self.config;
        let mut w = ByteWriter::new(CHECKPOINT_MAGIC);
        w.dim(c.feature_dim)?;
        w.dim(c.hidden_dim)?;
        w.dim(c.bits)?;
        w.dim(c.experts)?;
        w.f64(c.activation_ratio);
        w.u8(c.shared_experts as u8);
        w.u8(c.softmax_gate as u8);
        w.u8(c.expert_kind.code());
        w.dim(c.backbone_hidden)?;
        w.u8(c.enable_moh as u8);
        w.dim(self.params.len())?;
        for t in self.params.values() {
            w.dim(t.rows())?;
            w.dim(t.cols())?;
            for &v in t.data() {
                w.f64(v);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
        let feature_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let bits = r.u32()? as usize;
        let experts = r.u32()? as usize;
        let activation_ratio = r.f64()?;
        let shared_experts = r.bool()?;
        let softmax_gate = r.bool()?;
        let kind_at = r.offset();
        let expert_kind = ExpertKind::from_code(r.u8()?).ok_or(FormatError::InvalidValue {
            offset: kind_at,
            detail: "unknown expert kind".into(),
        })?;
        let backbone_hidden = r.u32()? as usize;
        let enable_moh = r.bool()?;
        let cfg = MoHConfig {
            feature_dim,
            hidden_dim,
            bits,
            experts,
            activation_ratio,
            shared_experts,
            softmax_gate,
            expert_kind,
            backbone_hidden,
            enable_moh,
        };
        let mut model = build_model(&cfg, 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(ModelError::Mismatch(format!(
                "{count} parameter matrices, config implies {}",
                model.params.len()
            )));
        }
        for t in model.params.values_mut() {
            let at = r.offset();
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "matrix at offset {at} is {rows}x{cols}, expected {:?}",
                    t.shape()
                )));
            }
            r.checked_payload(&[rows, cols], 8)?;
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

/// Entrywise sign with `sign(0) = +1`.
pub fn binarize(u: &Tensor) -> BinaryCodes {
    let data = u
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1 } else { -1 })
        .collect();
    BinaryCodes::new(u.rows(), u.cols(), data).expect("sign output is always ±1")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> MoHConfig {
        MoHConfig {
            hidden_dim: 5,
            experts: 4,
            activation_ratio: 0.5,
            ..MoHConfig::new(6, 8)
        }
    }

    #[test]
    fn active_expert_count() {
        let mut c = small_cfg();
        assert_eq!(c.active_experts(), 2);
        c.experts = 64;
        c.activation_ratio = 0.25;
        assert_eq!(c.active_experts(), 16);
        c.experts = 3;
        c.activation_ratio = 1.0 / 3.0;
        assert_eq!(c.active_experts(), 1);
        c.activation_ratio = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k(&[0.5, 0.9, 0.9, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[-3.0, 2.0, 0.0, 2.0], 1), vec![1]);
    }

    #[test]
    fn binarize_examples() {
        let u = Tensor::from_rows(&[&[0.3, -0.7, 0.0]]);
        assert_eq!(binarize(&u).row(0), &[1, -1, 1]);
        let neg = Tensor::from_rows(&[&[-0.3, 0.7, -2.0]]);
        let b = binarize(&neg);
        assert_eq!(b.row(0), &[-1, 1, -1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&small_cfg(), 11).unwrap();
        let b = build_model(&small_cfg(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_model(&small_cfg(), 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = small_cfg();
        let m = build_model(&cfg, 0).unwrap();
        let (fd, h, q, e) = (cfg.feature_dim, cfg.hidden_dim, cfg.bits, cfg.experts);
        let expected = e * (fd * h + h + h * q + q) + 2 * (fd * e + e);
        assert_eq!(m.params.scalar_count(), expected);

        let with_backbone = MoHConfig {
            backbone_hidden: 6,
            ..cfg.clone()
        };
        let m = build_model(&with_backbone, 0).unwrap();
        assert_eq!(m.params.scalar_count(), expected + 6 * 6 + 6);

        let unshared = MoHConfig {
            shared_experts: false,
            ..cfg
        };
        let m = build_model(&unshared, 0).unwrap();
        assert_eq!(
            m.params.scalar_count(),
            2 * e * (fd * h + h + h * q + q) + 2 * (fd * e + e)
        );
    }

    #[test]
    fn plain_layer_has_no_gates() {
        let cfg = MoHConfig {
            enable_moh: false,
            ..small_cfg()
        };
        let m = build_model(&cfg, 0).unwrap();
        assert!(m.gate(Branch::Center).is_none());
        assert!(m.params.names().iter().all(|n| !n.starts_with("gate")));
        assert_eq!(m.params.scalar_count(), 2 * (6 * 8 + 8));
    }

    #[test]
    fn shared_pool_is_one_memory() {
        let m = build_model(&small_cfg(), 3).unwrap();
        assert_eq!(m.pool(Branch::Center), m.pool(Branch::Pairwise));
        let x = Tensor::from_fn(3, 6, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let before: Vec<Tensor> = Branch::BOTH
            .iter()
            .map(|&b| m.encode_continuous(&x, b).unwrap().0)
            .collect();
        // bump every expert weight through the center branch's view
        let mut m2 = m.clone();
        let ids: Vec<ParamId> = MoHModel::expert_params(m.pool(Branch::Center).unwrap())
            .into_iter()
            .flatten()
            .collect();
        for id in ids {
            m2.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.05);
        }
        for (i, &b) in Branch::BOTH.iter().enumerate() {
            assert_ne!(m2.encode_continuous(&x, b).unwrap().0, before[i]);
        }
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        for kind in [ExpertKind::Hash, ExpertKind::Mlp, ExpertKind::Linear] {
            let cfg = MoHConfig {
                expert_kind: kind,
                softmax_gate: kind == ExpertKind::Mlp,
                backbone_hidden: 4,
                ..small_cfg()
            };
            let m = build_model(&cfg, 9).unwrap();
            let x = Tensor::from_fn(5, 6, |r, c| ((r * 5 + c * 11) % 7) as f64 * 0.2 - 0.5);
            for b in Branch::BOTH {
                let mut g = Graph::new();
                let p = m.bind(&mut g);
                let xi = g.constant(x.clone());
                let v = m.backbone_forward(&mut g, &p, xi).unwrap();
                let cb = m.branch_forward(&mut g, &p, v, b).unwrap();
                let (u, w) = m.encode_continuous(&x, b).unwrap();
                assert_eq!(g.value(cb.u), &u);
                assert_eq!(cb.gate_weights, w);
            }
        }
    }

    #[test]
    fn rejects_wrong_width_and_nan() {
        let m = build_model(&small_cfg(), 0).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros(2, 5), Branch::Center),
            Err(ModelError::FeatureWidth {
                expected: 6,
                got: 5
            })
        ));
        let mut x = Tensor::zeros(2, 6);
        x.set(1, 1, f64::NAN);
        assert!(matches!(
            m.encode(&x, Branch::Center),
            Err(ModelError::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = MoHConfig {
            shared_experts: false,
            ..small_cfg()
        };
        let m = build_model(&cfg, 4).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = MoHModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(MoHModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
