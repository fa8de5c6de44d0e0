//! Mini-batch training of both branches with RMSProp.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::dataio::{FeatureDataset, Split};
use crate::diff::{DiffError, Graph, Tensor};
use crate::losses::{
    center_loss, detached_branch, mutual_loss, pairwise_loss, total_loss, LabelBatch,
    LossBreakdown, LossError, LossParts, LossWeights,
};
use crate::moh::{build_model, Branch, ExpertKind, MoHConfig, MoHModel, ModelError};
use crate::retrieval::BinaryCodes;
use crate::rng::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        breakdown: Box<LossBreakdown>,
        /// Graph dump of the failing batch.
        snapshot: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    pub moh: MoHConfig,
    pub mutual_parity_invert: bool,
    pub enable_ml: bool,
    pub enable_moh: bool,
}

impl TrainConfig {
    pub fn new(moh: MoHConfig) -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 100,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            seed: 0,
            moh,
            mutual_parity_invert: false,
            enable_ml: true,
            enable_moh: true,
        }
    }

    /// Model config with the mixture switch applied.
    pub fn model_config(&self) -> MoHConfig {
        MoHConfig {
            enable_moh: self.enable_moh,
            ..self.moh.clone()
        }
    }

    /// Weights actually applied: `λ₃` is zero without mutual learning.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda3: if self.enable_ml {
                self.weights.lambda3
            } else {
                0.0
            },
            ..self.weights
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = self.weights;
        if [w.lambda1, w.lambda2, w.lambda3]
            .iter()
            .any(|&l| !(l >= 0.0 && l.is_finite()))
        {
            return Err(TrainError::Config(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(TrainError::Config("rmsprop_decay must be in [0, 1)".into()));
        }
        if self.rmsprop_eps.is_nan() || self.rmsprop_eps <= 0.0 {
            return Err(TrainError::Config("rmsprop_eps must be positive".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Applies flat `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are an error.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| TrainError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        let m = &mut self.moh;
        match key {
            "lambda1" => self.weights.lambda1 = p(key, value)?,
            "lambda2" => self.weights.lambda2 = p(key, value)?,
            "lambda3" => self.weights.lambda3 = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = p(key, value)?,
            "rmsprop_eps" => self.rmsprop_eps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "mutual_parity_invert" => self.mutual_parity_invert = p(key, value)?,
            "enable_ml" => self.enable_ml = p(key, value)?,
            "enable_moh" => self.enable_moh = p(key, value)?,
            "feature_dim" => m.feature_dim = p(key, value)?,
            "hidden_dim" => m.hidden_dim = p(key, value)?,
            "bits" => m.bits = p(key, value)?,
            "experts" => m.experts = p(key, value)?,
            "activation_ratio" => m.activation_ratio = parse_ratio(value)?,
            "shared_experts" => m.shared_experts = p(key, value)?,
            "softmax_gate" => m.softmax_gate = p(key, value)?,
            "expert_kind" => m.expert_kind = value.parse::<ExpertKind>()?,
            "backbone_hidden" => m.backbone_hidden = p(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Every field as `key = value` lines, readable by [`TrainConfig::apply_kv`].
    pub fn to_kv(&self) -> String {
        let m = &self.moh;
        let w = self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("lambda1", w.lambda1.to_string()),
            ("lambda2", w.lambda2.to_string()),
            ("lambda3", w.lambda3.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("rmsprop_decay", self.rmsprop_decay.to_string()),
            ("rmsprop_eps", self.rmsprop_eps.to_string()),
            ("seed", self.seed.to_string()),
            (
                "mutual_parity_invert",
                self.mutual_parity_invert.to_string(),
            ),
            ("enable_ml", self.enable_ml.to_string()),
            ("enable_moh", self.enable_moh.to_string()),
            ("feature_dim", m.feature_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("bits", m.bits.to_string()),
            ("experts", m.experts.to_string()),
            ("activation_ratio", m.activation_ratio.to_string()),
            ("shared_experts", m.shared_experts.to_string()),
            ("softmax_gate", m.softmax_gate.to_string()),
            ("expert_kind", m.expert_kind.to_string()),
            ("backbone_hidden", m.backbone_hidden.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Accepts decimals or fractions such as `1/4`.
pub fn parse_ratio(v: &str) -> Result<f64, String> {
    let bad = || format!("bad ratio {v:?}");
    match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            Ok(a / b)
        }
        None => v.trim().parse().map_err(|_| bad()),
    }
}

/// Running mean of squared gradients, one accumulator per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub mean_square: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            mean_square: params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
}

/// `acc ← ρ·acc + (1−ρ)·g²; θ ← θ − lr·g/(√acc + ε)`
pub fn rmsprop_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    opt: RmsProp,
) -> Result<(), DiffError> {
    if params.len() != grads.len() || params.len() != state.mean_square.len() {
        return Err(DiffError::InvalidArgument(
            "parameter/gradient/state count mismatch",
        ));
    }
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.mean_square) {
        p.check_same("rmsprop_step", g)?;
        p.check_same("rmsprop_step", acc)?;
        for ((theta, &grad), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a = opt.decay * *a + (1.0 - opt.decay) * grad * grad;
            *theta -= opt.learning_rate * grad / (a.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub seed: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-averaged breakdown per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
    pub seeds: TrainSeeds,
}

pub fn train(
    data: &FeatureDataset,
    centers: &Codebook,
    cfg: &TrainConfig,
) -> Result<(MoHModel, TrainReport), TrainError> {
    train_with(data, centers, cfg, |_, _| {})
}

/// Trains on the rows tagged [`Split::Train`], calling `on_epoch` after every
/// epoch with its batch-averaged breakdown.
pub fn train_with(
    data: &FeatureDataset,
    centers: &Codebook,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<(MoHModel, TrainReport), TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    if data.feature_dim() != cfg.moh.feature_dim {
        return Err(TrainError::Dimension(format!(
            "data has {} features, config {}",
            data.feature_dim(),
            cfg.moh.feature_dim
        )));
    }
    if data.classes() != centers.classes() {
        return Err(TrainError::Dimension(format!(
            "data has {} classes, codebook {}",
            data.classes(),
            centers.classes()
        )));
    }
    if centers.bits() != cfg.moh.bits {
        return Err(TrainError::Dimension(format!(
            "codebook has {} bits, config {}",
            centers.bits(),
            cfg.moh.bits
        )));
    }
    let train_ids = data.ids(Split::Train);
    if train_ids.len() < 2 {
        return Err(TrainError::Dimension(format!(
            "need at least 2 training rows, have {}",
            train_ids.len()
        )));
    }

    let mut model = build_model(&cfg.model_config(), cfg.seed)?;
    let mut state = OptimizerState::new(model.params.values());
    let opt = RmsProp {
        learning_rate: cfg.learning_rate,
        decay: cfg.rmsprop_decay,
        eps: cfg.rmsprop_eps,
    };
    let weights = cfg.effective_weights();
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let mut shuffle_rng = crate::rng::stream(cfg.seed, "shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut shuffle_rng);
        let detached = detached_branch(epoch, cfg.mutual_parity_invert);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;

        // a trailing batch of one sample has no pairs and is skipped
        for (b, ids) in order
            .chunks(cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .enumerate()
        {
            let batch = data.subset(ids);
            let labels = LabelBatch::from_labels(&batch.labels);

            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = g.constant(batch.features);
            let v = model.backbone_forward(&mut g, &bound, x)?;
            let uc = model.branch_forward(&mut g, &bound, v, Branch::Center)?;
            let up = model.branch_forward(&mut g, &bound, v, Branch::Pairwise)?;
            let (lc, _) = center_loss(&mut g, uc.u, centers, &labels)?;
            let (lp, _, _) = pairwise_loss(&mut g, up.u, &labels)?;
            let lm = if cfg.enable_ml {
                Some(mutual_loss(&mut g, uc.u, up.u, epoch, cfg.mutual_parity_invert)?.0)
            } else {
                None
            };
            let parts = LossParts {
                center: lc,
                pairwise: lp,
                mutual: lm,
            };
            let (loss, breakdown) = total_loss(&mut g, parts, weights, detached)?;
            if ![
                breakdown.total,
                breakdown.center,
                breakdown.pairwise,
                breakdown.mutual,
            ]
            .iter()
            .all(|v| v.is_finite())
            {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    breakdown: Box::new(breakdown),
                    snapshot: g.dump(),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = bound.nodes().iter().map(|&id| g.grad(id).clone()).collect();
            rmsprop_step(model.params.values_mut(), &grads, &mut state, opt)?;

            for (s, v) in sums.iter_mut().zip([
                breakdown.total,
                breakdown.center,
                breakdown.pairwise,
                breakdown.mutual,
            ]) {
                *s += v;
            }
            batches += 1;
        }

        let n = batches.max(1) as f64;
        let summary = LossBreakdown {
            total: sums[0] / n,
            center: sums[1] / n,
            pairwise: sums[2] / n,
            mutual: sums[3] / n,
            weights,
            detached,
        };
        on_epoch(epoch, &summary);
        history.push(summary);
    }

    Ok((
        model,
        TrainReport {
            epochs: history,
            checkpoint: None,
            wall_time_secs: start.elapsed().as_secs_f64(),
            seeds: TrainSeeds {
                seed: cfg.seed,
                shuffle: shuffle_seed,
            },
        },
    ))
}

/// `sign(u^s)` for every row of `features`; no graph is built.
pub fn encode(
    model: &MoHModel,
    features: &Tensor,
    branch: Branch,
) -> Result<BinaryCodes, ModelError> {
    model.encode(features, branch)
}
