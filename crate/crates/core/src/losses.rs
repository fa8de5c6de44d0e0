//! Center-based, pairwise and alternating mutual objectives, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::dataio::LabelMatrix;
use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::moh::Branch;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pairwise loss needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Multi-hot targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    pub y: Tensor,
}

impl LabelBatch {
    pub fn from_labels(labels: &LabelMatrix) -> Self {
        LabelBatch {
            y: labels.to_tensor(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.y.cols()
    }

    /// `S_ij = 1[y_iᵀ y_j > 0]`
    pub fn similarity(&self) -> SimilarityMatrix {
        let y = &self.y;
        let inner = y.matmul_t(y).expect("same width");
        SimilarityMatrix(inner.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Tensor);

/// Softmax class probabilities `P` (before clamping).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(pub Tensor);

/// Half inner products `I_ij = ½ u_iᵀ u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogits(pub Tensor);

/// `L_C`: cross-entropy of softmax over `√q · cos(u_j, h_i)`, with both the
/// positive and the negative log terms, averaged over the batch. Centers enter
/// as constants.
pub fn center_loss(
    g: &mut Graph,
    u: NodeId,
    centers: &Codebook,
    labels: &LabelBatch,
) -> Result<(NodeId, ClassProbabilities), LossError> {
    let (n, q) = g.value(u).shape();
    if q != centers.bits() {
        return Err(LossError::Dimension(format!(
            "codes have {q} bits, centers {}",
            centers.bits()
        )));
    }
    if labels.classes() != centers.classes() || labels.len() != n {
        return Err(LossError::Dimension(format!(
            "labels are {}x{}, expected {n}x{}",
            labels.len(),
            labels.classes(),
            centers.classes()
        )));
    }
    let scale = (q as f64).sqrt();
    // ±1 rows all have norm √q
    let h = g.constant(centers.to_tensor().map(|v| v / scale));
    let un = g.normalize_rows(u);
    let cos = g.matmul_t(un, h)?;
    let logits = g.scale(cos, scale);
    let p = g.softmax_rows(logits);
    let probs = ClassProbabilities(g.value(p).clone());

    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let log_p = g.log(pc);
    let neg = g.scale(pc, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_1mp = g.log(one_minus);
    let pos_terms = g.mul_const(log_p, labels.y.clone())?;
    let neg_terms = g.mul_const(log_1mp, labels.y.map(|v| 1.0 - v))?;
    let terms = g.add(pos_terms, neg_terms)?;
    let total = g.sum_all(terms);
    Ok((g.scale(total, -1.0 / n as f64), probs))
}

/// `L_P = (1/N) Σ_{i,j} [softplus(I_ij) − S_ij I_ij]` over all ordered pairs,
/// diagonal included.
pub fn pairwise_loss(
    g: &mut Graph,
    u: NodeId,
    labels: &LabelBatch,
) -> Result<(NodeId, PairLogits, SimilarityMatrix), LossError> {
    let n = g.value(u).rows();
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    if labels.len() != n {
        return Err(LossError::Dimension(format!(
            "{} label rows for {n} codes",
            labels.len()
        )));
    }
    let s = labels.similarity();
    let inner = g.matmul_t(u, u)?;
    let half = g.scale(inner, 0.5);
    let logits = PairLogits(g.value(half).clone());
    let sp = g.softplus(half);
    let si = g.mul_const(half, s.0.clone())?;
    let terms = g.sub(sp, si)?;
    let total = g.sum_all(terms);
    Ok((g.scale(total, 1.0 / n as f64), logits, s))
}

/// Branch whose codes serve as the detached target at `epoch`. Even epochs
/// detach the center branch unless `invert` is set.
pub fn detached_branch(epoch: usize, invert: bool) -> Branch {
    if epoch.is_multiple_of(2) != invert {
        Branch::Center
    } else {
        Branch::Pairwise
    }
}

/// `L_M = mean_n [1 − cos(u_opt, stop_grad(u_target))]`, with the roles fixed
/// by [`detached_branch`].
pub fn mutual_loss(
    g: &mut Graph,
    u_c: NodeId,
    u_p: NodeId,
    epoch: usize,
    invert: bool,
) -> Result<(NodeId, Branch), LossError> {
    let detached = detached_branch(epoch, invert);
    let (opt, target) = match detached {
        Branch::Center => (u_p, u_c),
        Branch::Pairwise => (u_c, u_p),
    };
    let target = g.detach(target);
    let cos = g.row_cosine(opt, target)?;
    let mean = g.mean_all(cos);
    let neg = g.scale(mean, -1.0);
    Ok((g.add_scalar(neg, 1.0), detached))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 4.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

/// The three objective nodes of one batch. `mutual` is `None` when mutual
/// learning is disabled and counts as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub center: NodeId,
    pub pairwise: NodeId,
    pub mutual: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub center: f64,
    pub pairwise: f64,
    pub mutual: f64,
    pub weights: LossWeights,
    pub detached: Branch,
}

impl LossBreakdown {
    /// One JSON line `{epoch, L, L_C, L_P, L_M, parity}`; `parity` names the
    /// detached branch.
    pub fn json_line(&self, epoch: usize) -> String {
        serde_json::json!({
            "epoch": epoch,
            "L": self.total,
            "L_C": self.center,
            "L_P": self.pairwise,
            "L_M": self.mutual,
            "parity": self.detached.to_string(),
        })
        .to_string()
    }
}

/// `L = λ₁L_C + λ₂L_P + λ₃L_M`.
pub fn total_loss(
    g: &mut Graph,
    parts: LossParts,
    weights: LossWeights,
    detached: Branch,
) -> Result<(NodeId, LossBreakdown), LossError> {
    for w in [weights.lambda1, weights.lambda2, weights.lambda3] {
        if w.is_nan() || w < 0.0 {
            return Err(LossError::NegativeWeight(w));
        }
    }
    let wc = g.scale(parts.center, weights.lambda1);
    let wp = g.scale(parts.pairwise, weights.lambda2);
    let mut l = g.add(wc, wp)?;
    if let Some(m) = parts.mutual {
        let wm = g.scale(m, weights.lambda3);
        l = g.add(l, wm)?;
    }
    let val = |g: &Graph, id: NodeId| g.value(id).data()[0];
    let breakdown = LossBreakdown {
        total: val(g, l),
        center: val(g, parts.center),
        pairwise: val(g, parts.pairwise),
        mutual: parts.mutual.map_or(0.0, |m| val(g, m)),
        weights,
        detached,
    };
    Ok((l, breakdown))
}
