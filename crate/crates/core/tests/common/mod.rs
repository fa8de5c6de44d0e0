//! Oracles shared by several test targets.
#![allow(dead_code)]

use mlh_core::diff::Tensor;
use mlh_core::moh::{Branch, MoHModel};

fn param<'a>(model: &'a MoHModel, name: &str) -> &'a Tensor {
    let id = model
        .params
        .position(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.get(id)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(x.rows(), w.cols(), |r, c| {
        b.get(0, c)
            + (0..x.cols())
                .map(|k| x.get(r, k) * w.get(k, c))
                .sum::<f64>()
    })
}

/// Evaluates every expert on every row, then zeroes all but the top-k gate
/// scores (ties to the lower index) and sums. Reads parameters by name only.
/// Supports the default two-layer hash experts with an identity backbone.
pub fn dense_mask_oracle(model: &MoHModel, x: &Tensor, branch: Branch) -> Tensor {
    let cfg = &model.config;
    let (m, k) = (cfg.experts, cfg.active_experts());
    let pool = if cfg.shared_experts {
        0
    } else {
        branch.tag().eq("p") as usize
    };
    let gate = branch.tag();
    let mut scores = affine(
        x,
        param(model, &format!("gate.{gate}.weight")),
        param(model, &format!("gate.{gate}.bias")),
    );
    if cfg.softmax_gate {
        for r in 0..scores.rows() {
            let row = scores.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
        }
    }
    let outputs: Vec<Tensor> = (0..m)
        .map(|i| {
            let p = |l: usize, t: &str| param(model, &format!("pool{pool}.expert{i}.l{l}.{t}"));
            let h = affine(x, p(0, "weight"), p(0, "bias")).map(|v| v.max(0.0));
            affine(&h, p(1, "weight"), p(1, "bias"))
        })
        .collect();
    let mut u = Tensor::zeros(x.rows(), cfg.bits);
    for r in 0..x.rows() {
        let row = scores.row(r);
        let mut mask = vec![false; m];
        for _ in 0..k {
            let best = (0..m)
                .filter(|&i| !mask[i])
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if row[b] >= row[i] => Some(b),
                    _ => Some(i),
                })
                .unwrap();
            mask[best] = true;
        }
        for i in (0..m).filter(|&i| mask[i]) {
            for c in 0..cfg.bits {
                let v = u.get(r, c) + row[i] * outputs[i].get(r, c);
                u.set(r, c, v);
            }
        }
    }
    u
}

/// Replaces every parameter with a uniform draw so biases are nonzero too.
pub fn scramble(model: &mut MoHModel, rng: &mut impl rand::Rng) {
    for t in model.params.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
}
