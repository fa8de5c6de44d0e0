use mlh_core::codebook::{generate_centers, Codebook, HashConfig};
use mlh_core::dataio::LabelMatrix;
use mlh_core::diff::{finite_diff_check, stable_softplus, Graph, Tensor, DEFAULT_FD_EPS};
use mlh_core::losses::{
    center_loss, detached_branch, mutual_loss, pairwise_loss, total_loss, LabelBatch, LossParts,
    LossWeights, PROB_FLOOR,
};
use mlh_core::moh::Branch;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: usize, multi: bool) -> LabelMatrix {
    let mut l = LabelMatrix::empty(n, c);
    for i in 0..n {
        l.set(i, rng.random_range(0..c));
        if multi && rng.random::<bool>() {
            l.set(i, rng.random_range(0..c));
        }
    }
    l
}

/// Direct evaluation of the center objective with plain loops.
fn center_oracle(u: &Tensor, cb: &Codebook, y: &Tensor) -> f64 {
    let (n, q) = u.shape();
    let c = cb.classes();
    let mut total = 0.0;
    for j in 0..n {
        let un: f64 = u.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..c)
            .map(|i| {
                let h = cb.center(i);
                let dot: f64 = u.row(j).iter().zip(h).map(|(a, &b)| a * b as f64).sum();
                (q as f64).sqrt() * dot / (un * (q as f64).sqrt())
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (i, l) in logits.iter().enumerate() {
            let p = ((l - m).exp() / z).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let yi = y.get(j, i);
            total -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
        }
    }
    total / n as f64
}

fn pairwise_oracle(u: &Tensor, y: &Tensor) -> f64 {
    let n = u.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let inner: f64 = 0.5
                * u.row(i)
                    .iter()
                    .zip(u.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let shared = y.row(i).iter().zip(y.row(j)).any(|(a, b)| a * b > 0.0);
            total += (1.0 + inner.exp()).ln() - if shared { inner } else { 0.0 };
        }
    }
    total / n as f64
}

#[test]
fn center_loss_matches_direct_evaluation_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cb = generate_centers(HashConfig::new(8, 3).unwrap(), 3, 4, 8).unwrap();
    for multi in [false, true] {
        let u = random(&mut rng, 5, 8);
        let labels = LabelBatch::from_labels(&random_labels(&mut rng, 5, 3, multi));
        let mut g = Graph::new();
        let id = g.leaf(u.clone());
        let (l, probs) = center_loss(&mut g, id, &cb, &labels).unwrap();
        let expected = center_oracle(&u, &cb, &labels.y);
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        for r in 0..5 {
            assert!((probs.0.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        let err = finite_diff_check(
            |g, p| {
                Ok(center_loss(g, p[0], &cb, &labels)
                    .map_err(|_| mlh_core::diff::DiffError::InvalidArgument("center_loss"))?
                    .0)
            },
            &[u],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn center_loss_uniform_row_when_cosines_tie() {
    // antipodal centers: any u orthogonal to both gives equal cosines
    let cb = generate_centers(HashConfig::new(16, 2).unwrap(), 16, 0, 8).unwrap();
    let h = cb.center(0);
    let mut u = vec![0.0; 16];
    // flip half the coordinates of h so the dot product is zero
    for j in 0..16 {
        u[j] = if j < 8 { h[j] as f64 } else { -h[j] as f64 };
    }
    let mut g = Graph::new();
    let id = g.leaf(Tensor::from_vec(1, 16, u).unwrap());
    let labels = LabelBatch::from_labels(&LabelMatrix::single(&[0], 2).unwrap());
    let (_, probs) = center_loss(&mut g, id, &cb, &labels).unwrap();
    for v in probs.0.data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn center_loss_closed_form_at_own_center() {
    let cb = generate_centers(HashConfig::new(16, 2).unwrap(), 16, 0, 8).unwrap();
    let u = Tensor::from_fn(2, 16, |r, c| cb.center(r)[c] as f64);
    let labels = LabelBatch::from_labels(&LabelMatrix::single(&[0, 1], 2).unwrap());
    let mut g = Graph::new();
    let id = g.leaf(u);
    let (l, probs) = center_loss(&mut g, id, &cb, &labels).unwrap();
    let p = 1.0 / (1.0 + (-8.0f64).exp());
    assert!((probs.0.get(0, 0) - p).abs() < 1e-12);
    assert!((p - 0.99967).abs() < 1e-5);
    let per_sample = -(p.ln() + (1.0 - (1.0 - p)).ln());
    assert!((g.value(l).data()[0] - per_sample).abs() < 1e-12);
    assert!((g.value(l).data()[0] - 6.7e-4).abs() < 1e-5);
}

#[test]
fn pairwise_loss_matches_direct_evaluation_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for multi in [false, true] {
        let u = random(&mut rng, 4, 8);
        let labels = LabelBatch::from_labels(&random_labels(&mut rng, 4, 3, multi));
        let mut g = Graph::new();
        let id = g.leaf(u.clone());
        let (l, logits, s) = pairwise_loss(&mut g, id, &labels).unwrap();
        assert!((g.value(l).data()[0] - pairwise_oracle(&u, &labels.y)).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(s.0.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(s.0.get(i, j), s.0.get(j, i));
                assert_eq!(logits.0.get(i, j), logits.0.get(j, i));
            }
        }

        let err = finite_diff_check(
            |g, p| {
                Ok(pairwise_loss(g, p[0], &labels)
                    .map_err(|_| mlh_core::diff::DiffError::InvalidArgument("pairwise_loss"))?
                    .0)
            },
            &[u],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn pairwise_loss_hand_values_and_limits() {
    // all-zero codes: every one of the N² terms is log 2
    let labels = LabelBatch::from_labels(&LabelMatrix::single(&[0, 0, 1], 2).unwrap());
    let mut g = Graph::new();
    let u = g.leaf(Tensor::zeros(3, 4));
    let (l, _, _) = pairwise_loss(&mut g, u, &labels).unwrap();
    assert!((g.value(l).data()[0] - 9.0 * 2f64.ln() / 3.0).abs() < 1e-15);

    assert!(stable_softplus(700.0) - 700.0 < 1e-12);
    assert!(stable_softplus(-700.0) < 1e-300);

    let one = LabelBatch::from_labels(&LabelMatrix::single(&[0], 2).unwrap());
    let mut g = Graph::new();
    let u = g.leaf(Tensor::zeros(1, 4));
    assert!(pairwise_loss(&mut g, u, &one).is_err());
}

#[test]
fn pairwise_loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let u = random(&mut rng, 6, 8);
    let labels = random_labels(&mut rng, 6, 3, true);
    let mut order: Vec<usize> = (0..6).collect();
    order.shuffle(&mut rng);
    let up = Tensor::from_fn(6, 8, |r, c| u.get(order[r], c));
    let lp = labels.subset(&order);

    let eval = |u: Tensor, l: &LabelMatrix| {
        let mut g = Graph::new();
        let id = g.leaf(u);
        let (l, _, _) = pairwise_loss(&mut g, id, &LabelBatch::from_labels(l)).unwrap();
        g.value(l).data()[0]
    };
    assert!((eval(u, &labels) - eval(up, &lp)).abs() < 1e-12);
}

#[test]
fn stable_softplus_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..100_000 {
        let x: f64 = rng.random_range(-50.0..=50.0);
        assert!(
            (stable_softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12,
            "{x}"
        );
    }
    for x in [-700.0, -300.0, 300.0, 700.0] {
        assert!(stable_softplus(x).is_finite());
    }
}

#[test]
fn mutual_loss_range_and_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let a = random(&mut rng, 5, 8);
    let mut g = Graph::new();
    let uc = g.leaf(a.clone());
    let up = g.leaf(a.clone());
    let neg = g.leaf(a.map(|v| -v));
    let (same, _) = mutual_loss(&mut g, uc, up, 0, false).unwrap();
    let (opp, _) = mutual_loss(&mut g, uc, neg, 1, false).unwrap();
    assert!(g.value(same).data()[0].abs() < 1e-15);
    assert!((g.value(opp).data()[0] - 2.0).abs() < 1e-15);

    for epoch in 0..50 {
        let mut g = Graph::new();
        let uc = g.leaf(random(&mut rng, 4, 8));
        let up = g.leaf(random(&mut rng, 4, 8));
        let (l, _) = mutual_loss(&mut g, uc, up, epoch, false).unwrap();
        let v = g.value(l).data()[0];
        assert!((0.0..=2.0).contains(&v));
    }
    let mut g = Graph::new();
    let uc = g.leaf(Tensor::zeros(2, 8));
    let up = g.leaf(random(&mut rng, 2, 8));
    let (l, _) = mutual_loss(&mut g, uc, up, 0, false).unwrap();
    assert_eq!(g.value(l).data()[0], 1.0);
}

#[test]
fn mutual_loss_gradient_flows_only_into_optimized_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let a = random(&mut rng, 4, 8);
    let b = random(&mut rng, 4, 8);
    for epoch in 0..4 {
        for invert in [false, true] {
            let mut g = Graph::new();
            let uc = g.leaf(a.clone());
            let up = g.leaf(b.clone());
            let (l, detached) = mutual_loss(&mut g, uc, up, epoch, invert).unwrap();
            assert_eq!(detached, detached_branch(epoch, invert));
            g.backward(l).unwrap();
            let (frozen, live) = match detached {
                Branch::Center => (uc, up),
                Branch::Pairwise => (up, uc),
            };
            assert!(g.grad(frozen).data().iter().all(|v| v.to_bits() == 0));
            assert!(g.grad(live).norm() > 0.0);

            // finite differences over the optimized side with the target held fixed
            let (target, live_value) = match detached {
                Branch::Center => (a.clone(), b.clone()),
                Branch::Pairwise => (b.clone(), a.clone()),
            };
            let err = finite_diff_check(
                |g, p| {
                    let t = g.constant(target.clone());
                    let (uc, up) = match detached {
                        Branch::Center => (t, p[0]),
                        Branch::Pairwise => (p[0], t),
                    };
                    Ok(mutual_loss(g, uc, up, epoch, invert)
                        .map_err(|_| mlh_core::diff::DiffError::InvalidArgument("mutual"))?
                        .0)
                },
                &[live_value],
                DEFAULT_FD_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
    assert_eq!(detached_branch(0, false), Branch::Center);
    assert_eq!(detached_branch(1, false), Branch::Pairwise);
    assert_eq!(detached_branch(0, true), Branch::Pairwise);
}

fn weighted_total(weights: LossWeights) -> (f64, [f64; 3], Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let cb = generate_centers(HashConfig::new(8, 3).unwrap(), 3, 4, 8).unwrap();
    let labels = LabelBatch::from_labels(&random_labels(&mut rng, 4, 3, false));
    let mut g = Graph::new();
    let uc = g.leaf(random(&mut rng, 4, 8));
    let up = g.leaf(random(&mut rng, 4, 8));
    let (lc, _) = center_loss(&mut g, uc, &cb, &labels).unwrap();
    let (lp, _, _) = pairwise_loss(&mut g, up, &labels).unwrap();
    let (lm, d) = mutual_loss(&mut g, uc, up, 0, false).unwrap();
    let parts = LossParts {
        center: lc,
        pairwise: lp,
        mutual: Some(lm),
    };
    let (l, b) = total_loss(&mut g, parts, weights, d).unwrap();
    g.backward(l).unwrap();
    (
        g.value(l).data()[0],
        [b.center, b.pairwise, b.mutual],
        vec![g.grad(uc).clone(), g.grad(up).clone()],
    )
}

#[test]
fn total_loss_weighting() {
    let w = |a, b, c| LossWeights {
        lambda1: a,
        lambda2: b,
        lambda3: c,
    };
    let (l, _, grads) = weighted_total(w(0.0, 0.0, 0.0));
    assert_eq!(l, 0.0);
    assert!(grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    let (l, parts, _) = weighted_total(w(1.0, 0.0, 0.0));
    assert_eq!(l, parts[0]);
    let (l, parts, _) = weighted_total(w(4.0, 1.0, 1.0));
    assert_eq!(l, 4.0 * parts[0] + parts[1] + parts[2]);

    // the arithmetic example from the definition
    let mut g = Graph::new();
    let c = g.constant(Tensor::filled(1, 1, 0.5));
    let p = g.constant(Tensor::filled(1, 1, 0.7));
    let m = g.constant(Tensor::filled(1, 1, 0.1));
    let parts = LossParts {
        center: c,
        pairwise: p,
        mutual: Some(m),
    };
    let (_, b) = total_loss(&mut g, parts, LossWeights::default(), Branch::Center).unwrap();
    assert!((b.total - 2.8).abs() < 1e-12);

    let bad = w(1.0, -1.0, 0.0);
    let mut g = Graph::new();
    let c = g.constant(Tensor::filled(1, 1, 0.5));
    let parts = LossParts {
        center: c,
        pairwise: c,
        mutual: None,
    };
    assert!(total_loss(&mut g, parts, bad, Branch::Center).is_err());
}

#[test]
fn breakdown_json_line_keys() {
    let b = mlh_core::losses::LossBreakdown {
        total: 2.8,
        center: 0.5,
        pairwise: 0.7,
        mutual: 0.1,
        weights: LossWeights::default(),
        detached: Branch::Pairwise,
    };
    let v: serde_json::Value = serde_json::from_str(&b.json_line(3)).unwrap();
    for key in ["epoch", "L", "L_C", "L_P", "L_M", "parity"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["parity"], "pairwise");
    assert_eq!(v["epoch"], 3);
}
