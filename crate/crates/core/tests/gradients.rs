//! Central finite differences against the analytic backward pass.

use paraknow_core::tinylm::{backward, forward_loss, init_model, ModelConfig, ParamName, ParamStore, Role, TokenBatch};

const STEP: f64 = 1e-4;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        seed: 11,
    }
}

/// Replaces the zero head with deterministic values so every path carries gradient.
fn perturbed_model(cfg: &ModelConfig) -> ParamStore {
    let mut m = init_model(cfg).unwrap();
    let head = ParamName::global(Role::HeadOut);
    for (i, v) in m.get_mut(&head).unwrap().as_mut_slice().iter_mut().enumerate() {
        *v = (((i * 7919) % 23) as f64 - 11.0) * 0.03;
    }
    for (name, t) in m.iter_mut() {
        if name.role == Role::Norm {
            for (i, v) in t.as_mut_slice().iter_mut().enumerate() {
                *v = 1.0 + 0.1 * ((i % 5) as f64 - 2.0);
            }
        } else if name.role != Role::HeadOut {
            // scale weights up so attention is far from uniform
            for v in t.as_mut_slice() {
                *v *= 10.0;
            }
        }
    }
    m
}

fn finite_difference(model: &ParamStore, batch: &TokenBatch, name: &ParamName, idx: usize) -> f64 {
    let mut plus = model.clone();
    plus.get_mut(name).unwrap().as_mut_slice()[idx] += STEP;
    let mut minus = model.clone();
    minus.get_mut(name).unwrap().as_mut_slice()[idx] -= STEP;
    (forward_loss(&plus, batch).unwrap() - forward_loss(&minus, batch).unwrap()) / (2.0 * STEP)
}

fn check_all(model: &ParamStore, batch: &TokenBatch) -> usize {
    let (_, grads) = backward(model, batch).unwrap();
    let mut checked = 0;
    for (name, g) in grads.iter() {
        for (i, &gi) in g.as_slice().iter().enumerate() {
            let fd = finite_difference(model, batch, name, i);
            assert!(
                (gi - fd).abs() <= 1e-5 + 1e-3 * fd.abs(),
                "{name}[{i}]: analytic {gi} vs fd {fd}"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn every_gradient_matches_finite_differences() {
    let cfg = cfg();
    let model = perturbed_model(&cfg);
    let batch = TokenBatch::new(
        vec![vec![1, 5, 2, 9, 3, 3, 7], vec![4, 0, 15, 2]],
        vec![
            vec![false, true, true, false, true, true, true],
            vec![false, true, true, true],
        ],
    )
    .unwrap();
    let n = check_all(&model, &batch);
    assert_eq!(n, model.num_parameters());
}

#[test]
fn unused_position_rows_get_zero_gradient() {
    let cfg = cfg();
    let model = perturbed_model(&cfg);
    let batch = TokenBatch::full(vec![vec![1, 2, 3]]);
    let (_, grads) = backward(&model, &batch).unwrap();
    let pos = grads.get(&ParamName::global(Role::EmbedPos)).unwrap().as_slice();
    let d = cfg.hidden_dim;
    assert!(pos[3 * d..].iter().all(|&v| v == 0.0));
    assert!(pos[..3 * d].iter().any(|&v| v != 0.0));
}

#[test]
fn duplicated_batch_gives_identical_gradients() {
    let cfg = cfg();
    let model = perturbed_model(&cfg);
    let seq = vec![3, 4, 5, 6, 1];
    let (l1, g1) = backward(&model, &TokenBatch::full(vec![seq.clone()])).unwrap();
    let (l2, g2) = backward(&model, &TokenBatch::full(vec![seq.clone(), seq])).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-14 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn forward_loss_is_permutation_invariant() {
    let model = perturbed_model(&cfg());
    let a = vec![1, 2, 3, 4];
    let b = vec![7, 7, 1];
    let c = vec![0, 15, 14, 13, 12];
    let l1 = forward_loss(&model, &TokenBatch::full(vec![a.clone(), b.clone(), c.clone()])).unwrap();
    let l2 = forward_loss(&model, &TokenBatch::full(vec![c, a, b])).unwrap();
    assert!((l1 - l2).abs() <= 1e-14);
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let model = perturbed_model(&cfg());
    let batch = TokenBatch::full(vec![vec![1, 2, 3, 4, 5]]);
    let (l1, g1) = backward(&model, &batch).unwrap();
    let (l2, g2) = backward(&model, &batch).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
