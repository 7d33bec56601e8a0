//! Finite-difference certification of every op in the layer vocabulary.

use figuregen::nn::graph::AttnMask;
use figuregen::nn::layers::{Conv2d, Embedding, ExpertHeads, GroupNorm, LayerNorm, Linear, MultiHeadAttention, TransformerBlock, Upsample2x};
use figuregen::nn::{grad_check, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random projection so objectives are not symmetric sums.
fn weighted_sum(g: &mut Graph, x: figuregen::nn::NodeId, seed: u64) -> figuregen::nn::NodeId {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn all_ids(store: &ParamStore) -> Vec<figuregen::nn::ParamId> {
    store.ids().collect()
}

#[test]
fn conv2d_stride_one_and_two() {
    for stride in [1, 2] {
        let mut r = rng(stride as u64);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, stride, &mut r);
        let x = store.add("x", Tensor::randn(&[3, 6, 5], 1.0, &mut r));
        let ids = all_ids(&store);
        let rep = grad_check(&mut store, &ids, 1e-5, |g| {
            let xi = g.param(x);
            let y = conv.forward(g, xi)?;
            Ok(weighted_sum(g, y, 9))
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "stride {stride}: {rep:?}");
    }
}

#[test]
fn conv_transpose_doubles_and_differentiates() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let up = Upsample2x::new(&mut store, "up", 3, 2, &mut r);
    let x = store.add("x", Tensor::randn(&[3, 3, 2], 1.0, &mut r));
    let ids = all_ids(&store);
    {
        let mut g = Graph::new(&store);
        let xi = g.param(x);
        let y = up.forward(&mut g, xi).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 4]);
    }
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let xi = g.param(x);
        let y = up.forward(g, xi)?;
        Ok(weighted_sum(g, y, 4))
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn linear_relu_gelu_sigmoid_chain() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 5, 7, &mut r);
    let l2 = Linear::new(&mut store, "l2", 7, 3, &mut r);
    let x = store.add("x", Tensor::randn(&[4, 5], 1.0, &mut r));
    let ids = all_ids(&store);
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let xi = g.param(x);
        let h = l1.forward(g, xi)?;
        let a = g.relu(h);
        let b = g.gelu(h);
        let h = g.add(a, b)?;
        let h = l2.forward(g, h)?;
        let h = g.sigmoid(h);
        Ok(weighted_sum(g, h, 6))
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn normalization_layers() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let gn = GroupNorm::new(&mut store, "gn", 4, 2);
    // Perturb the affine parameters away from their identity initialization.
    for id in all_ids(&store) {
        let t = store.value(id).clone();
        *store.value_mut(id) = Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.3 * ((i as f64) * 1.7).sin());
    }
    let x = store.add("x", Tensor::randn(&[3, 6], 1.0, &mut r));
    let y = store.add("y", Tensor::randn(&[4, 3, 2], 1.0, &mut r));
    let ids = all_ids(&store);
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let xi = g.param(x);
        let a = ln.forward(g, xi)?;
        let sa = weighted_sum(g, a, 1);
        let yi = g.param(y);
        let b = gn.forward(g, yi)?;
        let sb = weighted_sum(g, b, 2);
        g.add(sa, sb)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn attention_all_masks() {
    for mask in [AttnMask::Full, AttnMask::Causal, AttnMask::SelfOnly] {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut r);
        let x = store.add("x", Tensor::randn(&[5, 8], 1.0, &mut r));
        let ids = all_ids(&store);
        let rep = grad_check(&mut store, &ids, 1e-5, |g| {
            let xi = g.param(x);
            let y = mha.forward(g, xi, mask)?;
            Ok(weighted_sum(g, y, 12))
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{mask:?}: {rep:?}");
    }
}

#[test]
fn transformer_block_embedding_and_expert_heads() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 6, 8, 1.0, &mut r);
    let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, &mut r);
    let heads = ExpertHeads::new(&mut store, "heads", 3, 8, 4, &mut r);
    let ids = all_ids(&store);
    let tokens = [0usize, 5, 2, 2, 1];
    let route = [0usize, 2, 1, 2, 0];
    let targets = [Some(1), None, Some(3), Some(0), Some(2)];
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let x = emb.forward(g, &tokens)?;
        let h = block.forward(g, x, AttnMask::Full)?;
        let logits = heads.forward(g, h, &route)?;
        g.cross_entropy(logits, &targets)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn reindex_concat_broadcast_losses() {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[2, 3, 2], 1.0, &mut r));
    let v = store.add("v", Tensor::randn(&[3], 1.0, &mut r));
    let t = store.add("t", Tensor::randn(&[4, 5], 1.0, &mut r));
    let ids = all_ids(&store);
    let target = Tensor::randn(&[6, 5], 1.0, &mut r);
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let ai = g.param(a);
        let vi = g.param(v);
        let b = g.broadcast(vi, 3, 2)?;
        let c = g.concat(&[ai, b])?;
        let rows = g.chw_to_rows(c)?;
        let back = g.rows_to_chw(rows, 3, 2)?;
        let s1 = weighted_sum(g, back, 3);
        let ti = g.param(t);
        let picked = g.gather_rows(ti, &[3, 0, 3, 1, 2, 2])?;
        let tc = g.constant(target.clone());
        let l1 = g.mean_sq(picked, tc)?;
        let l2 = g.mean_abs(picked, tc)?;
        let l2 = g.scale(l2, 0.5);
        let s = g.add(s1, l1)?;
        g.add(s, l2)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

/// A one-layer conv classifier on a fixed 4×4 input with per-pixel cross-entropy.
#[test]
fn conv_net_cross_entropy_on_4x4() {
    let mut r = rng(19);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 1, &mut r);
    let input = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
    let targets: Vec<Option<usize>> = (0..16).map(|i| Some(i % 3)).collect();
    let ids = all_ids(&store);
    let rep = grad_check(&mut store, &ids, 1e-5, |g| {
        let x = g.constant(input.clone());
        let y = conv.forward(g, x)?;
        let rows = g.chw_to_rows(y)?;
        g.cross_entropy(rows, &targets)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
}

#[test]
fn attention_rows_are_stochastic() {
    let mut r = rng(23);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 128, 4, &mut r);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::randn(&[8, 128], 1.0, &mut r));
    let q = mha.query.forward(&mut g, x).unwrap();
    let k = mha.key.forward(&mut g, x).unwrap();
    let v = mha.value.forward(&mut g, x).unwrap();
    let a = g.attention(q, k, v, 4, AttnMask::Full).unwrap();
    let probs = g.attention_probs(a).unwrap();
    for row in probs.chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_single_token_returns_value_projection() {
    let mut r = rng(29);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut r);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::randn(&[1, 8], 1.0, &mut r));
    let y = mha.forward(&mut g, x, AttnMask::Full).unwrap();
    let v = mha.value.forward(&mut g, x).unwrap();
    let expected = mha.out.forward(&mut g, v).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expected)) < 1e-12);
}

#[test]
fn attention_equal_tokens_give_equal_outputs() {
    let mut r = rng(31);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut r);
    let tok = Tensor::randn(&[8], 1.0, &mut r);
    let x = Tensor::from_fn(&[6, 8], |i| tok.data()[i % 8]);
    let mut g = Graph::new(&store);
    let xi = g.constant(x);
    let y = mha.forward(&mut g, xi, AttnMask::Full).unwrap();
    let out = g.value(y);
    for n in 1..6 {
        for (a, b) in out.row(0).iter().zip(out.row(n)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_bad_head_count() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[3, 6]));
    assert!(g.attention(x, x, x, 4, AttnMask::Full).is_err());
}

#[test]
fn softmax_and_matching_cross_entropy() {
    let logits = [3.0, -1.0, 0.5, 100.0, 0.0, -100.0];
    let p = figuregen::nn::softmax_rows(&logits, 3);
    for row in p.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap());
    let ce = g.cross_entropy(l, &[Some(0)]).unwrap();
    assert!(g.value(ce).item() < 1e-20);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(37);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 3, 5, 3, 2, &mut r);
    let x = Tensor::randn(&[3, 8, 4], 1.0, &mut r);
    let run = || {
        let mut g = Graph::new(&store);
        let xi = g.constant(x.clone());
        let y = conv.forward(&mut g, xi).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
