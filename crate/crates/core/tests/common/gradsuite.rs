//! Finite-difference checks over the whole layer vocabulary and miniature
//! copies of every model, returning the worst relative error of each case.

use figuregen::grid::LabelGrid;
use figuregen::indexnet::{ArBaseline, ArConfig, IndexExample, IndexNet, IndexNetConfig};
use figuregen::nn::graph::AttnMask;
use figuregen::nn::layers::{Conv2d, Embedding, ExpertHeads, GroupNorm, LayerNorm, Linear, MultiHeadAttention, TransformerBlock, Upsample2x};
use figuregen::nn::{grad_check, GradCheck, Graph, NodeId, ParamId, ParamStore, Tensor};
use figuregen::predictor::{AttributePredictor, PredictorConfig, PredictorExample};
use figuregen::sampler::{ConditionTokens, MoeSampler, SamplerConfig};
use figuregen::stage1::{PoseToParsing, Stage1Config};
use figuregen::synth::{one_hot, AttributeSet, ParsingMap, TextureKind};
use figuregen::vq::{HierVq, Level, TokenGrid, VqConfig, VqExample, MASK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Case = (String, f64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

/// Move every parameter off zero so no ReLU sits exactly on its kink.
fn randomize(store: &mut ParamStore, std: f64, seed: u64, only_bias: bool) {
    let mut r = rng(seed);
    for id in ids(store) {
        if only_bias && !store.param(id).name.ends_with(".bias") {
            continue;
        }
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, std, &mut r);
    }
}

fn layers() -> Vec<Case> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        let mut r = rng(stride as u64);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, stride, &mut r);
        let x = store.add("x", Tensor::randn(&[3, 6, 5], 1.0, &mut r));
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
            let xi = g.param(x);
            let y = conv.forward(g, xi)?;
            Ok(weighted_sum(g, y, 9))
        })
        .unwrap();
        out.push((format!("conv2d stride {stride}"), rep.max_rel_error));
    }
    {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let up = Upsample2x::new(&mut store, "up", 3, 2, &mut r);
        let x = store.add("x", Tensor::randn(&[3, 3, 2], 1.0, &mut r));
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
            let xi = g.param(x);
            let y = up.forward(g, xi)?;
            Ok(weighted_sum(g, y, 4))
        })
        .unwrap();
        out.push(("transposed conv 2x".into(), rep.max_rel_error));
    }
    {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 5, 7, &mut r);
        let l2 = Linear::new(&mut store, "l2", 7, 3, &mut r);
        let x = store.add("x", Tensor::randn(&[4, 5], 1.0, &mut r));
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
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
        out.push(("linear / relu / gelu / sigmoid".into(), rep.max_rel_error));
    }
    {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        for id in ids(&store) {
            let t = store.value(id).clone();
            *store.value_mut(id) = Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.3 * ((i as f64) * 1.7).sin());
        }
        let x = store.add("x", Tensor::randn(&[3, 6], 1.0, &mut r));
        let y = store.add("y", Tensor::randn(&[4, 3, 2], 1.0, &mut r));
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
            let xi = g.param(x);
            let a = ln.forward(g, xi)?;
            let sa = weighted_sum(g, a, 1);
            let yi = g.param(y);
            let b = gn.forward(g, yi)?;
            let sb = weighted_sum(g, b, 2);
            g.add(sa, sb)
        })
        .unwrap();
        out.push(("layer norm / group norm".into(), rep.max_rel_error));
    }
    for mask in [AttnMask::Full, AttnMask::Causal, AttnMask::SelfOnly] {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut r);
        let x = store.add("x", Tensor::randn(&[5, 8], 1.0, &mut r));
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
            let xi = g.param(x);
            let y = mha.forward(g, xi, mask)?;
            Ok(weighted_sum(g, y, 12))
        })
        .unwrap();
        out.push((format!("attention {mask:?}"), rep.max_rel_error));
    }
    {
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", 6, 8, 1.0, &mut r);
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, &mut r);
        let heads = ExpertHeads::new(&mut store, "heads", 3, 8, 4, &mut r);
        let all = ids(&store);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
            let x = emb.forward(g, &[0, 5, 2, 2, 1])?;
            let h = block.forward(g, x, AttnMask::Full)?;
            let logits = heads.forward(g, h, &[0, 2, 1, 2, 0])?;
            g.cross_entropy(logits, &[Some(1), None, Some(3), Some(0), Some(2)])
        })
        .unwrap();
        out.push(("embedding / transformer block / expert heads / cross-entropy".into(), rep.max_rel_error));
    }
    {
        let mut r = rng(17);
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::randn(&[2, 3, 2], 1.0, &mut r));
        let v = store.add("v", Tensor::randn(&[3], 1.0, &mut r));
        let t = store.add("t", Tensor::randn(&[4, 5], 1.0, &mut r));
        let all = ids(&store);
        let target = Tensor::randn(&[6, 5], 1.0, &mut r);
        let rep = grad_check(&mut store, &all, 1e-5, |g| {
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
        out.push(("broadcast / concat / reshape / gather / losses".into(), rep.max_rel_error));
    }
    out
}

fn stage1_mini() -> Case {
    let config = Stage1Config { embed_dim: 2, shape_dim: 3, widths: vec![3, 4], out_width: 3 };
    let mut m = PoseToParsing::new(config, 5).unwrap();
    randomize(m.store_mut(), 0.1, 6, true);
    let mut r = rng(6);
    let pose = one_hot(&LabelGrid::new(8, 4, (0..32).map(|_| r.random_range(0..7)).collect()).unwrap(), 7);
    let target = LabelGrid::new(8, 4, (0..32).map(|_| r.random_range(0..6)).collect()).unwrap();
    let net = m.clone();
    let all = ids(m.store());
    let rep = GradCheck::new(1e-5).run(m.store_mut(), &all, |g| net.loss_on(g, &pose, [2, 1, 0], &target)).unwrap();
    ("miniature pose-to-parsing".into(), rep.max_rel_error)
}

pub fn vq_example() -> VqExample {
    let mut labels = vec![3u8; 128];
    labels.extend(vec![4u8; 128]);
    for r in 0..16 {
        labels[r * 16] = 2;
    }
    let parsing = ParsingMap::new(LabelGrid::new(16, 16, labels).unwrap()).unwrap();
    let attrs = AttributeSet { sleeve_length: 0, lower_length: 1, neckline: 0, upper_texture: 2, lower_texture: 3 };
    VqExample::new(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(4)), &parsing, &attrs).unwrap()
}

/// Each loss term against the parameters it trains (the straight-through
/// path is not a finite-difference gradient by construction).
pub fn vq_mini(level: Level) -> Vec<Case> {
    let mut model = HierVq::new(VqConfig { c_z: 4, k_top: 3, k_bot: 3, partitions: 5, width: 4, beta: 0.25, shared_codebook: false }, 11).unwrap();
    model.freeze_top();
    randomize(model.store_mut(), 0.1, 12, true);
    let ex = vq_example();
    let check = GradCheck::new(1e-5).max_entries(6);
    let prefix = |p: &str| model.store().ids_with_prefix(p);
    let (enc, book) = match level {
        Level::Top => (prefix("vq.e_top."), model.codebook_id(Level::Top)),
        Level::Bottom => (prefix("vq.e_bot."), model.codebook_id(Level::Bottom)),
    };
    let mut dec = prefix("vq.d_bot.");
    if level == Level::Top {
        dec.extend(prefix("vq.d_top."));
    }
    let m = model.clone();
    let mut store = model.store().clone();
    let name = format!("{level:?}").to_lowercase();
    vec![
        (format!("miniature VQ {name}: decoder / total"), check.run(&mut store, &dec, |g| Ok(m.stage_loss(g, level, &ex)?.total)).unwrap().max_rel_error),
        (format!("miniature VQ {name}: codebook term"), GradCheck::new(1e-5).run(&mut store, &[book], |g| Ok(m.stage_loss(g, level, &ex)?.codebook)).unwrap().max_rel_error),
        (format!("miniature VQ {name}: commitment term"), check.run(&mut store, &enc, |g| Ok(m.stage_loss(g, level, &ex)?.commitment)).unwrap().max_rel_error),
    ]
}

fn sampler_mini() -> Case {
    let config = SamplerConfig { grid_h: 2, grid_w: 2, entries: 3, dim: 4, heads: 2, blocks: 1, hidden: 6, ..SamplerConfig::default() };
    let mut s = MoeSampler::new(config, 8).unwrap();
    randomize(s.store_mut(), 0.5, 8, false);
    let cond = ConditionTokens { seg: LabelGrid::new(2, 2, vec![0, 3, 4, 2]).unwrap(), tex: LabelGrid::new(2, 2, vec![0, 2, 4, 0]).unwrap() };
    let target = TokenGrid { height: 2, width: 2, indices: vec![1, 2, 0, 2], textures: cond.tex.data().to_vec() };
    let mut input = target.clone();
    input.indices[1..].iter_mut().for_each(|i| *i = MASK);
    let net = s.clone();
    let all = ids(s.store());
    let rep = GradCheck::new(1e-5).run(s.store_mut(), &all, |g| net.loss(g, &input, &target, &cond)).unwrap();
    ("miniature MoE sampler".into(), rep.max_rel_error)
}

fn index_example(r: &mut ChaCha8Rng, c_z: usize, entries: usize, h: usize, w: usize) -> IndexExample {
    let feat_top = Tensor::randn(&[c_z, h, w], 1.0, r);
    let indices = (0..h * w).map(|_| r.random_range(0..entries as i64)).collect();
    let textures = (0..h * w).map(|_| r.random_range(0..5)).collect();
    IndexExample { feat_top, target: TokenGrid { height: h, width: w, indices, textures } }
}

fn indexnet_mini() -> Vec<Case> {
    let mut r = rng(5);
    let mut net = IndexNet::new(IndexNetConfig { c_z: 3, width: 3, entries: 3, ..IndexNetConfig::default() }, 5).unwrap();
    randomize(net.store_mut(), 0.1, 5, true);
    let ex = index_example(&mut r, 3, 3, 4, 2);
    let model = net.clone();
    let all = ids(net.store());
    let ff = GradCheck::new(1e-5).run(net.store_mut(), &all, |g| model.loss(g, &ex)).unwrap().max_rel_error;

    let config = ArConfig { c_z: 3, grid_h: 2, grid_w: 2, entries: 3, dim: 4, heads: 2, blocks: 1, hidden: 6, ..ArConfig::default() };
    let mut ar = ArBaseline::new(config, 6).unwrap();
    randomize(ar.store_mut(), 0.5, 6, false);
    let ex = index_example(&mut r, 3, 3, 2, 2);
    let model = ar.clone();
    let all = ids(ar.store());
    let arr = GradCheck::new(1e-5).run(ar.store_mut(), &all, |g| model.loss(g, &ex)).unwrap().max_rel_error;
    vec![("miniature index net".into(), ff), ("miniature autoregressive baseline".into(), arr)]
}

fn predictor_mini() -> Case {
    let mut p = AttributePredictor::new(PredictorConfig { height: 16, width: 16, widths: [2, 3, 3, 3] }, 3).unwrap();
    randomize(p.store_mut(), 0.1, 3, true);
    let mut r = rng(3);
    let mut input = Tensor::randn(&[4, 16, 16], 1.0, &mut r);
    for i in 0..256 {
        input.data_mut()[3 * 256 + i] = f64::from(u8::from(i % 3 != 0));
    }
    let ex = PredictorExample { input, texture: TextureKind::Plaid };
    let model = p.clone();
    let all = ids(p.store());
    let rep = GradCheck::new(1e-5).run(p.store_mut(), &all, |g| model.loss(g, &ex)).unwrap();
    ("miniature texture predictor".into(), rep.max_rel_error)
}

pub fn run_all() -> Vec<Case> {
    let mut out = layers();
    out.push(stage1_mini());
    out.extend(vq_mini(Level::Top));
    out.extend(vq_mini(Level::Bottom));
    out.push(sampler_mini());
    out.extend(indexnet_mini());
    out.push(predictor_mini());
    out
}
