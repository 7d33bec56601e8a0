use figuregen::indexnet::{tile_examples, tile_of, ArBaseline, ArConfig, IndexExample, IndexNet, IndexNetConfig};
use figuregen::nn::train::TrainOptions;
use figuregen::nn::{Checkpoint, GradCheck, Graph, Tensor};
use figuregen::vq::TokenGrid;
use figuregen::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> IndexNetConfig {
    IndexNetConfig { c_z: 8, width: 16, entries: 6, ..IndexNetConfig::default() }
}

fn small_ar() -> ArConfig {
    ArConfig { c_z: 8, entries: 6, dim: 16, hidden: 32, ..ArConfig::default() }
}

/// Random features; the target index at each position is the argmax of its
/// first `entries` feature channels, so the mapping is learnable.
fn example(rng: &mut ChaCha8Rng, c_z: usize, entries: usize, h: usize, w: usize) -> IndexExample {
    let feat_top = Tensor::randn(&[c_z, h, w], 1.0, rng);
    let hw = h * w;
    let indices = (0..hw)
        .map(|p| {
            let mut best = 0;
            for ch in 1..entries {
                if feat_top.data()[ch * hw + p] > feat_top.data()[best * hw + p] {
                    best = ch;
                }
            }
            best as i64
        })
        .collect();
    let textures = (0..hw).map(|_| rng.random_range(0..5)).collect();
    IndexExample { feat_top, target: TokenGrid { height: h, width: w, indices, textures } }
}

fn data(n: usize, seed: u64) -> Vec<IndexExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| example(&mut rng, 8, 6, 4, 2)).collect()
}

fn trained_net(seed: u64) -> IndexNet {
    let mut net = IndexNet::new(small_config(), seed).unwrap();
    net.mark_trained();
    net
}

#[test]
fn untrained_models_refuse_to_predict() {
    let ex = &data(1, 1)[0];
    let net = IndexNet::new(small_config(), 1).unwrap();
    assert!(matches!(net.predict(&ex.feat_top, &ex.tex_mask()), Err(Error::Misuse(_))));
    let ar = ArBaseline::new(small_ar(), 1).unwrap();
    assert!(matches!(ar.sample(&ex.feat_top, &ex.tex_mask(), 0), Err(Error::Misuse(_))));
}

#[test]
fn prediction_is_one_deterministic_pass() {
    let net = trained_net(2);
    let ex = &data(1, 2)[0];
    let a = net.predict(&ex.feat_top, &ex.tex_mask()).unwrap();
    assert_eq!(net.forward_count(), 1);
    let b = net.predict(&ex.feat_top, &ex.tex_mask()).unwrap();
    assert_eq!(net.forward_count(), 2);
    assert_eq!(a, b);
    assert!(a.is_complete() && a.indices.iter().all(|&i| (0..6).contains(&i)));
    assert_eq!(a.textures, ex.target.textures);
    let s1 = net.predict_sampled(&ex.feat_top, &ex.tex_mask(), 4, 1.0).unwrap();
    assert_eq!(s1, net.predict_sampled(&ex.feat_top, &ex.tex_mask(), 4, 1.0).unwrap());
}

#[test]
fn absent_texture_heads_do_not_change_predictions() {
    let net = trained_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ex in data(10, 3) {
        let mut other = net.clone();
        let (w, b) = other.expert_params();
        for id in [w, b] {
            let per = other.store().value(id).len() / 5;
            for e in (0..5u8).filter(|e| !ex.target.textures.contains(e)) {
                for x in &mut other.store_mut().value_mut(id).data_mut()[e as usize * per..(e as usize + 1) * per] {
                    *x = rng.random_range(-5.0..5.0);
                }
            }
        }
        assert_eq!(net.predict(&ex.feat_top, &ex.tex_mask()).unwrap(), other.predict(&ex.feat_top, &ex.tex_mask()).unwrap());
    }
}

#[test]
fn position_losses_reach_only_their_own_head() {
    let net = trained_net(4);
    let ex = &data(1, 4)[0];
    let (w, b) = net.expert_params();
    for pos in 0..8 {
        let mut g = Graph::new(net.store());
        let loss = net.loss_at(&mut g, ex, pos).unwrap();
        let grads = g.backward(loss).unwrap();
        let own = ex.target.textures[pos] as usize;
        for id in [w, b] {
            let gr = grads.param(id).unwrap();
            let per = gr.len() / 5;
            for e in 0..5 {
                let touched = gr.data()[e * per..(e + 1) * per].iter().any(|&x| x != 0.0);
                assert_eq!(touched, e == own, "position {pos}, head {e}");
            }
        }
    }
}

#[test]
fn miniature_index_net_gradients_match_finite_differences() {
    let config = IndexNetConfig { c_z: 3, width: 3, entries: 3, ..IndexNetConfig::default() };
    let mut net = IndexNet::new(config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in net.store().ids().collect::<Vec<_>>() {
        if net.store().param(id).name.ends_with(".bias") {
            let shape = net.store().value(id).shape().to_vec();
            *net.store_mut().value_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);
        }
    }
    let ex = example(&mut rng, 3, 3, 4, 2);
    let model = net.clone();
    let ids: Vec<_> = net.store().ids().collect();
    let report = GradCheck::new(1e-5).run(net.store_mut(), &ids, |g| model.loss(g, &ex)).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn miniature_ar_baseline_gradients_match_finite_differences() {
    let config = ArConfig { c_z: 3, grid_h: 2, grid_w: 2, entries: 3, dim: 4, heads: 2, blocks: 1, hidden: 6, ..ArConfig::default() };
    let mut ar = ArBaseline::new(config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in ar.store().ids().collect::<Vec<_>>() {
        let shape = ar.store().value(id).shape().to_vec();
        *ar.store_mut().value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    let ex = example(&mut rng, 3, 3, 2, 2);
    let model = ar.clone();
    let ids: Vec<_> = ar.store().ids().collect();
    let report = GradCheck::new(1e-5).run(ar.store_mut(), &ids, |g| model.loss(g, &ex)).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn ar_sampling_takes_one_pass_per_position_and_is_seeded() {
    let mut ar = ArBaseline::new(small_ar(), 7).unwrap();
    ar.mark_trained();
    let ex = &data(1, 7)[0];
    let a = ar.sample(&ex.feat_top, &ex.tex_mask(), 9).unwrap();
    assert_eq!(ar.forward_count(), 8);
    assert_eq!(a, ar.sample(&ex.feat_top, &ex.tex_mask(), 9).unwrap());
    assert!(a.is_complete() && a.indices.iter().all(|&i| (0..6).contains(&i)));
}

#[test]
fn ar_logits_only_see_earlier_tokens() {
    let ar = ArBaseline::new(small_ar(), 8).unwrap();
    let ex = &data(1, 8)[0];
    let base = ar.logits(&ex.feat_top, &ex.target).unwrap();
    for j in 0..8 {
        let mut changed = ex.target.clone();
        changed.indices[j] = (changed.indices[j] + 1) % 6;
        let l = ar.logits(&ex.feat_top, &changed).unwrap();
        for p in 0..8 {
            let same = base.row(p) == l.row(p);
            assert_eq!(same, p <= j, "token {j}, position {p}");
        }
    }
}

#[test]
fn overfits_one_sample_exactly() {
    let d = data(1, 9);
    let mut net = IndexNet::new(small_config(), 9).unwrap();
    net.train(&d, TrainOptions { epochs: 200, batch_size: 1, lr: 1e-3, seed: 0 }).unwrap();
    assert_eq!(net.accuracy(&d).unwrap().overall, 1.0);
}

#[test]
fn loss_decreases_and_accuracy_is_reported_per_texture() {
    let d = data(64, 10);
    let mut net = IndexNet::new(small_config(), 10).unwrap();
    let log = net.train(&d, TrainOptions { epochs: 3, batch_size: 8, lr: 1e-3, seed: 1 }).unwrap();
    let l = &log.epoch_losses;
    assert!(l[1] < l[0] && l[2] < l[1], "{l:?}");
    let acc = net.accuracy(&data(20, 11)).unwrap();
    assert_eq!(acc.per_texture.len(), 5);
    assert!(acc.per_texture.iter().all(|a| a.is_some_and(|a| (0.0..=1.0).contains(&a))));

    let mut ar = ArBaseline::new(small_ar(), 10).unwrap();
    let log = ar.train(&d, TrainOptions { epochs: 3, batch_size: 8, lr: 1e-3, seed: 1 }).unwrap();
    let l = &log.epoch_losses;
    assert!(l[1] < l[0] && l[2] < l[1], "{l:?}");
}

#[test]
fn tiling_round_trips() {
    let d = data(4, 12);
    let refs: Vec<&IndexExample> = d.iter().collect();
    let big = tile_examples(&refs, 2, 2).unwrap();
    assert_eq!(big.feat_top.shape(), &[8, 8, 4]);
    for (t, ex) in d.iter().enumerate() {
        assert_eq!(tile_of(&big.target, 4, 2, t / 2, t % 2), ex.target);
    }
    // Feature at tile (1,0), local (3,1), channel 5.
    assert_eq!(big.feat_top.data()[(5 * 8 + 7) * 4 + 1], d[2].feat_top.data()[(5 * 4 + 3) * 2 + 1]);
    assert!(tile_examples(&refs[..3], 2, 2).is_err());
}

#[test]
fn index_net_runs_on_an_enlarged_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ex = example(&mut rng, 8, 6, 16, 8);
    let out = trained_net(13).predict(&ex.feat_top, &ex.tex_mask()).unwrap();
    assert_eq!((out.height, out.width), (16, 8));
}

#[test]
fn checkpoints_round_trip() {
    let net = trained_net(14);
    let back = IndexNet::from_checkpoint(&Checkpoint::from_bytes(&net.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
    let ex = &data(1, 14)[0];
    assert_eq!(net.predict(&ex.feat_top, &ex.tex_mask()).unwrap(), back.predict(&ex.feat_top, &ex.tex_mask()).unwrap());
    let mut ar = ArBaseline::new(small_ar(), 14).unwrap();
    ar.mark_trained();
    let back = ArBaseline::from_checkpoint(&Checkpoint::from_bytes(&ar.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(ar.sample(&ex.feat_top, &ex.tex_mask(), 1).unwrap(), back.sample(&ex.feat_top, &ex.tex_mask(), 1).unwrap());
}
