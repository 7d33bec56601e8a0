use figuregen::grid::LabelGrid;
use figuregen::nn::train::TrainOptions;
use figuregen::nn::{Checkpoint, GradCheck, Graph, Tensor};
use figuregen::stage1::{broadcast_concat, PoseToParsing, Stage1Config, Stage1Example};
use figuregen::synth::{gen_sample, one_hot, AttributeSpec, HEIGHT, WIDTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn example(seed: u64) -> Stage1Example {
    let g = gen_sample(seed, &AttributeSpec::default()).unwrap();
    Stage1Example { pose: g.pose, shape: g.attrs.shape(), target: g.parsing }
}

fn model() -> PoseToParsing {
    PoseToParsing::new(Stage1Config::default(), 3).unwrap()
}

#[test]
fn logits_cover_the_canvas_and_softmax_is_a_simplex() {
    let m = model();
    let ex = example(1);
    let logits = m.predict_logits(&ex.pose, ex.shape).unwrap();
    assert_eq!(logits.tensor().shape(), &[6, HEIGHT, WIDTH]);
    let p = logits.probabilities();
    let hw = HEIGHT * WIDTH;
    for pos in 0..hw {
        let s: f64 = (0..6).map(|c| p.data()[c * hw + pos]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_embedding_is_deterministic_and_attribute_sensitive() {
    let m = model();
    let a = m.embed_attributes([1, 0, 1]).unwrap();
    assert_eq!(a.shape(), &[64]);
    assert_eq!(a, m.embed_attributes([1, 0, 1]).unwrap());
    assert!(a.max_abs_diff(&m.embed_attributes([2, 0, 1]).unwrap()) > 1e-6);
    assert!(a.is_finite());
}

#[test]
fn zero_embedder_tables_give_zero_shape_vector() {
    let mut m = model();
    for id in m.store().ids_with_prefix("stage1.embed") {
        m.store_mut().value_mut(id).fill(0.0);
    }
    let v = m.embed_attributes([2, 1, 1]).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn out_of_range_shape_attribute_is_rejected() {
    let m = model();
    assert!(m.embed_attributes([3, 0, 0]).is_err());
    assert!(m.embed_attributes([0, 2, 0]).is_err());
    let ex = example(2);
    assert!(m.predict_logits(&ex.pose, [0, 0, 2]).is_err());
}

#[test]
fn broadcast_concat_appends_spatially_constant_channels() {
    let store = figuregen::nn::ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new(&store);
    let feat = g.input(Tensor::randn(&[32, 4, 2], 1.0, &mut rng));
    let f_shape = Tensor::randn(&[64], 1.0, &mut rng);
    let v = g.input(f_shape.clone());
    let out = broadcast_concat(&mut g, feat, v).unwrap();
    assert_eq!(g.shape(out), &[96, 4, 2]);
    let data = g.value(out).data();
    assert_eq!(&data[..256], g.value(feat).data());
    for c in 0..64 {
        let plane = &data[(32 + c) * 8..(33 + c) * 8];
        assert!(plane.iter().all(|&x| x == f_shape.data()[c]));
    }

    let one = g.input(Tensor::randn(&[5, 1, 1], 1.0, &mut rng));
    let cat = broadcast_concat(&mut g, one, v).unwrap();
    let mut want = g.value(one).data().to_vec();
    want.extend_from_slice(f_shape.data());
    assert_eq!(g.value(cat).data(), &want[..]);
}

#[test]
fn miniature_network_gradients_match_finite_differences() {
    let config = Stage1Config { embed_dim: 2, shape_dim: 3, widths: vec![3, 4], out_width: 3 };
    let mut m = PoseToParsing::new(config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Zero biases behind dead ReLUs would sit exactly on the kink.
    for id in m.store().ids().collect::<Vec<_>>() {
        if m.store().param(id).name.ends_with(".bias") {
            let n = m.store().value(id).len();
            *m.store_mut().value_mut(id) = Tensor::randn(&[n], 0.1, &mut rng);
        }
    }
    let pose = LabelGrid::new(8, 4, (0..32).map(|_| rng.random_range(0..7)).collect()).unwrap();
    let target = LabelGrid::new(8, 4, (0..32).map(|_| rng.random_range(0..6)).collect()).unwrap();
    let pose = one_hot(&pose, 7);
    let net = m.clone();
    let ids: Vec<_> = m.store().ids().collect();
    let report = GradCheck::new(1e-5)
        .run(m.store_mut(), &ids, |g| net.loss_on(g, &pose, [2, 1, 0], &target))
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn overfits_a_single_sample() {
    let mut m = model();
    let ex = example(7);
    let opts = TrainOptions { epochs: 300, batch_size: 1, lr: 1e-3, seed: 0 };
    m.train(std::slice::from_ref(&ex), opts).unwrap();
    let acc = m.pixel_accuracy(std::slice::from_ref(&ex)).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn loss_decreases_over_first_epochs_and_training_is_deterministic() {
    let data: Vec<_> = (0..48).map(example).collect();
    let opts = TrainOptions { epochs: 3, batch_size: 8, lr: 1e-3, seed: 9 };
    let mut a = model();
    let log = a.train(&data, opts).unwrap();
    let l = &log.epoch_losses;
    assert!(l[1] < l[0] && l[2] < l[1], "{l:?}");
    let mut b = model();
    b.train(&data, opts).unwrap();
    let ids: Vec<_> = a.store().ids().collect();
    assert_eq!(a.store().snapshot(&ids), b.store().snapshot(&ids));
}

#[test]
fn empty_corpus_is_an_error() {
    let opts = TrainOptions { epochs: 1, batch_size: 8, lr: 1e-3, seed: 0 };
    assert!(model().train(&[], opts).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = model();
    let bytes = m.to_checkpoint().to_bytes().unwrap();
    let back = PoseToParsing::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let ex = example(8);
    assert_eq!(m.predict_logits(&ex.pose, ex.shape).unwrap(), back.predict_logits(&ex.pose, ex.shape).unwrap());
}
