use std::sync::OnceLock;

use figuregen::error::Error;
use figuregen::grid::LabelGrid;
use figuregen::pipeline::ablation::{run_ablation, AblationName};
use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::generate::{derive_seed, image_digest, Models, ParsingSource, Provenance, STAGE1_FILE};
use figuregen::pipeline::train::train_models;
use figuregen::synth::{class, gen_sample, AttributeSpec, Corpus, ParsingMap};
use figuregen::textattr::Lexicon;

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.corpus.size = 20;
    cfg.epochs = figuregen::pipeline::config::Epochs { stage1: 1, vq_top: 1, vq_bottom: 1, sampler: 1, indexnet: 1, predictor: 1 };
    cfg
}

fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = tiny();
        let corpus = Corpus::synthesize(cfg.corpus.size, 7, cfg.corpus.texture_weights).unwrap();
        train_models(&cfg, &corpus, Lexicon::shipped()).unwrap().0
    })
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    for cfg in [PipelineConfig::default(), PipelineConfig::desk(), PipelineConfig::default().without_texture_experts()] {
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
    let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::default().to_json()).unwrap();
    v["surprise"] = 1.into();
    assert!(PipelineConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn validation_catches_inconsistent_stages() {
    let mut c = PipelineConfig::default();
    c.sampler.entries += 1;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = PipelineConfig::default();
    c.width = 40;
    assert!(c.validate().is_err());
    let mut c = PipelineConfig::default();
    c.epochs.vq_bottom = 0;
    assert!(c.validate().is_err());
}

#[test]
fn ablation_names() {
    assert_eq!("hier".parse::<AblationName>().unwrap(), AblationName::Hier);
    assert_eq!("ffpred".parse::<AblationName>().unwrap(), AblationName::Ffpred);
    let corpus = Corpus::synthesize(20, 0, [0.25; 4]).unwrap();
    match run_ablation("dropout", &tiny(), &corpus) {
        Err(Error::UnknownAblation(n)) => assert_eq!(n, "dropout"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn derived_seeds_separate_streams() {
    assert_ne!(derive_seed(5, "sampler"), derive_seed(5, "other"));
    assert_ne!(derive_seed(5, "sampler"), derive_seed(6, "sampler"));
    assert_eq!(derive_seed(5, "sampler"), derive_seed(5, "sampler"));
}

#[test]
fn provenance_replays_bit_exactly() {
    let m = models();
    let pose = gen_sample(42, &AttributeSpec::default()).unwrap().pose;
    let g = m.generate(&pose, "long sleeves, trousers, v neck", "plaid shirt, solid trousers", 5, None).unwrap();
    assert_eq!(g.provenance.attributes.sleeve_length, 2);
    assert_eq!((g.provenance.attributes.upper_texture, g.provenance.attributes.lower_texture), (3, 1));
    assert_eq!(g.provenance.parsing_source, ParsingSource::Stage1);
    assert_eq!(g.provenance.image_sha256, image_digest(&g.image));

    let json = serde_json::to_string(&g.provenance).unwrap();
    let back: Provenance = serde_json::from_str(&json).unwrap();
    let again = m.regenerate(&back).unwrap();
    assert_eq!(again.image.data(), g.image.data());
    assert_eq!(again.parsing, g.parsing);

    let mut forged = back.clone();
    forged.image_sha256 = "00".repeat(32);
    assert!(m.regenerate(&forged).is_err());
    let mut stale = back;
    stale.models.vq = "ff".repeat(32);
    assert!(matches!(m.regenerate(&stale), Err(Error::Checkpoint(_))));
}

#[test]
fn parsing_override_is_recorded_and_replayed() {
    let m = models();
    let s = gen_sample(9, &AttributeSpec::default()).unwrap();
    // Palette edit: paint the bottom rows of the figure as lower garment.
    let mut data = s.parsing.grid().data().to_vec();
    for v in data.iter_mut().skip(48 * 32).take(8 * 32) {
        if *v != class::BACKGROUND {
            *v = class::LOWER;
        }
    }
    let edited = ParsingMap::new(LabelGrid::new(64, 32, data).unwrap()).unwrap();
    let g = m.generate(&s.pose, "short sleeves", "dots", 3, Some(edited.clone())).unwrap();
    assert_eq!(g.parsing, edited);
    assert_eq!(g.provenance.parsing_source, ParsingSource::Override);
    assert_eq!(m.regenerate(&g.provenance).unwrap().image.data(), g.image.data());

    let wrong = ParsingMap::new(LabelGrid::new(32, 32, vec![0; 32 * 32]).unwrap()).unwrap();
    assert!(m.generate(&s.pose, "short sleeves", "dots", 3, Some(wrong)).is_err());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let m = models();
    let pose = gen_sample(1, &AttributeSpec::default()).unwrap().pose;
    let a = m.generate(&pose, "sleeveless, shorts", "stripes", 11, None).unwrap();
    let b = m.generate(&pose, "sleeveless, shorts", "stripes", 11, None).unwrap();
    assert_eq!(a, b);
    assert!(matches!(m.generate(&pose, "the the", "stripes", 11, None), Err(Error::NoContentTokens)));
}

#[test]
fn checkpoints_save_load_and_name_missing_files() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    match Models::load(dir.path(), Lexicon::shipped()) {
        Err(Error::MissingCheckpoint(p)) => assert_eq!(p, dir.path().join(STAGE1_FILE)),
        other => panic!("{other:?}"),
    }
    m.save(dir.path()).unwrap();
    let loaded = Models::load(dir.path(), Lexicon::shipped()).unwrap();
    assert_eq!(loaded.digests(), m.digests());

    let pose = gen_sample(2, &AttributeSpec::default()).unwrap().pose;
    let g = m.generate(&pose, "long sleeves", "plaid", 4, None).unwrap();
    assert_eq!(loaded.regenerate(&g.provenance).unwrap().image.data(), g.image.data());
}
