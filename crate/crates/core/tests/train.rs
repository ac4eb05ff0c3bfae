use rand::seq::SliceRandom;

use tapf::checkpoint::Precision;
use tapf::fusion::FusionMethod;
use tapf::lab::{self, LabConfig};
use tapf::params::Component;
use tapf::probe::{self, ProbeDataset};
use tapf::rng::rng_for;
use tapf::train::*;
use tapf::Error;

fn desk(steps: u64, method: FusionMethod) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.steps = steps;
    cfg.train.log_wall_clock = false;
    cfg.fusion.method = method;
    cfg
}

fn stream(cfg: &RunConfig, seed: u64) -> SyntheticData {
    SyntheticData {
        seed,
        params: cfg.data.clone(),
    }
}

/// Eight seed-pinned clips repeated every step, so step 1 and step 200 see
/// the same batch.
#[test]
fn reconstruction_improves_over_two_hundred_steps() {
    let cfg = desk(200, FusionMethod::Tapf);
    let fixed = InMemoryData(stream(&cfg, 0).batch(0, cfg.train.batch_size).unwrap());
    let out = train_run(&cfg, &fixed).unwrap();
    assert!(out.aborted.is_none());
    let (first, last) = (out.records[0].l_recon, out.records[199].l_recon);
    assert!(last < first, "step 200 {last} vs step 1 {first}");
}

#[test]
fn zero_steps_leave_the_initialisation() {
    let cfg = desk(0, FusionMethod::Tapf);
    let out = train_run(&cfg, &stream(&cfg, 0)).unwrap();
    let fresh = TrainState::new(Model::init(&cfg).unwrap());
    assert!(out.records.is_empty());
    assert_eq!(out.state.to_checkpoint(), fresh.to_checkpoint());
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let cfg = desk(6, FusionMethod::Contrastive);
    let a = train_run(&cfg, &stream(&cfg, 3)).unwrap();
    let b = train_run(&cfg, &stream(&cfg, 3)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(
        a.state.to_checkpoint().encode(Precision::F64).unwrap(),
        b.state.to_checkpoint().encode(Precision::F64).unwrap()
    );
}

#[test]
fn resuming_from_a_checkpoint_replays_the_next_step() {
    let cfg = desk(4, FusionMethod::Tapf);
    let data = stream(&cfg, 5);
    let full = train_run(&cfg, &data).unwrap();
    let head = train_run(&desk(3, FusionMethod::Tapf), &data).unwrap();
    let bytes = head.state.to_checkpoint().encode(Precision::F64).unwrap();
    let ck = tapf::checkpoint::Checkpoint::decode(&bytes).unwrap();
    let resumed = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.step, 3);
    let tail = train_from(resumed, &cfg, &data, 1);
    assert_eq!(tail.records[0], full.records[3]);
}

#[test]
fn fusion_head_is_idle_without_fusion() {
    let mut cfg = desk(12, FusionMethod::None);
    cfg.train.grad_every = 3;
    let out = train_run(&cfg, &stream(&cfg, 1)).unwrap();
    let heads: Vec<_> = out
        .trace
        .records
        .iter()
        .filter(|r| r.component == Component::FusionHead)
        .collect();
    assert!(!heads.is_empty());
    assert!(heads.iter().all(|r| r.grad_norm == 0.0));
    assert_eq!(out.trace.steps(), vec![1, 3, 6, 9, 12]);
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let mut cfg = desk(5, FusionMethod::Distillation);
    cfg.fusion.lambda_fusion = 120.0;
    let out = train_run(&cfg, &stream(&cfg, 2)).unwrap();
    let w = LossWeights::from_config(&cfg.train, &cfg.fusion);
    for r in &out.records {
        assert!((total_loss(&r.terms(), &w).unwrap() - r.l_total).abs() < 1e-9);
    }
}

#[test]
fn non_finite_input_stops_at_the_last_good_step() {
    let cfg = desk(5, FusionMethod::None);
    let mut clips = stream(&cfg, 0).batch(0, 2 * cfg.train.batch_size).unwrap();
    let n = clips.len();
    clips[n - 1].audio[10] = f64::NAN;
    let out = train_run(&cfg, &InMemoryData(clips)).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.state.step, 1);
    assert!(matches!(out.aborted, Some(Error::NonFiniteLoss { step: 2, .. })), "{:?}", out.aborted);
}

#[test]
fn step_log_round_trips() {
    let cfg = desk(3, FusionMethod::Tapf);
    let out = train_run(&cfg, &stream(&cfg, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.jsonl");
    write_step_log(&path, &out.records).unwrap();
    assert_eq!(read_step_log(&path).unwrap(), out.records);
    let line = std::fs::read_to_string(&path).unwrap();
    let mut keys: Vec<String> = serde_json::from_str::<serde_json::Value>(line.lines().next().unwrap())
        .unwrap()
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    keys.sort();
    assert_eq!(keys, ["l_commit", "l_fusion", "l_mel", "l_recon", "l_total", "ms", "step"]);
}

// ---------------------------------------------------------------------------
// Probe

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let cfg = desk(0, FusionMethod::None);
    let model = Model::init(&cfg).unwrap();
    let lab = LabConfig::default();
    let pairs = lab::clips(11, "probe.chance", lab.probe_clips, &cfg.data).unwrap();
    let data = ProbeDataset::from_model(&model, &pairs, cfg.data.n_classes).unwrap();
    let mut mean = 0.0;
    for seed in 0..5 {
        let mut labels = data.labels.clone();
        labels.shuffle(&mut rng_for(seed, "shuffle"));
        let shuffled = ProbeDataset::new(data.codes.clone(), labels, data.n_classes, data.level_sizes.clone()).unwrap();
        mean += probe::train_probe(&shuffled, &lab.probe, seed).unwrap().1 / 5.0;
    }
    assert!((mean - 0.125).abs() <= 0.05, "mean accuracy {mean}");
}

#[test]
fn trained_tokenizer_beats_a_random_one() {
    let cfg = desk(400, FusionMethod::None);
    let lab = LabConfig::default();
    let (mut trained, mut random) = (0.0, 0.0);
    for seed in 0..3 {
        trained += lab::run(&cfg, &lab, seed).unwrap().quality.accuracy / 3.0;
        let mut init = cfg.clone();
        init.train.seed = seed;
        let model = Model::init(&init).unwrap();
        random += lab::assess(&model, &init, &lab, seed).unwrap().accuracy / 3.0;
    }
    assert!(trained > random, "trained {trained} vs random {random}");
}

#[test]
fn probing_leaves_the_tokenizer_untouched() {
    let cfg = desk(2, FusionMethod::None);
    let out = train_run(&cfg, &stream(&cfg, 0)).unwrap();
    let before = out.state.to_checkpoint();
    let pairs = lab::clips(0, "probe.frozen", 32, &cfg.data).unwrap();
    let small = tapf::probe::ProbeConfig {
        steps: 20,
        ..Default::default()
    };
    let a = probe::probe_train_eval(&out.state.model, &pairs, cfg.data.n_classes, &small, 4).unwrap();
    let b = probe::probe_train_eval(&out.state.model, &pairs, cfg.data.n_classes, &small, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(out.state.to_checkpoint(), before);
}
