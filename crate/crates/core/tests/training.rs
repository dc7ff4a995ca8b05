use beamfuse_core::dataset::{Dataset, Manifest, SequenceEntry};
use beamfuse_core::labeling::{label_dataset, LabelConfig};
use beamfuse_core::model::Outputs;
use beamfuse_core::training::{
    adamw_config, gather, largest_remainder, multitask_loss, pos_weight, select_checkpoint, split_by_sequence,
    train_epoch, validate, BatchTargets, LossWeights, Plateau, Sample, TrainSettings,
};
use beamfuse_core::{FusionNet, LabelSet, ModelConfig, NormStats, RunConfig, Simulator, Snapshot, Variant};
use beamfuse_numerics::{AdamW, Graph, Tensor};
use proptest::prelude::*;

struct Fixture {
    cfg: RunConfig,
    ds: Dataset,
    labels: LabelSet,
}

fn fixture() -> Fixture {
    let mut cfg = RunConfig::default();
    cfg.sequences = 4;
    cfg.snapshots = 40;
    let sim = Simulator::new(&cfg).unwrap();
    let sequences: Vec<Vec<Snapshot>> = (0..4).map(|id| sim.sequence(id).unwrap()).collect();
    let entries = sequences
        .iter()
        .enumerate()
        .map(|(id, s)| SequenceEntry {
            id: id as u32,
            count: s.len(),
            file: format!("seq_{id}.bin"),
        })
        .collect();
    let ds = Dataset {
        manifest: Manifest::new(&cfg, entries),
        sequences,
    };
    let split = split_by_sequence(&[0, 1, 2, 3], [0.5, 0.25, 0.25], cfg.seed).unwrap();
    let labels = label_dataset(&ds, &split, &LabelConfig::from_run(&cfg)).unwrap();
    Fixture { cfg, ds, labels }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
    }
}

fn train_samples(f: &Fixture) -> Vec<Sample<'_>> {
    gather(&f.ds, &f.labels, &f.labels.split.train).unwrap()
}

fn net_for(samples: &[Sample], seed: u64) -> FusionNet {
    let snaps: Vec<&Snapshot> = samples.iter().map(|s| s.snap).collect();
    let stats = NormStats::from_train(&snaps).unwrap();
    FusionNet::new(small_model(), Variant::Fusion, stats, seed).unwrap()
}

fn settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        batch: 16,
        clip_norm: cfg.clip_norm as f32,
        seed: cfg.seed,
        n0_dbm: cfg.n0_dbm,
    }
}

fn weights_for(cfg: &RunConfig, samples: &[Sample]) -> LossWeights {
    let y: Vec<u8> = samples.iter().map(|s| s.y_blk).collect();
    LossWeights::new(cfg, &y).unwrap()
}

#[test]
fn largest_remainder_examples() {
    // quotas 7, 1.5, 1.5: the tie on .5 goes to the earlier bucket
    assert_eq!(largest_remainder(10, &[0.7, 0.15, 0.15]), vec![7, 2, 1]);
    assert_eq!(largest_remainder(12, &[0.7, 0.15, 0.15]), vec![8, 2, 2]);
    assert_eq!(largest_remainder(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
}

#[test]
fn split_sizes_and_errors() {
    let ids: Vec<u32> = (0..10).collect();
    let s = split_by_sequence(&ids, [0.7, 0.15, 0.15], 42).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
    assert_eq!(s, split_by_sequence(&ids, [0.7, 0.15, 0.15], 42).unwrap());
    assert!(split_by_sequence(&[0, 1], [0.7, 0.15, 0.15], 1).is_err());
    assert!(split_by_sequence(&ids, [0.7, 0.2, 0.2], 1).is_err());
    let three = split_by_sequence(&[4, 5, 6], [0.7, 0.15, 0.15], 1).unwrap();
    assert_eq!((three.train.len(), three.val.len(), three.test.len()), (1, 1, 1));
}

proptest! {
    #[test]
    fn splits_partition_the_ids(n in 3usize..40, seed in 0u64..10_000, a in 0.2f64..0.9) {
        let ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        let b = (1.0 - a) / 2.0;
        let s = split_by_sequence(&ids, [a, b, 1.0 - a - b], seed).unwrap();
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
    }

    #[test]
    fn checkpoint_selection_matches_a_scan(h in proptest::collection::vec(0u8..20, 1..30)) {
        let h: Vec<f64> = h.into_iter().map(f64::from).collect();
        let best = select_checkpoint(&h).unwrap();
        let min = h.iter().copied().fold(f64::INFINITY, f64::min);
        let first = h.iter().position(|&v| v == min).unwrap() + 1;
        prop_assert_eq!(best, first);
        prop_assert!(h.iter().all(|&v| v >= h[best - 1]));
    }
}

#[test]
fn checkpoint_selection_examples() {
    assert_eq!(select_checkpoint(&[3.0, 2.0, 2.0, 4.0]).unwrap(), 2);
    assert_eq!(select_checkpoint(&[5.0, 4.0, 3.0, 2.0]).unwrap(), 4);
    assert!(select_checkpoint(&[]).is_err());
}

#[test]
fn plateau_schedule() {
    let mut p = Plateau::new(1e-3, 0.5, 5, 1e-4, 1e-5);
    for k in 0..30 {
        assert_eq!(p.step(10.0 - k as f64), 1e-3);
    }

    let mut p = Plateau::new(1e-3, 0.5, 5, 1e-4, 1e-5);
    p.step(1.0);
    let lrs: Vec<f64> = (0..12).map(|_| p.step(1.0)).collect();
    assert!(lrs[..5].iter().all(|&lr| lr == 1e-3));
    assert_eq!(lrs[5], 5e-4, "first cut on the sixth flat epoch");
    assert!(lrs[6..11].iter().all(|&lr| lr == 5e-4));
    assert_eq!(lrs[11], 2.5e-4);

    let mut p = Plateau::new(1e-3, 0.1, 0, 1e-4, 1e-5);
    for _ in 0..20 {
        assert!(p.step(1.0) >= 1e-5);
    }
    assert_eq!(p.lr, 1e-5);
}

#[test]
fn pos_weight_is_the_class_ratio() {
    assert_eq!(pos_weight(&[1, 0, 0, 0, 1, 0, 0, 0, 0, 0]).unwrap(), 4.0);
    assert!(pos_weight(&[0, 0, 0]).is_err());
    assert!(pos_weight(&[1, 1]).is_err());
}

fn log_softmax_ce(row: &[f64], t: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[t]
}

fn bce(v: f64, y: f64, pw: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-v).exp());
    -(pw * y * sig.ln() + (1.0 - y) * (1.0 - sig).ln())
}

struct RandomHeads {
    beam: Vec<f32>,
    blk: Vec<f32>,
    pose: Vec<f32>,
}

fn outputs_on(g: &mut Graph<f64>, h: &RandomHeads, n: usize) -> Outputs {
    let t = |v: &[f32], c: usize| Tensor::new([n, c], v.to_vec()).unwrap().cast();
    Outputs {
        beam: g.leaf(t(&h.beam, 64), true),
        blk: g.leaf(t(&h.blk, 1), true),
        pose: g.leaf(t(&h.pose, 2), true),
    }
}

#[test]
fn loss_equals_weighted_sum_of_term_oracles() {
    let f = fixture();
    let samples = &train_samples(&f)[..8];
    let stats = net_for(samples, 1).stats;
    let tg = BatchTargets::build(samples, &stats);
    let mut rng = beamfuse_core::rng::Rng::new(6);
    let heads = RandomHeads {
        beam: (0..8 * 64).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect(),
        blk: (0..8).map(|_| rng.uniform_in(-2.0, 2.0) as f32).collect(),
        pose: (0..16).map(|_| rng.uniform_in(-2.0, 2.0) as f32).collect(),
    };
    let w = LossWeights {
        beam: 1.0,
        blk: 0.5,
        pose: 0.25,
        pos_weight: 3.0,
    };
    let mut g = Graph::<f64>::new();
    let out = outputs_on(&mut g, &heads, 8);
    let (total, terms) = multitask_loss(&mut g, &out, &tg, &w).unwrap();

    let mut ce = 0.0;
    let mut bc = 0.0;
    let mut se = 0.0;
    for i in 0..8 {
        let row: Vec<f64> = heads.beam[i * 64..(i + 1) * 64].iter().map(|&v| v as f64).collect();
        ce += log_softmax_ce(&row, tg.b_star[i]);
        bc += bce(heads.blk[i] as f64, tg.y_blk[i] as f64, 3.0);
        for k in 0..2 {
            let d = heads.pose[2 * i + k] as f64 - tg.pose.data()[2 * i + k] as f64;
            se += d * d;
        }
    }
    let (ce, bc, mse) = (ce / 8.0, bc / 8.0, se / 16.0);
    assert!((terms.beam - ce).abs() < 1e-6);
    assert!((terms.blk - bc).abs() < 1e-6);
    assert!((terms.pose - mse).abs() < 1e-6);
    let expected = ce + 0.5 * bc + 0.25 * mse;
    assert!((terms.total - expected).abs() < 1e-6);
    assert!((g.scalar_f64(total) - expected).abs() < 1e-6);

    let beam_only = LossWeights {
        blk: 0.0,
        pose: 0.0,
        ..w
    };
    let mut g = Graph::<f64>::new();
    let out = outputs_on(&mut g, &heads, 8);
    let (_, t) = multitask_loss(&mut g, &out, &tg, &beam_only).unwrap();
    assert_eq!(t.total, t.beam);
}

#[test]
fn confident_correct_predictions_cost_nothing() {
    let f = fixture();
    let samples = &train_samples(&f)[..8];
    let stats = net_for(samples, 1).stats;
    let tg = BatchTargets::build(samples, &stats);
    let mut beam = vec![-20.0f32; 8 * 64];
    for (i, &b) in tg.b_star.iter().enumerate() {
        beam[i * 64 + b] = 20.0;
    }
    let heads = RandomHeads {
        beam,
        blk: tg.y_blk.iter().map(|&y| if y == 1.0 { 20.0 } else { -20.0 }).collect(),
        pose: tg.pose.data().to_vec(),
    };
    let mut g = Graph::<f64>::new();
    let out = outputs_on(&mut g, &heads, 8);
    let w = weights_for(&f.cfg, &train_samples(&f));
    let (_, t) = multitask_loss(&mut g, &out, &tg, &w).unwrap();
    assert!(t.total <= 1e-3, "{t:?}");
}

#[test]
fn zero_weight_silences_its_head() {
    let f = fixture();
    let samples = train_samples(&f);
    let net = net_for(&samples, 2);
    let batch_samples = &samples[..8];
    let snaps: Vec<&Snapshot> = batch_samples.iter().map(|s| s.snap).collect();
    let batch = beamfuse_core::model::Batch::build(&snaps, &net.stats, net.variant).unwrap();
    let tg = BatchTargets::build(batch_samples, &net.stats);
    let w = LossWeights {
        blk: 0.0,
        pose: 0.0,
        ..weights_for(&f.cfg, &samples)
    };
    let mut g = Graph::<f32>::new();
    let bound = net.params.bind(&mut g);
    let out = net.forward(&mut g, &bound, &batch).unwrap();
    let (loss, _) = multitask_loss(&mut g, &out, &tg, &w).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut silent = 0;
    for id in net.params.ids() {
        let name = net.params.name(id);
        if name.starts_with("head.blk") || name.starts_with("head.pose") {
            let gr = grads.get(bound[id]).map(|d| d.iter().all(|&v| v == 0.0)).unwrap_or(true);
            assert!(gr, "{name} receives gradient with a zero weight");
            silent += 1;
        }
    }
    assert_eq!(silent, 4);
}

#[test]
fn fresh_network_has_uniform_beam_loss() {
    let f = fixture();
    let samples = train_samples(&f);
    let net = net_for(&samples, 3);
    let w = weights_for(&f.cfg, &samples);
    let a = validate(&net, &samples, &w, 32, f.cfg.n0_dbm).unwrap();
    assert!((a.loss.beam - 64f64.ln()).abs() < 1e-3, "beam loss {}", a.loss.beam);
    let b = validate(&net, &samples, &w, 32, f.cfg.n0_dbm).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let f = fixture();
    let samples = train_samples(&f);
    let mut net = net_for(&samples, 4);
    let before = net.params.clone();
    let mut cfg = f.cfg.clone();
    cfg.lr = 0.0;
    let mut opt = AdamW::new(adamw_config(&cfg), net.params.tensors());
    train_epoch(&mut net, &samples, &mut opt, &weights_for(&cfg, &samples), &settings(&cfg), 0).unwrap();
    for (a, b) in before.tensors().iter().zip(net.params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    let f = fixture();
    let samples: Vec<Sample> = train_samples(&f).into_iter().take(64).collect();
    let mut net = net_for(&samples, 5);
    let w = weights_for(&f.cfg, &samples);
    let before = validate(&net, &samples, &w, 64, f.cfg.n0_dbm).unwrap().loss.total;
    let mut opt = AdamW::new(adamw_config(&f.cfg), net.params.tensors());
    train_epoch(&mut net, &samples, &mut opt, &w, &settings(&f.cfg), 0).unwrap();
    let after = validate(&net, &samples, &w, 64, f.cfg.n0_dbm).unwrap().loss.total;
    assert!(after < before, "{before} → {after}");
}

#[test]
fn identical_seeds_give_identical_epochs() {
    let f = fixture();
    let samples = train_samples(&f);
    let w = weights_for(&f.cfg, &samples);
    let run = || {
        let mut net = net_for(&samples, 6);
        let mut opt = AdamW::new(adamw_config(&f.cfg), net.params.tensors());
        let stats = train_epoch(&mut net, &samples, &mut opt, &w, &settings(&f.cfg), 0).unwrap();
        (net.params, stats.loss)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.data(), y.data());
    }
}
