use beamfuse_core::metrics::{
    blockage_f1, blocked_decision, mean_se_drop, pose_rmse, report, topk_accuracy, Predictions, Targets,
};
use beamfuse_core::labeling::{oracle_beam, se_drop};
use beamfuse_core::rng::Rng;
use proptest::prelude::*;

const N0: f64 = -90.0;

fn sweeps(rng: &mut Rng, n: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..64).map(|_| rng.uniform_in(-100.0, -40.0) as f32).collect()).collect()
}

/// Rank by full sort on `(−logit, index)`.
fn sorted_rank(row: &[f32], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap()
}

#[test]
fn perfect_logits_score_one_for_every_k() {
    let targets: Vec<usize> = (0..64).collect();
    let mut logits = vec![0.0f32; 64 * 64];
    for (i, &t) in targets.iter().enumerate() {
        logits[i * 64 + t] = 5.0;
    }
    for k in 1..=64 {
        assert_eq!(topk_accuracy(&logits, 64, &targets, k).unwrap(), 1.0);
    }
}

#[test]
fn topk_matches_a_full_sort() {
    let mut rng = Rng::new(12);
    for _ in 0..1000 {
        let n = 1 + rng.below(8);
        // integer logits make ties frequent
        let logits: Vec<f32> = (0..n * 64).map(|_| rng.below(6) as f32).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.below(64)).collect();
        let k = 1 + rng.below(64);
        let hits = (0..n).filter(|&i| sorted_rank(&logits[i * 64..(i + 1) * 64], targets[i]) < k).count();
        let got = topk_accuracy(&logits, 64, &targets, k).unwrap();
        assert!((got - hits as f64 / n as f64).abs() < 1e-12);
        assert_eq!(topk_accuracy(&logits, 64, &targets, 64).unwrap(), 1.0);
    }
}

#[test]
fn se_drop_means() {
    let mut rng = Rng::new(21);
    let power = sweeps(&mut rng, 200);
    let refs: Vec<&[f32]> = power.iter().map(Vec::as_slice).collect();
    let oracle: Vec<usize> = power.iter().map(|r| oracle_beam(r).unwrap()).collect();
    assert_eq!(mean_se_drop(&refs, &oracle, N0).unwrap(), 0.0);

    let guess: Vec<usize> = (0..200).map(|_| rng.below(64)).collect();
    let direct = |p: f64| (1.0 + 10f64.powf((p - N0) / 10.0)).log2();
    let expected = power
        .iter()
        .zip(&guess)
        .map(|(r, &b)| direct(r[oracle_beam(r).unwrap()] as f64) - direct(r[b] as f64))
        .sum::<f64>()
        / 200.0;
    assert!((mean_se_drop(&refs, &guess, N0).unwrap() - expected).abs() < 1e-6);

    let mut two = vec![-300.0f32; 64];
    two[0] = (N0 + 10.0 * 3f64.log10()) as f32;
    two[1] = N0 as f32;
    assert!((mean_se_drop(&[&two], &[1], N0).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn f1_examples() {
    let s = blockage_f1(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
    assert_eq!((s.f1, s.precision, s.recall, s.accuracy), (1.0, 1.0, 1.0, 1.0));
    // TP = 2, FP = 1, FN = 1
    let s = blockage_f1(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
    for v in [s.precision, s.recall, s.f1] {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
    let never = blockage_f1(&[0; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
    assert_eq!(never.f1, 0.0);
    assert!(!never.f1_undefined);
}

#[test]
fn decision_boundary_is_blocked() {
    assert_eq!(blocked_decision(0.5), 1);
    assert_eq!(blocked_decision(0.499_999_97), 0);
}

#[test]
fn rmse_examples() {
    let mut rng = Rng::new(5);
    let truth: Vec<[f32; 2]> = (0..50).map(|_| [rng.uniform_in(-60.0, 60.0) as f32, rng.uniform_in(4.0, 12.0) as f32]).collect();
    assert_eq!(pose_rmse(&truth, &truth).unwrap(), 0.0);
    let shifted: Vec<[f32; 2]> = truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    assert!((pose_rmse(&shifted, &truth).unwrap() - 5.0).abs() < 1e-5);

    let pred: Vec<[f32; 2]> = truth.iter().map(|p| [p[0] + rng.gaussian(0.0, 2.0) as f32, p[1]]).collect();
    let mut acc = 0.0;
    for i in 0..50 {
        let dx = pred[i][0] as f64 - truth[i][0] as f64;
        let dy = pred[i][1] as f64 - truth[i][1] as f64;
        acc += dx * dx + dy * dy;
    }
    assert!((pose_rmse(&pred, &truth).unwrap() - (acc / 50.0).sqrt()).abs() < 1e-6);
}

proptest! {
    #[test]
    fn rmse_is_translation_covariant(
        pts in proptest::collection::vec((-50.0f32..50.0, -50.0f32..50.0, -5.0f32..5.0, -5.0f32..5.0), 1..40),
        sx in -20.0f32..20.0, sy in -20.0f32..20.0,
    ) {
        let truth: Vec<[f32; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let pred: Vec<[f32; 2]> = pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect();
        let a = pose_rmse(&pred, &truth).unwrap();
        let move_all = |v: &[[f32; 2]]| -> Vec<[f32; 2]> { v.iter().map(|p| [p[0] + sx, p[1] + sy]).collect() };
        let b = pose_rmse(&move_all(&pred), &move_all(&truth)).unwrap();
        prop_assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn f1_ignores_snapshot_order(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..60), seed in 0u64..1000) {
        let (p, t): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        Rng::new(seed).shuffle(&mut perm);
        let pp: Vec<u8> = perm.iter().map(|&i| p[i]).collect();
        let tt: Vec<u8> = perm.iter().map(|&i| t[i]).collect();
        prop_assert_eq!(blockage_f1(&p, &t).unwrap(), blockage_f1(&pp, &tt).unwrap());
    }

    #[test]
    fn top3_never_below_top1(logits in proptest::collection::vec(-3.0f32..3.0, 64 * 5), t in proptest::collection::vec(0usize..64, 5)) {
        prop_assert!(topk_accuracy(&logits, 64, &t, 3).unwrap() >= topk_accuracy(&logits, 64, &t, 1).unwrap());
    }

    #[test]
    fn zero_mean_drop_iff_every_pick_attains_the_oracle(
        r in proptest::collection::vec(proptest::collection::vec(-100i32..-40, 64), 1..6),
        picks in proptest::collection::vec(0usize..64, 6),
    ) {
        let power: Vec<Vec<f32>> = r.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
        let refs: Vec<&[f32]> = power.iter().map(Vec::as_slice).collect();
        let picks = &picks[..power.len()];
        let all_best = power.iter().zip(picks).all(|(p, &b)| se_drop(p, b, N0).unwrap() == 0.0);
        prop_assert_eq!(mean_se_drop(&refs, picks, N0).unwrap() == 0.0, all_best);
    }
}

fn synthetic_targets(n: usize, rng: &mut Rng) -> (Vec<Vec<f32>>, Vec<usize>, Vec<u8>, Vec<[f32; 2]>) {
    let power = sweeps(rng, n);
    let b_star = power.iter().map(|r| oracle_beam(r).unwrap()).collect();
    let y_blk = (0..n).map(|i| u8::from(i % 5 == 0)).collect();
    let truth = (0..n).map(|_| [rng.uniform_in(-60.0, 60.0) as f32, rng.uniform_in(4.0, 12.0) as f32]).collect();
    (power, b_star, y_blk, truth)
}

#[test]
fn oracle_predictor_is_perfect() {
    let mut rng = Rng::new(30);
    let (power, b_star, y_blk, truth) = synthetic_targets(300, &mut rng);
    let refs: Vec<&[f32]> = power.iter().map(Vec::as_slice).collect();
    let mut pred = Predictions::default();
    for (i, &b) in b_star.iter().enumerate() {
        let mut row = vec![0.0f32; 64];
        row[b] = 1.0;
        pred.beam_logits.extend(row);
        pred.blk_prob.push(if y_blk[i] == 1 { 0.9 } else { 0.1 });
    }
    pred.pose = truth.clone();
    let tg = Targets {
        b_star: &b_star,
        y_blk: &y_blk,
        power: &refs,
        truth: &truth,
        n0_dbm: N0,
    };
    let rep = report(&pred, &tg, 64).unwrap();
    assert_eq!((rep.top1, rep.top3, rep.se_drop, rep.f1_blk, rep.rmse), (1.0, 1.0, 0.0, 1.0, 0.0));
    assert_eq!(rep, report(&pred, &tg, 64).unwrap());
}

#[test]
fn random_beams_score_chance() {
    let mut rng = Rng::new(31);
    let n = 10_000;
    let (power, b_star, y_blk, truth) = synthetic_targets(n, &mut rng);
    let refs: Vec<&[f32]> = power.iter().map(Vec::as_slice).collect();
    let pred = Predictions {
        beam_logits: (0..n * 64).map(|_| rng.uniform() as f32).collect(),
        blk_prob: vec![0.0; n],
        pose: truth.clone(),
    };
    let tg = Targets {
        b_star: &b_star,
        y_blk: &y_blk,
        power: &refs,
        truth: &truth,
        n0_dbm: N0,
    };
    let rep = report(&pred, &tg, 64).unwrap();
    assert!((rep.top1 - 1.0 / 64.0).abs() <= 0.005, "top1 {}", rep.top1);
    assert!((rep.top3 - 3.0 / 64.0).abs() <= 0.007, "top3 {}", rep.top3);
    assert!(rep.top3 >= rep.top1);
    assert_eq!(rep.f1_blk, 0.0);
}
