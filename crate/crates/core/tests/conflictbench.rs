use std::sync::Arc;

use duallora::adapters::{AdapterKind, AdapterParams};
use duallora::conflictbench::*;
use duallora::numeric::{Rng, Tensor};
use duallora::vce::VceConfig;
use duallora::Error;
use proptest::prelude::*;

fn small_spec(conflict: f64) -> SyntheticTaskSpec {
    SyntheticTaskSpec { grid: (2, 3), channels: 8, d_out: 2, conflict, ..SyntheticTaskSpec::default() }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        blocks: 2,
        d_ff: 16,
        vce: Some(VceConfig { levels: 2, heads: 1, points: 2, channels: 8, ..VceConfig::default() }),
        backbone_seed: 4,
    }
}

fn small_run(kind: &AdapterKind, steps: (usize, usize), lr: f64) -> (ToyModel, Dataset, TrainConfig) {
    let spec = small_spec(1.0);
    let data = generate_conflict_dataset(&spec, 60, 2).unwrap();
    let model = ToyModel::new(&small_model(), &spec, Some(kind), 3).unwrap();
    let cfg = TrainConfig { stage1_steps: steps.0, stage2_steps: steps.1, lr, batch_size: 8, seed: 5, log_every: 5 };
    (model, data, cfg)
}

fn randomize_up_projections(model: &mut ToyModel) {
    let mut rng = Rng::new(9);
    for b in &mut model.blocks {
        for a in [&mut b.q_adapter, &mut b.v_adapter].into_iter().flatten() {
            let up = match a {
                AdapterParams::Lora(p) => &mut p.b,
                AdapterParams::Dual(p) => &mut p.b,
                AdapterParams::Moe(p) => &mut p.experts[0].b,
            };
            *up = Arc::new(rng.normal_tensor(up.shape(), 0.1));
        }
    }
}

fn snapshot(ts: Vec<&Tensor>) -> Vec<Vec<u64>> {
    ts.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn adapter_bits(model: &ToyModel) -> Vec<Vec<u64>> {
    let named = model.trainable_named();
    snapshot(named.iter().filter(|(n, _)| n.starts_with("block")).map(|(_, t)| *t).collect())
}

#[test]
fn zero_learning_rate_keeps_losses_constant() {
    let (mut model, data, cfg) = small_run(&AdapterKind::dual(4), (10, 10), 0.0);
    let report = train(&mut model, &cfg, &data).unwrap();
    assert!(report.log.len() > 2);
    for p in &report.log {
        assert_eq!(p.total, report.log[0].total);
        assert_eq!(p.task_losses, report.log[0].task_losses);
    }
}

#[test]
fn identical_configs_give_identical_traces() {
    let run = || {
        let (mut model, data, cfg) = small_run(&AdapterKind::dual(4), (5, 15), 0.1);
        train(&mut model, &cfg, &data).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_one_leaves_adapters_bitwise_unchanged() {
    for kind in [AdapterKind::lora(4), AdapterKind::dual(4)] {
        let (mut model, data, cfg) = small_run(&kind, (20, 0), 0.1);
        randomize_up_projections(&mut model);
        let before = adapter_bits(&model);
        let vision_before = model.projector.clone();
        train(&mut model, &cfg, &data).unwrap();
        assert_eq!(adapter_bits(&model), before);
        assert_ne!(*model.projector, *vision_before);

        let cfg = TrainConfig { stage1_steps: 0, stage2_steps: 5, ..cfg };
        train(&mut model, &cfg, &data).unwrap();
        assert_ne!(adapter_bits(&model), before);
    }
}

#[test]
fn backbone_is_frozen_through_both_stages() {
    let (mut model, data, cfg) = small_run(&AdapterKind::dual(4), (10, 10), 0.1);
    randomize_up_projections(&mut model);
    let before = snapshot(model.frozen_tensors());
    train(&mut model, &cfg, &data).unwrap();
    assert_eq!(snapshot(model.frozen_tensors()), before);
}

#[test]
fn evaluate_is_pure_and_consistent() {
    let (model, data, _) = small_run(&AdapterKind::dual(4), (0, 0), 0.1);
    let a = evaluate(&model, &data).unwrap();
    let b = evaluate(&model, &data).unwrap();
    assert_eq!(a, b);
    assert!((a.0.iter().sum::<f64>() / a.0.len() as f64 - a.1).abs() < 1e-15);

    let bare = ToyModel::new(&small_model(), &data.spec, None, 3).unwrap();
    for kind in [AdapterKind::lora(4), AdapterKind::dual(4)] {
        let fresh = ToyModel::new(&small_model(), &data.spec, Some(&kind), 3).unwrap();
        assert_eq!(evaluate(&fresh, &data).unwrap(), evaluate(&bare, &data).unwrap());
    }
}

#[test]
fn divergence_is_reported() {
    let (mut model, data, cfg) = small_run(&AdapterKind::lora(4), (50, 0), 1e6);
    match train(&mut model, &cfg, &data) {
        Err(Error::Divergence { stage, .. }) => assert_eq!(stage, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (mut model, data, cfg) = small_run(&AdapterKind::dual(4), (3, 3), 0.1);
    train(&mut model, &cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    save_checkpoint(&stem, &model, 3).unwrap();
    let loaded = load_checkpoint(&stem).unwrap();
    assert_eq!(evaluate(&loaded, &data).unwrap(), evaluate(&model, &data).unwrap());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn mismatched_dataset_is_rejected() {
    let (mut model, _, cfg) = small_run(&AdapterKind::lora(2), (1, 1), 0.1);
    let other = generate_conflict_dataset(&SyntheticTaskSpec::default(), 10, 0).unwrap();
    assert!(train(&mut model, &cfg, &other).is_err());
    assert!(evaluate(&model, &other).is_err());
}

#[test]
fn entropy_is_invariant_to_probe_order_and_duplication() {
    let (mut model, data, _) = small_run(&AdapterKind::dual(4), (0, 0), 0.1);
    randomize_up_projections(&mut model);
    let probes = data.split(Split::Test);
    let base = entropy_analysis(&model, &probes, DEFAULT_BINS).unwrap();
    assert_eq!(base.len(), 4);

    let mut shuffled = probes.clone();
    Rng::new(1).shuffle(&mut shuffled);
    let doubled: Vec<&Sample> = probes.iter().chain(probes.iter()).copied().collect();
    for other in [shuffled, doubled] {
        let e = entropy_analysis(&model, &other, DEFAULT_BINS).unwrap();
        for (a, b) in base.iter().zip(&e) {
            assert_eq!(a.layer, b.layer);
            assert!((a.skill - b.skill).abs() < 1e-12 && (a.rectified - b.rectified).abs() < 1e-12);
        }
    }
    assert!(entropy_analysis(&model, &[], DEFAULT_BINS).is_err());
    let lora = ToyModel::new(&small_model(), &data.spec, Some(&AdapterKind::lora(4)), 3).unwrap();
    assert!(entropy_analysis(&lora, &probes, DEFAULT_BINS).is_err());
}

#[test]
fn conflict_free_lora_fits_within_two_thousand_steps() {
    let spec = SyntheticTaskSpec { conflict: 0.0, ..SyntheticTaskSpec::default() };
    let data = generate_conflict_dataset(&spec, 2000, 0).unwrap();
    let config = ModelConfig { vce: None, ..ModelConfig::default() };
    let mut model = ToyModel::new(&config, &spec, Some(&AdapterKind::lora(4)), 0).unwrap();
    let cfg = TrainConfig { stage1_steps: 200, stage2_steps: 1800, log_every: 0, ..TrainConfig::default() };
    let report = train(&mut model, &cfg, &data).unwrap();
    let last = report.log.last().unwrap();
    assert_eq!((last.stage, last.step), (2, 1800));
    assert!(last.total < 1e-3, "final loss {}", last.total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn histogram_entropy_permutation_and_duplication(
        xs in prop::collection::vec(-10.0f64..10.0, 1..200),
        seed in any::<u64>(),
    ) {
        let ys: Vec<f64> = xs.iter().map(|v| v.max(0.0)).collect();
        let (hs, hr) = entropy_pair(&xs, &ys, DEFAULT_BINS);
        let mut perm = xs.clone();
        Rng::new(seed).shuffle(&mut perm);
        let perm_y: Vec<f64> = perm.iter().map(|v| v.max(0.0)).collect();
        let (ps, pr) = entropy_pair(&perm, &perm_y, DEFAULT_BINS);
        prop_assert!((hs - ps).abs() < 1e-12 && (hr - pr).abs() < 1e-12);
        let dx: Vec<f64> = xs.iter().chain(&xs).copied().collect();
        let dy: Vec<f64> = ys.iter().chain(&ys).copied().collect();
        let (ds, dr) = entropy_pair(&dx, &dy, DEFAULT_BINS);
        prop_assert!((hs - ds).abs() < 1e-12 && (hr - dr).abs() < 1e-12);
        prop_assert!(hs >= 0.0 && hs <= (DEFAULT_BINS as f64).ln() + 1e-12);
    }

    #[test]
    fn dataset_targets_follow_task_maps(conflict in 0.0f64..=1.0, tasks in 1usize..4, seed in any::<u64>()) {
        let spec = SyntheticTaskSpec { tasks, conflict, grid: (2, 2), channels: 4, d_out: 3, ..SyntheticTaskSpec::default() };
        let data = generate_conflict_dataset(&spec, 4 * tasks, seed).unwrap();
        let maps = spec.target_maps();
        for s in &data.samples {
            let mut mean = vec![0.0; 4];
            for tok in s.input.chunks(4) {
                for (m, v) in mean.iter_mut().zip(tok) {
                    *m += v / 4.0;
                }
            }
            let want = maps[s.task].matmul(&Tensor::vector(mean)).unwrap();
            for (a, b) in s.target.iter().zip(want.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
