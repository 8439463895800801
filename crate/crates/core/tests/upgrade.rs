use hotswap_core::backfill::{detect_regression, sequential_upgrade, simulate_trajectory, GenerationSpec, SequentialOptions};
use hotswap_core::data::{allocate_training, generate_dataset, stratified_fraction};
use hotswap_core::encoder::{load_checkpoint, save_checkpoint, ParamTensors};
use hotswap_core::optim::{accuracy, train_new, train_old};
use hotswap_core::retrieval::{map_at_k, Gallery};
use hotswap_core::{
    Activation, AllocationType, BaselineMode, EncoderDescriptor, EvalSplit, LossConfig, Scalar, SyntheticSpec,
    TrainConfig, UncertaintyStrategy, UpgradeScenario,
};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        num_train_classes: 10,
        num_eval_classes: 6,
        samples_per_class: 15,
        input_dim: 12,
        noise_sigma: 0.3,
        seed: 11,
    }
}

fn descriptor(hidden: Vec<usize>) -> EncoderDescriptor {
    EncoderDescriptor {
        input_dim: 12,
        hidden_dims: hidden,
        embed_dim: 8,
        activation: Activation::Relu,
    }
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        seed,
        ..TrainConfig::default()
    }
}

fn scenario<'a, S: Scalar>(
    pair: &'a hotswap_core::ModelPair<S>,
    eval: &'a EvalSplit<S>,
    strategy: UncertaintyStrategy,
) -> UpgradeScenario<'a, S> {
    UpgradeScenario {
        model_pair: pair,
        eval,
        strategy,
        fraction_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        k: 5,
        nfr_k: 1,
        seed: 3,
        baseline: BaselineMode::OldSystem,
    }
}

#[test]
fn end_to_end_upgrade() {
    let (train, eval) = generate_dataset::<f64>(&spec()).unwrap();
    let alloc = allocate_training(&train, AllocationType::Expansion, 0.3, 1).unwrap();
    let (old, old_cls, _) = train_old(&alloc.old_train, &descriptor(vec![]), &train_cfg(1)).unwrap();
    let (untrained, untrained_cls, _) =
        train_old(&alloc.old_train, &descriptor(vec![]), &TrainConfig { epochs: 0, ..train_cfg(1) }).unwrap();
    let acc = accuracy(&old, &old_cls, &alloc.old_train).unwrap();
    assert!(acc > accuracy(&untrained, &untrained_cls, &alloc.old_train).unwrap());
    assert!(acc > 0.1);
    let (pair, log) = train_new(&alloc.new_train, &old, &descriptor(vec![]), &train_cfg(2)).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|e| e.total.is_finite() && e.compat_term >= 0.0));

    let enc = |e: &hotswap_core::EncoderParams, ds: &hotswap_core::Dataset| {
        hotswap_core::optim::encode_dataset(e, ds).unwrap()
    };
    let new_q: Vec<_> = eval.queries.ids().into_iter().zip(enc(&pair.new, &eval.queries)).collect();
    let old_g = Gallery::new(eval.gallery.ids(), enc(&pair.old, &eval.gallery)).unwrap();
    let new_g = Gallery::new(eval.gallery.ids(), enc(&pair.new, &eval.gallery)).unwrap();

    for strategy in UncertaintyStrategy::ALL {
        let t = simulate_trajectory(&scenario(&pair, &eval, strategy)).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0].map_at_k, map_at_k(&new_q, &old_g, &eval.relevance, 5).unwrap().map_at_k);
        assert_eq!(t[4].map_at_k, map_at_k(&new_q, &new_g, &eval.relevance, 5).unwrap().map_at_k);
        assert!(t.iter().all(|p| (0.0..=1.0).contains(&p.nfr_at_k)));
        let expected: Vec<f64> = t.iter().filter(|p| p.map_at_k < t[0].map_at_k).map(|p| p.fraction).collect();
        assert_eq!(detect_regression(&t).unwrap(), expected);
    }
}

#[test]
fn single_precision_upgrade_runs() {
    let (train, eval) = generate_dataset::<f32>(&spec()).unwrap();
    let alloc = allocate_training(&train, AllocationType::OpenData, 0.5, 4).unwrap();
    let (old, _, _) = train_old(&alloc.old_train, &descriptor(vec![10]), &train_cfg(1)).unwrap();
    let (pair, _) = train_new(&alloc.new_train, &old, &descriptor(vec![10]), &train_cfg(2)).unwrap();
    let t = simulate_trajectory(&scenario(&pair, &eval, UncertaintyStrategy::Entropy)).unwrap();
    assert!(t.iter().all(|p| p.map_at_k.is_finite() && p.map_at_k > 0.0));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let (train, _) = generate_dataset::<f64>(&spec()).unwrap();
    let (enc, cls, _) = train_old(&train, &descriptor(vec![7]), &train_cfg(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    save_checkpoint(&stem, &enc, Some(&cls)).unwrap();
    let (enc2, cls2) = load_checkpoint::<f64>(&stem).unwrap();
    let cls2 = cls2.unwrap();
    assert_eq!(enc2.descriptor, enc.descriptor);
    let bits = |ts: Vec<&[f64]>| ts.iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(enc2.tensors()), bits(enc.tensors()));
    assert_eq!(bits(cls2.tensors()), bits(cls.tensors()));

    save_checkpoint(dir.path().join("bare"), &enc, None).unwrap();
    assert!(load_checkpoint::<f64>(dir.path().join("bare")).unwrap().1.is_none());
    assert!(load_checkpoint::<f64>(dir.path().join("missing")).is_err());
}

#[test]
fn sequential_generations_share_nested_splits() {
    let (train, eval) = generate_dataset::<f64>(&spec()).unwrap();
    let gens: Vec<GenerationSpec> = [0.3, 0.6, 1.0]
        .iter()
        .enumerate()
        .map(|(g, &f)| GenerationSpec {
            train: stratified_fraction(&train, f, 9).unwrap(),
            descriptor: descriptor(vec![]),
            train_cfg: TrainConfig {
                loss_cfg: LossConfig::default(),
                ..train_cfg(g as u64)
            },
        })
        .collect();
    let ids = |g: usize| gens[g].train.ids().into_iter().collect::<std::collections::BTreeSet<_>>();
    assert!(ids(0).is_subset(&ids(1)));
    assert!(ids(1).is_subset(&ids(2)));

    let opts = SequentialOptions {
        strategy: UncertaintyStrategy::MarginOfConfidence,
        fraction_grid: vec![0.0, 0.5, 1.0],
        k: 5,
        nfr_k: 1,
        seed: 2,
        baseline: BaselineMode::OldSystem,
    };
    let r = sequential_upgrade(&gens, &eval, &opts).unwrap();
    assert_eq!(r.trajectories.len(), 2);
    assert_eq!(r.no_refresh.len(), 3);
    assert_eq!(r.encoders.len(), 3);
    // the second upgrade starts from the first one's fully backfilled gallery
    assert_eq!(r.no_refresh[0].nfr_at_k, 0.0);
    assert_eq!(r.final_hot_refresh_map(), r.trajectories[1][2].map_at_k);
}
