use feddat::config::RunConfig;
use feddat::experiments::{build_federation, simulate};
use feddat::federation::{aggregate, client_update, Aggregation, Variant};
use feddat::losses::{loss_dat, loss_shared};
use feddat::autodiff::{relative_error, Tape, Tensor};
use feddat::benchgen::VqaTriple;
use feddat::model::{Branch, NamedTensors, ParamGroup, PeftMode};

fn small(mode: PeftMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seeds = vec![0];
    cfg.peft.mode = mode;
    cfg.benchmark.clients = 3;
    cfg.benchmark.train_per_client = 40;
    cfg.benchmark.test_per_client = 20;
    cfg.train.rounds = 3;
    cfg.train.local_steps = 2;
    cfg
}

#[test]
fn zero_steps_and_zero_lr_leave_parameters_bit_exact() {
    for (steps, lr) in [(0, 0.05), (2, 0.0)] {
        let mut cfg = small(PeftMode::Feddat);
        cfg.train.local_steps = steps;
        cfg.train.lr = lr;
        let mut fed = build_federation(&cfg, 0, true).unwrap();
        let before = fed.clients()[0].model.params().clone();
        let report = client_update(&mut fed.clients_mut()[0], 1, &cfg.train, 0).unwrap();
        assert!(report.upload.bit_eq(&before.group(ParamGroup::Shared)));
        let after = fed.clients()[0].model.params();
        assert!(after.group(ParamGroup::Local).bit_eq(&before.group(ParamGroup::Local)));
        assert!(after.group(ParamGroup::Head).bit_eq(&before.group(ParamGroup::Head)));
    }
}

#[test]
fn local_only_runs_send_nothing() {
    let cfg = small(PeftMode::Adapter);
    let run = simulate(&cfg, 0, false).unwrap();
    assert_eq!(run.federation.ledger().total_uplink_scalars(), 0);
    assert!(run.federation.ledger().entries.is_empty());
    assert!(run.metrics.iter().all(|m| m.uplink_scalars == 0));
}

#[test]
fn single_client_local_equals_federated() {
    for mode in [PeftMode::Adapter, PeftMode::Feddat] {
        let mut cfg = small(mode);
        cfg.benchmark.clients = 1;
        cfg.train.aggregation = Aggregation::Uniform;
        let local = simulate(&cfg, 4, false).unwrap();
        let fed = simulate(&cfg, 4, true).unwrap();
        let a = local.federation.clients()[0].model.params();
        let b = fed.federation.clients()[0].model.params();
        assert!(a.max_abs_diff(b) <= 1e-12, "{}", mode.name());
        assert!(fed.federation.global().bit_eq(&b.group(ParamGroup::Shared)));
    }
}

#[test]
fn frozen_copy_tracks_incoming_global_and_local_persists() {
    let cfg = small(PeftMode::Feddat);
    let mut fed = build_federation(&cfg, 1, true).unwrap();
    fed.run_round().unwrap();
    let local_after_1 = fed.clients()[0].model.params().group(ParamGroup::Local);
    let global_after_1 = fed.global().clone();
    fed.run_round().unwrap();
    let params = fed.clients()[0].model.params();
    // the frozen copy still holds the round-2 broadcast
    assert!(params.group(ParamGroup::Frozen)
        .renamed_prefix("frozen", "shared")
        .bit_eq(&global_after_1));
    let local = params.group(ParamGroup::Local);
    assert!(local.same_geometry(&local_after_1));
    assert!(!local.bit_eq(&local_after_1), "local adapter should keep training");
}

#[test]
fn no_local_branch_never_touches_the_local_adapter() {
    let mut cfg = small(PeftMode::Feddat);
    cfg.train.variant = Variant::NoLocalBranch;
    let mut fed = build_federation(&cfg, 2, true).unwrap();
    let before = fed.clients()[1].model.params().group(ParamGroup::Local);
    fed.run().unwrap();
    assert!(fed.clients()[1].model.params().group(ParamGroup::Local).bit_eq(&before));
}

#[test]
fn no_mkd_logs_zero_distillation() {
    let mut cfg = small(PeftMode::Feddat);
    cfg.train.variant = Variant::NoMkd;
    let run = simulate(&cfg, 0, true).unwrap();
    assert!(run
        .metrics
        .iter()
        .all(|m| m.kl_s == 0.0 && m.kl_dat == 0.0 && m.alpha == 0.0 && m.beta == 0.0));
    let full = simulate(&small(PeftMode::Feddat), 0, true).unwrap();
    assert!(full.metrics.iter().any(|m| m.kl_s > 0.0));
}

#[test]
fn aggregation_reductions() {
    let mut w = NamedTensors::new();
    w.insert("shared.layer0.down", Tensor::matrix(2, 2, vec![0.1, -0.7, 3.0, 1e-3]));
    let same: Vec<(NamedTensors, usize)> = (0..4).map(|i| (w.clone(), 10 + i)).collect();
    for mode in [Aggregation::Weighted, Aggregation::Uniform] {
        assert!(aggregate(&same, mode).unwrap().max_abs_diff(&w) <= 1e-15);
    }
    let mut v = NamedTensors::new();
    v.insert("shared.layer0.down", Tensor::matrix(2, 2, vec![2.0, 0.5, -1.0, 4.0]));
    let equal = vec![(w.clone(), 7), (v.clone(), 7), (w, 7)];
    let a = aggregate(&equal, Aggregation::Weighted).unwrap();
    let b = aggregate(&equal, Aggregation::Uniform).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-15);
}

fn batch_of(fed: &feddat::federation::Federation, n: usize) -> Vec<VqaTriple> {
    fed.clients()[0].data.train[..n].to_vec()
}

#[test]
fn losses_at_initialization_and_zero_weights() {
    let cfg = small(PeftMode::Feddat);
    let fed = build_federation(&cfg, 0, true).unwrap();
    let model = &fed.clients()[0].model;
    let samples = batch_of(&fed, 4);
    let refs: Vec<&VqaTriple> = samples.iter().collect();
    let mut tape = Tape::new();
    // zero up projections: every branch computes the same logits
    let l = loss_shared(&mut tape, model, &refs, Branch::Dat, 0.9, 1.0).unwrap();
    assert_eq!(l.bundle.kl, 0.0);
    assert_eq!(l.bundle.total, l.bundle.ce);
    tape.clear();
    let l = loss_shared(&mut tape, model, &refs, Branch::Dat, 0.0, 1.0).unwrap();
    assert_eq!(l.bundle.total, l.bundle.ce);
    tape.clear();
    let l = loss_dat(&mut tape, model, &refs, Branch::Dat, 0.0, 1.0).unwrap();
    assert_eq!(l.bundle.total, l.bundle.ce);
}

/// A model whose three adapters differ, so both KL terms are active.
fn trained_model() -> (feddat::federation::Federation, Vec<VqaTriple>) {
    let cfg = small(PeftMode::Feddat);
    let mut fed = build_federation(&cfg, 0, true).unwrap();
    fed.run_round().unwrap();
    fed.run_round().unwrap();
    let samples = batch_of(&fed, 3);
    (fed, samples)
}

fn check_loss_gradient(which: &str) {
    let (fed, samples) = trained_model();
    let model = fed.clients()[0].model.clone();
    let refs: Vec<&VqaTriple> = samples.iter().collect();
    let eval = |m: &feddat::model::ClientModel, tape: &mut Tape| match which {
        "shared" => loss_shared(tape, m, &refs, Branch::Dat, 0.6, 1.5).unwrap(),
        _ => loss_dat(tape, m, &refs, Branch::Dat, 0.6, 1.5).unwrap(),
    };
    let mut tape = Tape::new();
    let loss = eval(&model, &mut tape);
    assert!(loss.bundle.kl > 0.0);
    tape.backward(loss.total).unwrap();
    let trained: Vec<String> = loss.binding.trainable().iter().map(|(n, _)| n.clone()).collect();
    let expected_group = if which == "shared" { "shared." } else { "local." };
    assert!(trained.iter().all(|n| n.starts_with(expected_group) || n.starts_with("head.")));
    assert!(trained.iter().any(|n| n.starts_with(expected_group)));
    assert!(!trained.iter().any(|n| n.starts_with("frozen.")));

    // the teacher logits also read the head, so only adapter coordinates
    // see a detached teacher under perturbation
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, var) in loss.binding.trainable() {
        if name.starts_with("head.") {
            continue;
        }
        let grad = tape.grad(*var).cloned().unwrap();
        let len = grad.len();
        for i in (0..len).step_by((len / 6).max(1)) {
            let mut m = model.clone();
            let base = m.params().get(name).unwrap().data()[i];
            m.params_mut().get_mut(name).unwrap().data_mut()[i] = base + eps;
            let plus = eval(&m, &mut Tape::new()).bundle.total;
            m.params_mut().get_mut(name).unwrap().data_mut()[i] = base - eps;
            let minus = eval(&m, &mut Tape::new()).bundle.total;
            worst = worst.max(relative_error(grad.data()[i], (plus - minus) / (2.0 * eps)));
        }
    }
    assert!(worst <= 1e-4, "{which}: worst rel err {worst:e}");
}

#[test]
fn shared_objective_gradient_matches_differences() {
    check_loss_gradient("shared");
}

#[test]
fn teacher_objective_gradient_matches_differences() {
    check_loss_gradient("dat");
}

#[test]
fn teacher_kl_vanishes_when_all_adapters_coincide() {
    let (fed, samples) = trained_model();
    let mut model = fed.clients()[0].model.clone();
    let shared = model.params().group(ParamGroup::Shared);
    model.params_mut().extend_from(&shared.renamed_prefix("shared", "local"));
    model.refresh_frozen();
    let refs: Vec<&VqaTriple> = samples.iter().collect();
    let l = loss_dat(&mut Tape::new(), &model, &refs, Branch::Dat, 0.8, 1.0).unwrap();
    assert!(l.bundle.kl.abs() <= 1e-12);
}

#[test]
fn worker_count_does_not_change_results() {
    let mut cfg = small(PeftMode::Feddat);
    cfg.workers = 1;
    let a = simulate(&cfg, 5, true).unwrap();
    cfg.workers = 3;
    let b = simulate(&cfg, 5, true).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert!(a.federation.state_tensors().bit_eq(&b.federation.state_tensors()));
}

#[test]
fn broadcast_geometry_is_constant_across_rounds() {
    let cfg = small(PeftMode::Adapter);
    let mut fed = build_federation(&cfg, 0, true).unwrap();
    let start = fed.global().clone();
    fed.run().unwrap();
    assert_eq!(fed.rounds_done(), 3);
    assert!(fed.global().same_geometry(&start));
    assert!(!fed.global().bit_eq(&start));
}
