use idp_core::envs::{expert_violations, generate_dataset, read_dataset, write_dataset, TaskKind};
use idp_core::gradients::{grad_check, loss_and_gradient, tight_spec, GradCheckTolerances};
use idp_core::planners::{init_params, Differentiation, PlannerKind, PlannerSpec};
use idp_core::training::{evaluate_success, train, Checkpoint, TrainConfig, Trainer};

fn small_spec(kind: PlannerKind, m: usize) -> PlannerSpec {
    let mut spec = PlannerSpec::new(kind, Differentiation::Implicit, m);
    spec.channels = 6;
    spec.forward.max_iter = 25;
    spec.backward.max_iter = 8;
    spec
}

#[test]
fn datasets_survive_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, m, density) in [(TaskKind::Maze, 9, 0.3), (TaskKind::CSpace, 18, 0.0)] {
        let ds = generate_dataset(kind, m, density, 6, 11, 0).unwrap();
        assert!(ds.samples.iter().all(|s| expert_violations(s) == 0));
        let path = dir.path().join(format!("{}.idpd", kind.name()));
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = generate_dataset(TaskKind::Maze, 7, 0.3, 12, 1, 0).unwrap().samples;
    let val = generate_dataset(TaskKind::Maze, 7, 0.3, 4, 1, 1).unwrap().samples;
    let mut config = TrainConfig::new(small_spec(PlannerKind::Vin, 7), 4);
    config.epochs = 3;
    config.batch_size = 4;

    let mut first = Trainer::new(config).unwrap();
    first.run_epoch(&train_set, &val).unwrap();
    let path = dir.path().join("mid.idpc");
    first.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, first.checkpoint());
    assert_eq!(
        evaluate_success(&loaded.config.planner, &loaded.params, &val, &loaded.config.eval).unwrap(),
        evaluate_success(&config.planner, &first.params, &val, &config.eval).unwrap()
    );

    let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
    resumed.run(&train_set, &val, |_, _| Ok(())).unwrap();
    let straight = train(config, &train_set, &val).unwrap();
    assert_eq!(resumed.checkpoint(), straight.last);
}

#[test]
fn convgppn_gradients_agree_on_cspace_maps() {
    let tol = GradCheckTolerances::default();
    let ds = generate_dataset(TaskKind::CSpace, 18, 0.0, 1, 3, 0).unwrap();
    let mut spec = small_spec(PlannerKind::ConvGppn, 18);
    spec.channels = 4;
    let spec = tight_spec(&spec, &tol);
    let params = init_params(&spec, 8).unwrap();
    let report = grad_check(&spec, &params, &ds.samples[0], &tol).unwrap();
    assert!(report.forward_converged);
    assert!(report.passed(), "{:?}", report.flagged());

    // at the fixed point the candidate equals the state, so the update gate
    // receives no gradient at all
    let g = loss_and_gradient(&spec, &params, &ds.samples[0]).unwrap();
    for name in ["gru.update.w_v", "gru.update.w_r", "gru.update.b"] {
        assert!(g.grads.get(name).unwrap().norm() < 1e-10, "{name}");
    }
    assert!(g.grads.get("gru.candidate.w_r").unwrap().norm() > 1e-3);
}
