use super::*;
use crate::adjoint::finite_diff_gradient;
use crate::models::DelayInput;
use crate::nn::{Activation, MlpSpec};
use crate::systems::{gen_annulus, gen_scalar_dde, split_timeseries, SystemKind};
use proptest::prelude::*;

#[test]
fn perfect_predictions_have_zero_loss() {
    let p = vec![vec![0.5, -1.0], vec![2.0, 0.0]];
    for kind in [LossKind::Mse, LossKind::Mae] {
        let (l, g) = loss_eval(kind, &p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn mse_scalar_pair() {
    let (l, g) = loss_eval(LossKind::Mse, &[vec![0.0]], &[vec![1.0]]).unwrap();
    assert_eq!(l, 1.0);
    assert_eq!(g, vec![vec![-2.0]]);
    assert!(loss_eval(LossKind::Mse, &[vec![0.0]], &[vec![1.0, 2.0]]).is_err());
}

#[test]
fn softmax_ce_matches_fd() {
    let p = vec![vec![0.3, -1.2, 2.0], vec![0.0, 0.5, -0.5]];
    let t = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
    let (l, g) = loss_eval(LossKind::SoftmaxCe, &p, &t).unwrap();
    assert!(l > 0.0);
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    let fd = finite_diff_gradient(
        |x| Ok(loss_eval(LossKind::SoftmaxCe, &[x[..3].to_vec(), x[3..].to_vec()], &t)?.0),
        &flat,
        1e-6,
    )
    .unwrap();
    for (a, b) in g.iter().flatten().zip(&fd) {
        assert!((a - b).abs() < 1e-8);
    }
}

proptest! {
    #[test]
    fn mae_grad_matches_fd_off_kinks(p in prop::collection::vec(-3.0f64..3.0, 6), t in prop::collection::vec(-3.0f64..3.0, 6)) {
        prop_assume!(p.iter().zip(&t).all(|(a, b)| (a - b).abs() > 1e-3));
        let rows = |v: &[f64]| vec![v[..3].to_vec(), v[3..].to_vec()];
        let (_, g) = loss_eval(LossKind::Mae, &rows(&p), &rows(&t)).unwrap();
        let fd = finite_diff_gradient(|x| Ok(loss_eval(LossKind::Mae, &rows(x), &rows(&t))?.0), &p, 1e-6).unwrap();
        for (a, b) in g.iter().flatten().zip(&fd) {
            prop_assert!(rel_err(*a, *b, 1e-12) < 1e-6);
        }
    }
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut w = vec![0.3, -0.7];
    let mut s = AdamState::new(2);
    for _ in 0..100 {
        adam_step(&mut s, &mut w, &[0.0, 0.0], &AdamHyper::with_lr(0.1)).unwrap();
    }
    assert_eq!(w, vec![0.3, -0.7]);
}

#[test]
fn adam_first_step_is_lr_sized() {
    let mut w = vec![0.0; 3];
    let mut s = AdamState::new(3);
    let h = AdamHyper::with_lr(1e-2);
    adam_step(&mut s, &mut w, &[0.5, -3.0, 1e-3], &h).unwrap();
    for (wi, g) in w.iter().zip([0.5f64, -3.0, 1e-3]) {
        let want = -h.lr * g / (g.abs() + h.eps);
        assert!((wi - want).abs() < 1e-15);
        assert!((wi.abs() - h.lr).abs() < 1e-7);
    }
}

#[test]
fn adam_descends_quadratic_bowl() {
    let mut w = vec![0.6, -0.8];
    let mut s = AdamState::new(2);
    let h = AdamHyper::with_lr(1e-2);
    for _ in 0..2000 {
        let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        adam_step(&mut s, &mut w, &g, &h).unwrap();
    }
    assert!(w.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
}

fn annulus_cfg(kind: ModelKind, epochs: usize) -> TrainConfig {
    let net = |input| MlpSpec::new(vec![input, 8, 2], Activation::Relu, true).unwrap();
    let model = match kind {
        ModelKind::Node => FieldSpec::node(net(2)),
        _ => FieldSpec::ndde(net(2), 1.0, DelayInput::DelayedOnly),
    };
    let mut cfg = TrainConfig::new(
        model,
        ReadoutHead::ProjectFirst(1),
        LossKind::Mse,
        1e-2,
        Budget::Epochs(epochs),
        5,
        0.25,
    );
    cfg.horizon = Some(1.0);
    cfg.batch_size = 16;
    cfg.fd_check_every = 5;
    cfg
}

#[test]
fn zero_epochs_reports_initial_accuracy() {
    let set = gen_annulus(20, 40, 0.5, 1.0, 1.5, 0).unwrap();
    let r = train_run(&annulus_cfg(ModelKind::Ndde, 0), TrainData::Classification(&set)).unwrap();
    assert!(r.iter_loss.is_empty());
    assert_eq!(r.evals.len(), 1);
    assert!(r.initial_accuracy.is_some());
    assert_eq!(r.initial_accuracy, r.final_accuracy);
}

#[test]
fn classification_is_deterministic_and_checked() {
    let set = gen_annulus(20, 40, 0.5, 1.0, 1.5, 0).unwrap();
    let cfg = annulus_cfg(ModelKind::Ndde, 3);
    let a = train_run(&cfg, TrainData::Classification(&set)).unwrap();
    let b = train_run(&cfg, TrainData::Classification(&set)).unwrap();
    assert_eq!(a.iter_loss.len(), 12);
    assert_eq!(a.iter_loss, b.iter_loss);
    assert_eq!(a.params, b.params);
    assert!(!a.fd_checks.is_empty());
    assert!(a.fd_checks.iter().all(|c| c.rel_err <= 1e-3));
    assert_eq!(a.evals.len(), 4);
    assert!(a.final_train_loss < a.evals[0].train_loss);
}

#[test]
fn piecewise_training_matches_dense() {
    let set = gen_annulus(10, 10, 0.5, 1.0, 1.5, 2).unwrap();
    let dense = annulus_cfg(ModelKind::Ndde, 1);
    let mut pw = dense.clone();
    pw.mode = GradMode::Piecewise;
    let a = train_run(&dense, TrainData::Classification(&set)).unwrap();
    let b = train_run(&pw, TrainData::Classification(&set)).unwrap();
    for (x, y) in a.params.values().iter().zip(b.params.values()) {
        assert!((x - y).abs() < 1e-8);
    }
    let mut node = annulus_cfg(ModelKind::Node, 1);
    node.mode = GradMode::Piecewise;
    assert!(matches!(train_run(&node, TrainData::Classification(&set)), Err(f) if matches!(f.error, Error::Config(_))));
}

fn population() -> (TrajectoryBatch, Vec<(usize, TrajectoryBatch)>) {
    let g = Grid::new(0.0, 8.0, 0.01).unwrap();
    let b = gen_scalar_dde(SystemKind::Population, &[1.8], 6, g, 1.0, (0.1, 1.2), 0)
        .unwrap()
        .subsample(5)
        .unwrap();
    split_timeseries(&b, 3.0).unwrap()
}

fn series_cfg(model: FieldSpec, iters: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(
        model,
        ReadoutHead::ProjectFirst(1),
        LossKind::Mae,
        1e-2,
        Budget::Iterations(iters),
        3,
        0.05,
    );
    cfg.batch_size = 4;
    cfg.fd_check_every = 10;
    cfg.eval_every = 10;
    cfg
}

#[test]
fn time_series_training_runs_every_model_kind() {
    let (train, tests) = population();
    let tanh = |dims: Vec<usize>| MlpSpec::new(dims, Activation::Tanh, true).unwrap();
    let specs = [
        FieldSpec::node(tanh(vec![1, 10, 10, 1])),
        FieldSpec::anode(1, 1, tanh(vec![2, 10, 10, 2])),
        FieldSpec::ndde(tanh(vec![2, 10, 10, 1]), 1.0, DelayInput::Concat),
        FieldSpec::node_plus_ndde(tanh(vec![2, 10, 10, 1]), tanh(vec![1, 5, 1]), 1.0, DelayInput::Concat),
    ];
    for spec in specs {
        let kind = spec.kind;
        let r = train_run(
            &series_cfg(spec, 20),
            TrainData::TimeSeries {
                train: &train,
                tests: &tests,
            },
        )
        .unwrap();
        assert_eq!(r.iter_loss.len(), 20, "{kind}");
        assert_eq!(r.evals.len(), 3);
        assert_eq!(
            r.final_test_losses.iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![1, 2, 5]
        );
        assert!(r.final_train_loss < r.evals[0].train_loss, "{kind}");
        assert!(r.fd_checks.len() == 2);
    }
}

#[test]
fn divergence_carries_partial_report() {
    let (train, tests) = population();
    let tanh = MlpSpec::new(vec![2, 4, 1], Activation::Tanh, true).unwrap();
    let mut cfg = series_cfg(FieldSpec::ndde(tanh, 1.0, DelayInput::Concat), 50);
    cfg.adam.lr = 1e6;
    cfg.fd_check_every = 0;
    cfg.step = 0.05;
    let res = train_run(
        &cfg,
        TrainData::TimeSeries {
            train: &train,
            tests: &tests,
        },
    );
    // a huge step either diverges or at least keeps reporting finite losses
    match res {
        Err(f) => {
            assert!(f.error.is_numerical() || matches!(f.error, Error::Divergence { .. }));
            assert!(f.report.iter_loss.iter().all(|l| l.is_finite()));
        }
        Ok(r) => assert!(r.iter_loss.iter().all(|l| l.is_finite())),
    }
}

#[test]
fn report_csv_shapes() {
    let (train, tests) = population();
    let tanh = MlpSpec::new(vec![2, 4, 1], Activation::Tanh, true).unwrap();
    let r = train_run(
        &series_cfg(FieldSpec::ndde(tanh, 1.0, DelayInput::Concat), 10),
        TrainData::TimeSeries {
            train: &train,
            tests: &tests,
        },
    )
    .unwrap();
    assert_eq!(r.loss_csv().lines().count(), 11);
    let eval = r.eval_csv();
    assert!(eval.starts_with("iteration,epoch,train_loss,test_loss_1tau,test_loss_2tau,test_loss_5tau,accuracy\n"));
    assert_eq!(eval.lines().count(), 3);
    assert!(r.summary().contains("final_test_loss_5tau="));
}

#[test]
fn invalid_configs_are_rejected() {
    let set = gen_annulus(4, 4, 0.5, 1.0, 1.5, 0).unwrap();
    let mut cfg = annulus_cfg(ModelKind::Ndde, 1);
    cfg.adam.lr = 0.0;
    assert!(train_run(&cfg, TrainData::Classification(&set)).is_err());
    let mut cfg = annulus_cfg(ModelKind::Ndde, 1);
    cfg.batch_size = 0;
    assert!(train_run(&cfg, TrainData::Classification(&set)).is_err());
    let mut cfg = annulus_cfg(ModelKind::Ndde, 1);
    cfg.step = 0.3;
    assert!(train_run(&cfg, TrainData::Classification(&set)).is_err());
}
