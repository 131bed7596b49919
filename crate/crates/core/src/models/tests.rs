use super::*;
use crate::adjoint::{finite_diff_gradient, rel_err};
use crate::nn::Activation;

fn mlp(dims: &[usize]) -> MlpSpec {
    MlpSpec::new(dims.to_vec(), Activation::Tanh, true).unwrap()
}

fn sq_loss(traj: &Trajectory, k: usize) -> (f64, Vec<f64>) {
    let x = &traj.last()[..k];
    (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max(rel_err(*x, *y, 1e-6)))
}

#[test]
fn zero_node_is_identity_flow() {
    let (model, p) = make_field(&FieldSpec::node(mlp(&[3, 5, 3])), 1).unwrap();
    let w = vec![0.0; p.len()];
    let grid = Grid::new(0.0, 1.0, 0.1).unwrap();
    let t = model.forward(&w, &[1.0, -2.0, 0.5], grid, Method::Rk4).unwrap();
    assert!(t.rows().all(|r| r == [1.0, -2.0, 0.5]));
}

#[test]
fn concat_ndde_needs_doubled_input() {
    assert!(make_field(&FieldSpec::ndde(mlp(&[4, 8, 2]), 1.0, DelayInput::Concat), 0).is_ok());
    let bad = FieldSpec {
        net: Some(mlp(&[2, 8, 2])),
        ..FieldSpec::ndde(mlp(&[4, 8, 2]), 1.0, DelayInput::Concat)
    };
    assert!(matches!(make_field(&bad, 0), Err(Error::Config(_))));
    assert!(make_field(&FieldSpec::ndde(mlp(&[2, 8, 2]), 1.0, DelayInput::Sum), 0).is_ok());
    assert!(make_field(&FieldSpec::ndde(mlp(&[2, 8, 2]), 1.0, DelayInput::Current), 0).is_err());
    assert!(make_field(&FieldSpec::ndde(mlp(&[2, 8, 2]), -1.0, DelayInput::Sum), 0).is_err());
}

#[test]
fn anode_augments_and_projects_back() {
    let spec = FieldSpec::anode(1, 1, mlp(&[2, 6, 2]));
    let (model, p) = make_field(&spec, 3).unwrap();
    assert_eq!(model.dim(), 2);
    assert_eq!(model.embed(&[0.7]).unwrap(), vec![0.7, 0.0]);
    let grid = Grid::new(0.0, 1.0, 0.05).unwrap();
    let t = model.forward(p.values(), &[0.7], grid, Method::Rk4).unwrap();
    let head = ReadoutHead::ProjectFirst(1);
    assert_eq!(readout(&head, t.row(0)).unwrap(), vec![0.7]);
    assert_eq!(readout(&head, t.last()).unwrap(), vec![t.last()[0]]);
    assert!(make_field(&FieldSpec::anode(1, 0, mlp(&[1, 6, 1])), 0).is_err());
}

#[test]
fn node_plus_ndde_appends_history_parameters() {
    let spec = FieldSpec::node_plus_ndde(mlp(&[4, 5, 2]), mlp(&[2, 3, 2]), 0.5, DelayInput::Concat);
    let (model, p) = make_field(&spec, 9).unwrap();
    assert_eq!(p.len(), mlp(&[4, 5, 2]).param_count() + mlp(&[2, 3, 2]).param_count());
    assert_eq!(model.param_count(), p.len());
    assert_eq!(p.manifest().blocks[1].name, "init_net");
    let (main, init) = model.split_params(p.values());
    assert_eq!(main, p.block("net").unwrap());
    assert_eq!(init, p.block("init_net").unwrap());
}

#[test]
fn analytic_annulus_bounds() {
    let (f, w) = analytic_annulus_field(0.75, 2).unwrap();
    let grid = Grid::new(0.0, 10.0, 0.5).unwrap();
    let run = |x: [f64; 2]| integrate_dde(&f, &w, &History::Constant(x.to_vec()), 10.0, grid, Method::Rk4).unwrap();
    let inner = run([0.3, 0.4]);
    assert!((inner.last()[0] - (0.3 - 2.5)).abs() < 1e-12);
    assert!(inner.last()[0] <= -2.0);
    let outer = run([0.6, -0.8]);
    assert!((outer.last()[0] - (0.6 + 2.5)).abs() < 1e-12);
    let zero = run([0.0, 0.0]);
    assert!((zero.last()[0] + 7.5).abs() < 1e-12);
    assert_eq!(zero.last()[1], 0.0);
    assert!(analytic_annulus_field(0.0, 2).is_err());
}

#[test]
fn annulus_radius_gradient_is_minus_horizon() {
    let spec = FieldSpec::analytic_annulus(2, 0.75, 10.0);
    let (model, p) = make_field(&spec, 0).unwrap();
    let grid = Grid::new(0.0, 10.0, 0.2).unwrap();
    let t = model.forward(p.values(), &[0.2, 0.9], grid, Method::Rk4).unwrap();
    let loss = ObservationLoss::terminal(10.0, vec![1.0, 0.0]).unwrap();
    let g = model.backward(p.values(), &t, &loss, Method::Rk4).unwrap();
    assert!((g.w_grad[0] + 10.0).abs() < 1e-12);
}

#[test]
fn universal_construction_hits_target() {
    let t = 2.0;
    let f_neg = [-1.0, 0.0, 0.0, -1.0];
    let (field, tau) = universal_construct(LinearMap::new(2), t).unwrap();
    let w = LinearMap::universal_params(&f_neg, 2, t);
    let grid = Grid::new(0.0, t, 0.04).unwrap();
    for x in [[0.3, -1.2], [5.0, 2.0], [0.0, 0.0]] {
        let traj = integrate_dde(&field, &w, &History::Constant(x.to_vec()), tau, grid, Method::Rk4).unwrap();
        for (h, xi) in traj.last().iter().zip(x) {
            assert!((h + xi).abs() < 1e-9);
        }
    }
    let id = LinearMap::universal_params(&[1.0, 0.0, 0.0, 1.0], 2, t);
    assert!(id.iter().all(|&v| v == 0.0));
    let traj = integrate_dde(&field, &id, &History::Constant(vec![0.4, 0.1]), tau, grid, Method::Rk4).unwrap();
    assert_eq!(traj.last(), [0.4, 0.1]);
}

#[test]
fn universal_mlp_is_exact_for_any_network() {
    let spec = FieldSpec::universal(mlp(&[2, 7, 2]), 1.5);
    let (model, p) = make_field(&spec, 4).unwrap();
    let net = Mlp::new(mlp(&[2, 7, 2])).unwrap();
    let grid = Grid::new(0.0, 1.5, 0.03).unwrap();
    let x = [0.5, -0.25];
    let traj = model.forward(p.values(), &x, grid, Method::Rk4).unwrap();
    let gx = net.forward(p.values(), &x).unwrap();
    for i in 0..2 {
        assert!((traj.last()[i] - (x[i] + 1.5 * gx[i])).abs() < 1e-12);
    }
}

#[test]
fn readout_heads() {
    assert_eq!(readout(&ReadoutHead::Identity, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    assert_eq!(readout(&ReadoutHead::ProjectFirst(1), &[1.0, 2.0]).unwrap(), vec![1.0]);
    assert!(readout(&ReadoutHead::ProjectFirst(3), &[1.0, 2.0]).is_err());
    let zero = ReadoutHead::linear(2, 3, vec![0.0; 9]).unwrap();
    assert_eq!(readout(&zero, &[1.0, 2.0]).unwrap(), vec![0.0; 3]);
    let lin = ReadoutHead::linear(2, 1, vec![2.0, -1.0, 0.5]).unwrap();
    assert_eq!(readout(&lin, &[1.0, 3.0]).unwrap(), vec![-0.5]);
    assert_eq!(readout_vjp(&lin, 2, &[1.0]).unwrap(), vec![2.0, -1.0]);
    assert_eq!(
        readout_vjp(&ReadoutHead::ProjectFirst(1), 3, &[4.0]).unwrap(),
        vec![4.0, 0.0, 0.0]
    );
    assert!(readout(&lin, &[1.0]).is_err());
}

#[test]
fn node_flows_never_cross() {
    let net = MlpSpec::new(vec![1, 1], Activation::Tanh, false).unwrap();
    let (model, _) = make_field(&FieldSpec::node(net), 0).unwrap();
    let w = [-2.0];
    let grid = Grid::new(0.0, 3.0, 0.01).unwrap();
    let up = model.forward(&w, &[1.0], grid, Method::Rk4).unwrap();
    let down = model.forward(&w, &[-1.0], grid, Method::Rk4).unwrap();
    for k in 0..grid.len() {
        assert!(up.row(k)[0] > 1e-9 && down.row(k)[0] < -1e-9);
        assert!((up.row(k)[0] - (-2.0 * grid.time(k)).exp()).abs() < 1e-9);
    }
}

fn check_model_gradients(spec: FieldSpec, x: &[f64], t1: f64, step: f64) {
    let (model, p) = make_field(&spec, 17).unwrap();
    let grid = Grid::new(0.0, t1, step).unwrap();
    let k = model.data_dim();
    let fwd = model.forward(p.values(), x, grid, Method::Rk4).unwrap();
    let cov = readout_vjp(&ReadoutHead::ProjectFirst(k), model.dim(), &sq_loss(&fwd, k).1).unwrap();
    let loss = ObservationLoss::terminal(t1, cov).unwrap();
    let g = model.backward(p.values(), &fwd, &loss, Method::Rk4).unwrap();
    let fd_w = finite_diff_gradient(
        |w| Ok(sq_loss(&model.forward(w, x, grid, Method::Rk4)?, k).0),
        p.values(),
        1e-6,
    )
    .unwrap();
    assert!(
        max_rel(&g.w_grad, &fd_w) < 1e-5,
        "{}: {}",
        spec.kind,
        max_rel(&g.w_grad, &fd_w)
    );
    let fd_x = finite_diff_gradient(
        |x| Ok(sq_loss(&model.forward(p.values(), x, grid, Method::Rk4)?, k).0),
        x,
        1e-6,
    )
    .unwrap();
    assert!(max_rel(&g.input_grad[..k], &fd_x) < 1e-5, "{}", spec.kind);
}

#[test]
fn learned_models_have_exact_gradients() {
    let x = [0.4, -0.3];
    check_model_gradients(FieldSpec::node(mlp(&[2, 6, 2])), &x, 1.0, 0.02);
    check_model_gradients(FieldSpec::anode(2, 1, mlp(&[3, 6, 3])), &x, 1.0, 0.02);
    check_model_gradients(FieldSpec::ndde(mlp(&[4, 6, 2]), 0.5, DelayInput::Concat), &x, 1.0, 0.02);
    check_model_gradients(FieldSpec::ndde(mlp(&[2, 6, 2]), 0.5, DelayInput::Sum), &x, 1.0, 0.02);
    check_model_gradients(
        FieldSpec::ndde(mlp(&[2, 6, 2]), 0.5, DelayInput::DelayedOnly),
        &x,
        1.0,
        0.02,
    );
    check_model_gradients(
        FieldSpec::node_plus_ndde(mlp(&[4, 6, 2]), mlp(&[2, 4, 2]), 0.5, DelayInput::Concat),
        &x,
        1.0,
        0.02,
    );
    check_model_gradients(FieldSpec::universal(mlp(&[2, 6, 2]), 1.0), &x, 1.0, 0.02);
}

#[test]
fn piecewise_model_gradient_matches_dense() {
    let spec = FieldSpec::node_plus_ndde(mlp(&[4, 6, 2]), mlp(&[2, 4, 2]), 0.5, DelayInput::Concat);
    let (model, p) = make_field(&spec, 2).unwrap();
    let x = [0.1, 0.8];
    let grid = Grid::new(0.0, 1.5, 0.025).unwrap();
    let fwd = model.forward(p.values(), &x, grid, Method::Rk4).unwrap();
    let loss = ObservationLoss::terminal(1.5, sq_loss(&fwd, 2).1).unwrap();
    let dense = model.backward(p.values(), &fwd, &loss, Method::Rk4).unwrap();
    let hist = model.history(p.values(), &x).unwrap();
    let (cps, pw) = model
        .gradient_piecewise(p.values(), &hist, 0.025, 3, &loss, Method::Rk4)
        .unwrap();
    assert_eq!(cps.last().unwrap().as_slice(), fwd.last());
    assert!(max_rel(&dense.w_grad, &pw.w_grad) < 1e-8);
}
