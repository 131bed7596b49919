use super::*;
use crate::dde::integrate_ode;
use crate::field::FieldGrads;

fn grid(t1: f64, step: f64) -> Grid {
    Grid::new(0.0, t1, step).unwrap()
}

#[test]
fn annulus_defaults_respect_shells() {
    let set = gen_annulus(1000, 2000, 0.5, 1.0, 1.5, 7).unwrap();
    assert_eq!(set.len(), 3000);
    assert_eq!(set.count(1.0), 1000);
    assert_eq!(set.count(-1.0), 2000);
    for (p, &l) in set.points.iter().zip(&set.labels) {
        assert_eq!(set.label_of(*p), Some(l));
    }
    assert_eq!(set, gen_annulus(1000, 2000, 0.5, 1.0, 1.5, 7).unwrap());
    assert!(gen_annulus(0, 10, 0.5, 1.0, 1.5, 7)
        .unwrap()
        .labels
        .iter()
        .all(|&l| l == -1.0));
    assert!(gen_annulus(1, 1, 1.0, 0.5, 1.5, 7).is_err());
}

#[test]
fn outer_radii_follow_area_law() {
    let set = gen_annulus(0, 2000, 0.5, 1.0, 1.5, 99).unwrap();
    let mut r: Vec<f64> = set.points.iter().map(|p| p[0].hypot(p[1])).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    let cdf = |x: f64| (x * x - 1.0) / (1.5f64 * 1.5 - 1.0);
    let ks = r
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS statistic {ks}");
}

#[test]
fn toy_linear_reaches_minus_one() {
    let b = gen_scalar_dde(SystemKind::ToyLinear, &[-2.0], 1, grid(1.0, 0.01), 1.0, (1.0, 1.0), 0).unwrap();
    assert!((b.trajectories[0].last()[0] + 1.0).abs() < 1e-9);
}

#[test]
fn population_equilibrium_is_fixed() {
    let b = gen_scalar_dde(SystemKind::Population, &[1.8], 1, grid(8.0, 0.01), 1.0, (1.0, 1.0), 0).unwrap();
    assert!(b.trajectories[0].states().iter().all(|&x| x == 1.0));
}

#[test]
fn population_stays_positive() {
    let b = gen_scalar_dde(SystemKind::Population, &[1.8], 100, grid(8.0, 0.01), 1.0, (0.1, 1.2), 3).unwrap();
    assert_eq!(b.len(), 100);
    assert!(b.trajectories.iter().all(|t| t.states().iter().all(|&x| x > 0.0)));
}

#[test]
fn mackey_glass_is_bounded_and_sensitive() {
    let params = SystemKind::MackeyGlass.default_params();
    let g = grid(8.0, 0.01);
    let b = gen_scalar_dde(SystemKind::MackeyGlass, &params, 20, g, 1.0, (0.1, 1.2), 5).unwrap();
    for t in &b.trajectories {
        assert!(t.states().iter().all(|&x| x > 0.0 && x < 3.0));
    }
    let eps = 1e-6;
    let run = |x0: f64| gen_scalar_dde(SystemKind::MackeyGlass, &params, 1, g, 1.0, (x0, x0), 0).unwrap();
    let (a, c) = (run(0.5), run(0.5 + eps));
    let gap = a.trajectories[0]
        .states()
        .iter()
        .zip(c.trajectories[0].states())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(gap > 10.0 * eps, "gap {gap}");
}

#[test]
fn generators_are_deterministic() {
    let g = grid(4.0, 0.01);
    let a = gen_scalar_dde(SystemKind::Population, &[1.8], 5, g, 1.0, (0.1, 1.2), 42).unwrap();
    let b = gen_scalar_dde(SystemKind::Population, &[1.8], 5, g, 1.0, (0.1, 1.2), 42).unwrap();
    for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
        assert_eq!(x.states(), y.states());
    }
    let c = gen_scalar_dde(SystemKind::Population, &[1.8], 5, g, 1.0, (0.1, 1.2), 43).unwrap();
    assert_ne!(a.trajectories[0].row(0), c.trajectories[0].row(0));
}

#[test]
fn generator_checks_parameters() {
    assert!(gen_scalar_dde(SystemKind::MackeyGlass, &[4.0], 1, grid(1.0, 0.01), 1.0, (0.5, 0.5), 0).is_err());
    assert!(gen_scalar_dde(SystemKind::Population, &[1.8], 1, grid(1.0, 0.01), 0.333, (0.5, 0.5), 0).is_err());
}

#[test]
fn divergence_names_the_trajectory() {
    let err = gen_scalar_dde(SystemKind::Population, &[1.8], 3, grid(8.0, 0.01), 1.0, (-0.5, -0.1), 0).unwrap_err();
    match err {
        Error::Divergence { context, .. } => assert!(context.contains("trajectory 0"), "{context}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn spiral_defaults_give_26_rows() {
    let a = SystemKind::Spiral.default_params();
    let t = gen_spiral2d(&a, &[0.0, 1.0], 0.5, grid(2.5, 0.005)).unwrap();
    let obs = t.subsample(20).unwrap();
    assert_eq!(obs.grid().len(), 26);
    assert!((obs.grid().step() - 0.1).abs() < 1e-15);
    let still = gen_spiral2d(&[0.0; 4], &[0.3, -0.2], 0.5, grid(2.5, 0.1)).unwrap();
    assert!(still.rows().all(|r| r == [0.3, -0.2]));
}

/// `A·tanh(2x)`, the vanishing-delay limit of the spiral.
struct DoubledSpiral;

impl VectorField for DoubledSpiral {
    fn dim(&self) -> usize {
        2
    }
    fn param_count(&self) -> usize {
        4
    }
    fn eval(&self, w: &[f64], h: &[f64], _y: &[f64], t: f64, out: &mut [f64]) {
        SpiralField.eval(w, h, h, t, out);
    }
    fn vjp(&self, _: &[f64], _: &[f64], _: &[f64], _: f64, _: &[f64], _: FieldGrads<'_>) {
        unimplemented!()
    }
}

#[test]
fn spiral_with_one_step_delay_approaches_ode() {
    let a = SystemKind::Spiral.default_params();
    let mut prev = f64::INFINITY;
    for step in [0.01, 0.005, 0.0025] {
        let g = grid(2.5, step);
        let dde = gen_spiral2d(&a, &[0.0, 1.0], step, g).unwrap();
        let ode = integrate_ode(&DoubledSpiral, &a, &[0.0, 1.0], g, Method::Rk4).unwrap();
        let sup = dde
            .states()
            .iter()
            .zip(ode.states())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(sup < 5.0 * step, "step {step}: {sup}");
        assert!(sup < prev);
        prev = sup;
    }
}

fn toy_batch() -> TrajectoryBatch {
    gen_scalar_dde(SystemKind::Population, &[1.8], 3, grid(8.0, 0.05), 1.0, (0.1, 1.2), 1).unwrap()
}

#[test]
fn split_produces_three_horizons() {
    let batch = toy_batch();
    let (train, tests) = split_timeseries(&batch, 3.0).unwrap();
    assert_eq!(train.grid().unwrap().len(), 61);
    let spans: Vec<(f64, f64)> = tests
        .iter()
        .map(|(_, b)| (b.grid().unwrap().t0(), b.grid().unwrap().t1()))
        .collect();
    for (got, want) in spans.iter().zip([(3.0, 4.0), (3.0, 5.0), (3.0, 8.0)]) {
        assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9);
    }
    let five = &tests[2].1;
    assert_eq!(
        train.grid().unwrap().len() + five.grid().unwrap().len(),
        batch.grid().unwrap().len() + 1
    );
    // boundary row shared, nothing else
    assert_eq!(train.trajectories[0].last(), five.trajectories[0].row(0));
    match five.trajectories[0].history() {
        History::Tabulated(h) => {
            assert_eq!(h.rows.len(), 21);
            assert_eq!(h.rows[20], five.trajectories[0].row(0));
            assert_eq!(h.rows[0], batch.trajectories[0].row(40));
        }
        other => panic!("unexpected history {other:?}"),
    }
    assert!(split_timeseries(&batch, 8.0).is_err());
    assert!(split_timeseries(&batch, 3.01).is_err());
}

#[test]
fn early_split_pads_history_with_initial_value() {
    let batch = toy_batch();
    let (_, tests) = split_timeseries(&batch, 0.5).unwrap();
    match tests[0].1.trajectories[1].history() {
        History::Tabulated(h) => {
            let x0 = batch.trajectories[1].row(0);
            assert_eq!(h.rows[0], x0);
            assert_eq!(h.rows[10], x0);
            assert_eq!(h.rows[11], batch.trajectories[1].row(1));
        }
        other => panic!("unexpected history {other:?}"),
    }
}

#[test]
fn batch_round_trips_through_files() {
    let dir = std::env::temp_dir().join(format!("ndde-batch-{}", std::process::id()));
    let mut batch = toy_batch();
    batch.split_time = Some(3.0);
    batch.save(&dir).unwrap();
    let back = TrajectoryBatch::load(&dir).unwrap();
    assert_eq!(back.system, SystemKind::Population);
    assert_eq!(back.params, vec![1.8]);
    assert_eq!(back.split_time, Some(3.0));
    assert_eq!(back.seed, 1);
    for (a, b) in batch.trajectories.iter().zip(&back.trajectories) {
        assert_eq!(a.states(), b.states());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
#[allow(clippy::type_complexity)]
fn system_field_gradients_match_fd() {
    use crate::adjoint::{finite_diff_gradient, rel_err};
    let cases: [(&dyn VectorField, Vec<f64>, Vec<f64>, Vec<f64>); 4] = [
        (&ToyLinearField, vec![-2.0], vec![0.3], vec![0.7]),
        (&PopulationField, vec![1.8], vec![0.3], vec![0.7]),
        (&MackeyGlassField, vec![4.0, 9.65, 2.0], vec![0.9], vec![1.1]),
        (
            &SpiralField,
            vec![-1.0, 1.0, -1.0, -1.0],
            vec![0.2, 0.5],
            vec![-0.4, 0.1],
        ),
    ];
    for (f, w, h, y) in cases {
        let d = f.dim();
        let v: Vec<f64> = (0..d).map(|i| 1.0 - 0.3 * i as f64).collect();
        let (mut gh, mut gy, mut gw) = (vec![0.0; d], vec![0.0; d], vec![0.0; w.len()]);
        f.vjp(
            &w,
            &h,
            &y,
            0.0,
            &v,
            FieldGrads {
                h: &mut gh,
                y: &mut gy,
                w: &mut gw,
            },
        );
        let dot = |out: &[f64]| out.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        let eval = |w: &[f64], h: &[f64], y: &[f64]| {
            let mut out = vec![0.0; d];
            f.eval(w, h, y, 0.0, &mut out);
            dot(&out)
        };
        let fw = finite_diff_gradient(|p| Ok(eval(p, &h, &y)), &w, 1e-6).unwrap();
        let fh = finite_diff_gradient(|p| Ok(eval(&w, p, &y)), &h, 1e-6).unwrap();
        let fy = finite_diff_gradient(|p| Ok(eval(&w, &h, p)), &y, 1e-6).unwrap();
        for (a, b) in gw.iter().chain(&gh).chain(&gy).zip(fw.iter().chain(&fh).chain(&fy)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-6, "{a} vs {b}");
        }
    }
}
