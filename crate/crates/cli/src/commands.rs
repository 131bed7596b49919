use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndde::dde::{integrate_dde, integrate_ode, Grid, History, Method, Trajectory};
use ndde::models::{make_field, FieldSpec, Model, ModelKind, ReadoutHead};
use ndde::systems::{gen_annulus, LabeledSet, SystemKind, ToyLinearField, TrajectoryBatch};
use ndde::train::{gradcheck_run, train_run, Budget, GradMode, LossKind, TrainConfig, TrainData};

use crate::config::{Dataset, ExperimentConfig};
use crate::{CliError, RunArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

struct Prepared {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn prepare(args: &RunArgs) -> Result<Prepared, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = &args.mode {
        m.parse::<GradMode>()
            .map_err(|e| CliError::Config(format!("--mode: {e}")))?;
        cfg.train.mode = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    let out = cfg.output.dir.clone();
    Ok(Prepared { cfg, out })
}

/// Config snapshot plus everything else needed to rerun the command.
fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: Option<&ExperimentConfig>,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut m = format!("command={command}\nversion=ndde {VERSION}\n");
    if let Some(c) = cfg {
        let _ = writeln!(m, "data_seed={}\ntrain_seed={}", c.system.seed, c.train.seed);
    }
    for (k, v) in extra {
        let _ = writeln!(m, "{k}={v}");
    }
    if let Some(c) = cfg {
        m.push_str("[config]\n");
        m.push_str(&c.to_toml());
        fs::write(dir.join("config.toml"), c.to_toml())?;
    }
    fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

pub fn gen(args: &RunArgs) -> Result<(), CliError> {
    let p = prepare(args)?;
    let data_dir = p.out.join("data");
    fs::create_dir_all(&data_dir)?;
    match p.cfg.dataset()? {
        Dataset::Labeled(set) => fs::write(data_dir.join("annulus.csv"), set.to_csv())?,
        Dataset::Series { full, .. } => full.save(&data_dir)?,
    }
    write_manifest(&p.out, "gen", Some(&p.cfg), &[])?;
    println!("dataset written to {}", data_dir.display());
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<(), CliError> {
    let p = prepare(args)?;
    let tc = p.cfg.train_config()?;
    let data = p.cfg.dataset()?;
    let result = match &data {
        Dataset::Labeled(set) => train_run(&tc, TrainData::Classification(set)),
        Dataset::Series { train, tests, .. } => train_run(&tc, TrainData::TimeSeries { train, tests }),
    };
    let (report, failure) = match result {
        Ok(r) => (r, None),
        Err(f) => (*f.report, Some(f.error)),
    };
    report.write_dir(&p.out)?;
    write_manifest(&p.out, "train", Some(&p.cfg), &[("mode", mode_name(&tc))])?;
    if let Some(err) = failure {
        return Err(CliError::from(err));
    }
    let o = &p.cfg.output;
    if o.params {
        report.params.save(&p.out.join("params.bin"))?;
    }
    if o.predictions {
        let (model, _) = make_field(&tc.model, tc.seed)?;
        let csv = match &data {
            Dataset::Labeled(set) => transform_csv(&model, report.params.values(), set, &tc)?,
            Dataset::Series { train, tests, .. } => series_csv(&model, report.params.values(), train, tests, &tc)?,
        };
        fs::write(p.out.join("predictions.csv"), csv)?;
    }
    if o.plot_recipe {
        fs::write(p.out.join("plot.gp"), plot_recipe(matches!(data, Dataset::Labeled(_))))?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn mode_name(tc: &TrainConfig) -> String {
    match tc.mode {
        GradMode::Dense => "dense".into(),
        GradMode::Piecewise => "piecewise".into(),
    }
}

/// `x1,x2,label,h1,h2,...` with `h = h(T)` for every labeled point.
fn transform_csv(model: &Model, w: &[f64], set: &LabeledSet, tc: &TrainConfig) -> Result<String, CliError> {
    let t = tc.horizon.unwrap_or(1.0);
    let grid = Grid::new(0.0, t, tc.step)?;
    let mut out = String::from("x1,x2,label");
    for i in 0..model.dim() {
        let _ = write!(out, ",h{}", i + 1);
    }
    out.push('\n');
    for (p, l) in set.points.iter().zip(&set.labels) {
        let traj = model.forward(w, p, grid, tc.method)?;
        let _ = write!(out, "{:.16e},{:.16e},{l}", p[0], p[1]);
        for v in traj.last() {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Long format `window,member,t,component,target,prediction`.
fn series_csv(
    model: &Model,
    w: &[f64],
    train: &TrajectoryBatch,
    tests: &[(usize, TrajectoryBatch)],
    tc: &TrainConfig,
) -> Result<String, CliError> {
    let mut out = String::from("window,member,t,component,target,prediction\n");
    let mut emit = |name: &str, batch: &TrajectoryBatch, tabulated: bool| -> Result<(), CliError> {
        let Some(g) = batch.grid() else { return Ok(()) };
        let stride = (g.step() / tc.step).round() as usize;
        let model_grid = Grid::from_steps(0.0, tc.step, g.n_steps() * stride)?;
        for (m, truth) in batch.trajectories.iter().enumerate() {
            let pred = if tabulated
                && matches!(
                    model.kind(),
                    ModelKind::Ndde | ModelKind::Universal | ModelKind::AnalyticAnnulus
                ) {
                model.forward_from(w, truth.history(), model_grid, tc.method)?
            } else {
                model.forward(w, truth.row(0), model_grid, tc.method)?
            };
            for j in 0..g.len() {
                let row = pred.row(j * stride);
                for (c, target) in truth.row(j).iter().enumerate() {
                    let _ = writeln!(out, "{name},{m},{:.10e},{c},{target:.16e},{:.16e}", g.time(j), row[c]);
                }
            }
        }
        Ok(())
    };
    emit("train", train, false)?;
    if let Some((k, b)) = tests.last() {
        emit(&format!("test_{k}tau"), b, true)?;
    }
    Ok(out)
}

fn plot_recipe(classification: bool) -> &'static str {
    if classification {
        "# gnuplot -persist plot.gp\n\
         set datafile separator ','\n\
         set multiplot layout 1,2\n\
         set title 'input'\n\
         plot 'predictions.csv' every ::1 using 1:2:3 with points pt 7 ps 0.3 lc palette notitle\n\
         set title 'transformed'\n\
         plot 'predictions.csv' every ::1 using 4:5:3 with points pt 7 ps 0.3 lc palette notitle\n\
         unset multiplot\n"
    } else {
        "# gnuplot -persist plot.gp\n\
         set datafile separator ','\n\
         set multiplot layout 2,1\n\
         set logscale y\n\
         plot 'train_loss.csv' every ::1 using 1:2 with lines title 'train loss'\n\
         unset logscale y\n\
         plot 'predictions.csv' every ::1 using ($2==0 && $4==0 ? $3 : 1/0):5 with points title 'target', \\\n\
         \x20    '' every ::1 using ($2==0 && $4==0 ? $3 : 1/0):6 with lines title 'prediction'\n\
         unset multiplot\n"
    }
}

pub fn gradcheck(args: &RunArgs, members: usize, eps: f64, tol: f64) -> Result<(), CliError> {
    let p = prepare(args)?;
    let tc = p.cfg.train_config()?;
    let (_, params) = make_field(&tc.model, tc.seed)?;
    let data = p.cfg.dataset()?;
    let report = match &data {
        Dataset::Labeled(set) => gradcheck_run(&tc, TrainData::Classification(set), params.values(), members, eps)?,
        Dataset::Series { train, tests, .. } => gradcheck_run(
            &tc,
            TrainData::TimeSeries { train, tests },
            params.values(),
            members,
            eps,
        )?,
    };
    fs::create_dir_all(&p.out)?;
    fs::write(p.out.join("gradcheck.csv"), report.to_csv(tol))?;
    write_manifest(
        &p.out,
        "gradcheck",
        Some(&p.cfg),
        &[
            ("mode", mode_name(&tc)),
            ("members", members.to_string()),
            ("eps", eps.to_string()),
            ("tol", tol.to_string()),
        ],
    )?;
    let worst = report.max_rel_err();
    println!("components={} max_rel_err={worst:.3e} tolerance={tol:e}", params.len());
    if report.passes(tol) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "adjoint and finite differences disagree: max rel err {worst:.3e} > {tol:e}"
        )))
    }
}

pub fn demo_annulus(r: f64, tau: f64, step: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let set = gen_annulus(1000, 2000, 0.5, 1.0, 1.5, seed)?;
    let spec = FieldSpec::analytic_annulus(2, r, tau);
    let (model, params) = make_field(&spec, seed)?;
    let tc = TrainConfig {
        horizon: Some(tau),
        ..TrainConfig::new(
            spec,
            ReadoutHead::ProjectFirst(1),
            LossKind::Mse,
            1.0,
            Budget::Epochs(0),
            seed,
            step,
        )
    };
    tc.validate()?;
    let csv = transform_csv(&model, params.values(), &set, &tc)?;
    let (mut correct, mut margin) = (0usize, f64::INFINITY);
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        // inner points are pushed negative, outer ones positive
        let m = -v[2] * v[3];
        margin = margin.min(m);
        correct += (m > 0.0) as usize;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("annulus_transform.csv"), csv)?;
    fs::write(
        out.join("plot.gp"),
        plot_recipe(true).replace("predictions.csv", "annulus_transform.csv"),
    )?;
    write_manifest(
        out,
        "demo-annulus",
        None,
        &[
            ("r", r.to_string()),
            ("tau", tau.to_string()),
            ("step", step.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    println!("points={} correct={correct} min_margin={margin:.6}", set.len());
    Ok(())
}

pub fn demo_map(tau: f64, t1: f64, step: f64, out: &Path) -> Result<(), CliError> {
    let grid = Grid::new(0.0, t1, step)?;
    let a = [-2.0];
    let run = |x0: f64| -> Result<(Trajectory, Trajectory), CliError> {
        let dde = integrate_dde(
            &ToyLinearField,
            &a,
            &History::Constant(vec![x0]),
            tau,
            grid,
            Method::Rk4,
        )?;
        let ode = integrate_ode(&ToyLinearField, &a, &[x0], grid, Method::Rk4)?;
        Ok((dde, ode))
    };
    let (dm, om) = run(-1.0)?;
    let (dp, op) = run(1.0)?;
    let mut csv = String::from("t,dde_from_minus1,dde_from_plus1,ode_from_minus1,ode_from_plus1\n");
    for k in 0..grid.len() {
        let _ = writeln!(
            csv,
            "{:.10e},{:.16e},{:.16e},{:.16e},{:.16e}",
            grid.time(k),
            dm.row(k)[0],
            dp.row(k)[0],
            om.row(k)[0],
            op.row(k)[0]
        );
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("map.csv"), csv)?;
    fs::write(
        out.join("plot.gp"),
        "# gnuplot -persist plot.gp\nset datafile separator ','\n\
         plot for [c=2:5] 'map.csv' every ::1 using 1:c with lines title columnheader(c)\n",
    )?;
    write_manifest(
        out,
        "demo-map",
        None,
        &[
            ("tau", tau.to_string()),
            ("t1", t1.to_string()),
            ("step", step.to_string()),
            ("system", SystemKind::ToyLinear.to_string()),
        ],
    )?;
    println!(
        "T={t1} dde: -1 -> {:.9}, +1 -> {:.9}; ode: -1 -> {:.9}, +1 -> {:.9}",
        dm.last()[0],
        dp.last()[0],
        om.last()[0],
        op.last()[0]
    );
    Ok(())
}

fn read_summary(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let path = dir.join("summary.txt");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(text
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Columns shared by every report; wall-clock time is left out so tables
/// of repeated runs compare equal.
const COLUMNS: [&str; 7] = [
    "final_train_loss",
    "final_test_loss_1tau",
    "final_test_loss_2tau",
    "final_test_loss_5tau",
    "final_accuracy",
    "iterations",
    "max_rel_err",
];

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut table = format!("run,model,seed,{}\n", COLUMNS.join(","));
    let mut groups: BTreeMap<String, Vec<BTreeMap<String, String>>> = BTreeMap::new();
    for dir in runs {
        let s = read_summary(dir)?;
        let get = |k: &str| s.get(k).cloned().unwrap_or_default();
        let _ = write!(table, "{},{},{}", dir.display(), get("model"), get("seed"));
        for c in COLUMNS {
            let _ = write!(table, ",{}", get(c));
        }
        table.push('\n');
        groups.entry(get("model")).or_default().push(s);
    }
    let mut by_model = String::from("model,runs");
    for c in &COLUMNS[..5] {
        let _ = write!(by_model, ",mean_{c}");
    }
    by_model.push('\n');
    for (model, rows) in &groups {
        let _ = write!(by_model, "{model},{}", rows.len());
        for c in &COLUMNS[..5] {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(*c)?.parse().ok()).collect();
            if vals.is_empty() {
                by_model.push(',');
            } else {
                let _ = write!(by_model, ",{:.10e}", vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        by_model.push('\n');
    }
    print!("{table}\n{by_model}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), &table)?;
        fs::write(dir.join("report_by_model.csv"), &by_model)?;
    }
    Ok(())
}
