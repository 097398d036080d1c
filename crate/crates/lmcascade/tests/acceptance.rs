//! Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
//! stderr.
//!
//! `LMCASCADE_ACCEPTANCE_DIR` picks the work directory (default: cargo's
//! per-target tmp dir). `LMCASCADE_ACCEPTANCE_QUICK=1` skips everything
//! that needs the training ladder. `LMCASCADE_ACCEPTANCE_STRICT=1` turns a
//! failed criterion into a non-zero exit. `LMCASCADE_ACCEPTANCE_EPOCHS=N`
//! shortens the ladder for dry runs; its verdicts then mean nothing.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lmcascade::checkpoint;
use lmcascade::config::RunConfig;
use lmcascade::core::cascade::{
    cascade_forward, cascade_loss, loss_weights, register, Architecture, Model, NoiseMode, ScheduleConfig,
};
use lmcascade::core::diffgraph::gradcheck::oracle_suite;
use lmcascade::core::diffgraph::{Graph, Shape, Tensor};
use lmcascade::core::eval::{chi2_3_quantile, confidence_volume, mc_predict, CHI2_3_P90};
use lmcascade::core::phantom::{generate_sample, plan_dataset, LandmarkSample};
use lmcascade::core::train::{Mode, Trainer};
use lmcascade::core::{Geometry, WorldPoint};
use lmcascade::dataset;
use lmcascade::evaluate::{evaluate, CkptArg, EvalOptions, EvalReport};
use lmcascade::peak_alloc::{measure, PeakAlloc};
use lmcascade::training::{train, TrainOptions, METRICS};
use rayon::prelude::*;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Res<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_path() -> PathBuf {
    workspace().join("configs/desk.json")
}

fn desk() -> Res<RunConfig> {
    RunConfig::load(Some(&desk_path()), &[]).map_err(err)
}

fn desk_sample(cfg: &RunConfig, seed: u64) -> Res<LandmarkSample> {
    let plan = plan_dataset(1, [1, 0, 0], seed).map_err(err)?;
    generate_sample(&cfg.phantom, &cfg.cascade.scales, &plan[0]).map_err(err)
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("  .. {}", msg.as_ref());
}

// ---------------------------------------------------------------- oracles

fn c1_gradients() -> Res<Outcome> {
    let t = Instant::now();
    let checks = oracle_suite(20, 0).map_err(err)?;
    let elapsed = t.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120) && checks.iter().all(|c| c.seeds >= 20);
    Ok(Outcome::new(
        pass,
        format!(
            "{} ops x 20 seeds, max rel error {worst:.2e}, {:.1}s{}",
            checks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(" "))
            }
        ),
    ))
}

fn com_of(dims: [usize; 3], spacing: f64, w: Vec<f64>) -> Res<[f64; 3]> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(Shape::new(1, dims), w).map_err(err)?);
    let geom = Geometry::isotropic(spacing, [0.0; 3]).map_err(err)?;
    let c = g.center_of_mass(x, geom).map_err(err)?;
    let v = g.value(c).data();
    Ok([v[0], v[1], v[2]])
}

fn c2_center_of_mass() -> Res<Outcome> {
    let uniform = com_of([3, 3, 3], 1.0, vec![1.0; 27])?;
    let mut hot = vec![0.0; 5 * 3];
    hot[2 * 5 + 4] = 1.0;
    let one_hot = com_of([5, 3, 1], 2.0, hot)?;
    let mut two = vec![0.0; 5];
    two[0] = 0.25;
    two[4] = 0.75;
    let two_point = com_of([5, 1, 1], 1.0, two)?;
    let cases = [
        (uniform, [1.0, 1.0, 1.0]),
        (one_hot, [8.0, 4.0, 0.0]),
        (two_point, [3.0, 0.0, 0.0]),
    ];
    let worst = cases
        .iter()
        .flat_map(|(got, want)| (0..3).map(move |d| (got[d] - want[d]).abs()))
        .fold(0.0, f64::max);
    Ok(Outcome::new(
        worst <= 1e-10,
        format!("uniform {uniform:?}, one-hot {one_hot:?}, two-point {two_point:?}, max deviation {worst:.1e}"),
    ))
}

fn c4_schedule() -> Res<Outcome> {
    let sched = ScheduleConfig {
        total_epochs: 500,
        middle_peak: 1.0,
        breakpoints: None,
    };
    let w = |e| loss_weights(e, &sched, 4);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let mut jump = 0.0f64;
    for e in 1..=500 {
        let (a, b) = (w(e - 1), w(e));
        jump = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(jump, f64::max);
    }
    let ok = close(&w(0), &[1.0, 0.0, 0.0, 0.0])
        && close(&w(500), &[0.0, 0.0, 0.0, 1.0])
        && close(&w(250), &[0.5, 1.0, 1.0, 0.5]);
    Ok(Outcome::new(
        ok && jump < 0.011,
        format!(
            "w(0)={:?} w(250)={:?} w(500)={:?} max jump {jump:.4}",
            w(0),
            w(250),
            w(500)
        ),
    ))
}

fn c5_gradient_flow() -> Res<Outcome> {
    let cfg = desk()?;
    let cc = &cfg.cascade;
    let n = cc.scales.len();
    let mut weights = vec![0.0; n];
    weights[n - 1] = 1.0;
    let mut norms = Vec::new();
    let mut detached = Vec::new();
    for init in 0..10u64 {
        let sample = desk_sample(&cfg, 100 + init)?;
        let model = Model::build(Architecture::Cascade, cc, init).map_err(err)?;
        for detach in [false, true] {
            let mut g = Graph::<f32>::new();
            let h = register(&mut g, &model, &vec![true; n]);
            let out =
                cascade_forward(&mut g, &model, &h, cc, &sample.pyramid, &NoiseMode::Off, detach, n).map_err(err)?;
            let loss = cascade_loss(&mut g, &out, &sample.landmarks, &weights).map_err(err)?;
            g.backward(loss).map_err(err)?;
            let sq: f64 = h.nets[0]
                .iter()
                .filter_map(|&id| g.grad(id))
                .flat_map(|gr| gr.iter().map(|&v| (v as f64) * (v as f64)))
                .sum();
            if detach { &mut detached } else { &mut norms }.push(sq.sqrt());
        }
    }
    let positive = norms.iter().filter(|&&v| v > 0.0 && v.is_finite()).count();
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_detached = detached.iter().cloned().fold(0.0, f64::max);
    Ok(Outcome::new(
        positive == 10,
        format!("{positive}/10 inits with nonzero coarse gradient (min norm {min:.3e}; detached crops give {max_detached:.1e})"),
    ))
}

/// Simpson integration of the chi-square(3) density, substituting `x = u^2`
/// so the integrand is smooth at the origin.
fn chi2_3_cdf_numeric(x: f64) -> f64 {
    let b = x.sqrt();
    let n = 4000;
    let h = b / n as f64;
    let f = |u: f64| 2.0 * u * u * (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn c8_confidence_volume() -> Res<Outcome> {
    let v = confidence_volume([1.0; 3], 0.9).map_err(err)?;
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if chi2_3_cdf_numeric(mid) < 0.9 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let numeric = 0.5 * (lo + hi);
    let rounded = (numeric * 1e4).round() / 1e4;
    let embedded = chi2_3_quantile(0.9).map_err(err)?;
    let pass = (v - 65.47).abs() <= 0.1 && rounded == CHI2_3_P90 && embedded == CHI2_3_P90;
    Ok(Outcome::new(
        pass,
        format!("volume {v:.4} mm^3, integrated quantile {numeric:.6} (embedded {CHI2_3_P90})"),
    ))
}

fn c9_mc_stub() -> Res<Outcome> {
    let mut cfg = desk()?;
    cfg.cascade.noise_amplitude = 5.0;
    let cc = &cfg.cascade;
    let mut model = Model::build(Architecture::Cascade, cc, 9).map_err(err)?;
    // A zero head gives a flat heatmap, whose center of mass is the crop center.
    let finest = model.nets.len() - 1;
    for p in model.nets[finest]
        .params
        .iter_mut()
        .filter(|p| p.name.starts_with("head."))
    {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let sample = desk_sample(&cfg, 9)?;
    let preds = mc_predict(&model, cc, &sample.pyramid, 50, 0).map_err(err)?;
    let want = 5.0 / 3f64.sqrt();
    let stds: Vec<f64> = preds.iter().flat_map(|p| p.std).collect();
    let worst = stds.iter().map(|s| (s - want).abs() / want).fold(0.0, f64::max);
    Ok(Outcome::new(
        worst <= 0.15,
        format!(
            "per-axis std {:?} mm vs {want:.3}, worst relative deviation {:.1}%",
            stds.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            worst * 100.0
        ),
    ))
}

// ------------------------------------------------------------ reproducibility

fn files_below(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = fs::read(&p) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> Res<()> {
    let o = Command::new(env!("CARGO_BIN_EXE_lmcascade"))
        .args(args)
        .output()
        .map_err(err)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "lmcascade {}: {}",
            args[0],
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn c10_reproducibility(work: &Path) -> Res<Outcome> {
    let cfg = desk_path();
    let cfg = cfg.to_str().unwrap();
    let mut trees = Vec::new();
    // Both runs use the same paths, since the summary records them.
    let root = work.join("repro");
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&root);
        let p = |s: &str| root.join(s).to_str().unwrap().to_string();
        let (data, run, report) = (p("data"), p("run"), p("eval"));
        cli(&["gen", "--config", cfg, "--out", &data, "--n", "6", "--seed", "3"])?;
        cli(&[
            "train",
            "--config",
            cfg,
            "--data",
            &data,
            "--out",
            &run,
            "--seed",
            "3",
            "-q",
            "--mode",
            "multiscale_e2e_noise",
            "--set",
            "train.epochs=2",
            "--set",
            "schedule.total_epochs=2",
        ])?;
        cli(&[
            "eval", "--config", cfg, "--data", &data, "--ckpt", &run, "--mc", "5", "--seed", "3", "--out", &report,
        ])?;
        trees.push((
            files_below(&root.join("data")),
            files_below(&root.join("run")),
            files_below(&root.join("eval")),
        ));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let same_data = a.0 == b.0;
    let same_run = a.1 == b.1;
    let same_eval = a.2 == b.2;
    let metrics = a.1.iter().any(|(p, _)| p == Path::new(METRICS));
    let report = a.2.iter().any(|(p, _)| p == Path::new("report.csv"));
    Ok(Outcome::new(
        same_data && same_run && same_eval && metrics && report,
        format!(
            "dataset {} files {}, run dir {} files {}, eval dir {} files {}",
            a.0.len(),
            verdict(same_data),
            a.1.len(),
            verdict(same_run),
            a.2.len(),
            verdict(same_eval)
        ),
    ))
}

fn verdict(same: bool) -> &'static str {
    if same {
        "identical"
    } else {
        "DIFFER"
    }
}

// ------------------------------------------------------------------ memory

fn c11_memory() -> Res<Outcome> {
    let cfg = desk()?;
    let sample = desk_sample(&cfg, 11)?;
    let mut tc = cfg.train.clone();
    tc.mode = Mode::MultiscaleE2e;
    let mut cascade = Trainer::new(tc.clone(), cfg.cascade.clone(), cfg.schedule.clone()).map_err(err)?;
    let (r, cascade_peak) = measure(|| cascade.step(&sample, 0, 0));
    r.map_err(err)?;

    let mut fine = cfg.cascade.clone();
    fine.single_scale.spacing = *fine.scales.last().unwrap();
    tc.mode = Mode::SingleScaleCom;
    let mut single = Trainer::new(tc, fine.clone(), cfg.schedule.clone()).map_err(err)?;
    let (r, single_peak) = measure(|| single.step(&sample, 0, 0));
    r.map_err(err)?;
    let ratio = cascade_peak as f64 / single_peak as f64;
    let dims = sample.pyramid.last().unwrap().dims();
    Ok(Outcome::new(
        ratio < 4.0,
        format!(
            "cascade step peak {:.1} MiB, single-scale {:?} at {} mm peak {:.1} MiB, ratio {ratio:.3}",
            cascade_peak as f64 / 1048576.0,
            dims,
            fine.single_scale.spacing,
            single_peak as f64 / 1048576.0
        ),
    ))
}

// ------------------------------------------------------------------ ladder

struct Ladder {
    reports: Vec<EvalReport>,
    run_dirs: BTreeMap<(u64, Mode), PathBuf>,
    smoke: Duration,
    smoke_medians: Vec<(Mode, f64)>,
}

fn train_all(cfg: &RunConfig, data: &Path, runs: &Path, jobs: &[(u64, Mode)]) -> Res<BTreeMap<(u64, Mode), PathBuf>> {
    let done = jobs
        .par_iter()
        .map(|&(seed, mode)| -> Res<((u64, Mode), PathBuf)> {
            let mut c = cfg.clone();
            c.train.mode = mode;
            c.train.seed = seed;
            let out = runs.join(format!("{mode}_seed{seed}"));
            let t = Instant::now();
            let r = train(
                &c,
                &TrainOptions {
                    data: data.to_path_buf(),
                    out: out.clone(),
                    resume: None,
                    stop_after: None,
                    verbose: false,
                },
            )
            .map_err(err)?;
            progress(format!(
                "trained {mode} seed {seed} in {:.0}s, best val {:.3} mm",
                t.elapsed().as_secs_f64(),
                r.best.map_or(f64::NAN, |b| b.val_error_mm)
            ));
            Ok(((seed, mode), out))
        })
        .collect::<Res<Vec<_>>>()?;
    Ok(done.into_iter().collect())
}

fn eval_seed(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    seed: u64,
    runs: &BTreeMap<(u64, Mode), PathBuf>,
    modes: &[Mode],
) -> Res<EvalReport> {
    let opts = EvalOptions {
        data: data.to_path_buf(),
        ckpts: modes
            .iter()
            .map(|&m| CkptArg {
                mode: Some(m),
                path: runs[&(seed, m)].clone(),
            })
            .collect(),
        mc: cfg.eval.mc_passes,
        out: out.to_path_buf(),
        seed,
        single_pass: false,
    };
    evaluate(cfg, &opts).map_err(err)
}

fn median(rep: &EvalReport, m: Mode) -> f64 {
    rep.summary.modes.get(m.name()).map_or(f64::NAN, |s| s.median)
}

fn run_ladder(work: &Path) -> Res<Ladder> {
    let mut cfg = desk()?;
    if let Some(e) = std::env::var("LMCASCADE_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        cfg.train.epochs = e;
        cfg.schedule.total_epochs = e;
    }
    let root = work.join("ladder");
    let _ = fs::remove_dir_all(&root);

    // Reduced version first: 8 phantoms, 50 epochs, two modes.
    let t = Instant::now();
    let mut small = cfg.clone();
    small.train.epochs = cfg.train.epochs.min(50);
    small.schedule.total_epochs = small.train.epochs;
    let sdata = root.join("smoke/data");
    dataset::generate(&small, &sdata, 8, small.phantom.seed, true).map_err(err)?;
    let smoke_modes = [Mode::MultiscaleE2eNoise, Mode::SingleScaleCom];
    let jobs: Vec<_> = smoke_modes.iter().map(|&m| (0, m)).collect();
    let sruns = train_all(&small, &sdata, &root.join("smoke/runs"), &jobs)?;
    let srep = eval_seed(&small, &sdata, &root.join("smoke/eval"), 0, &sruns, &smoke_modes)?;
    let smoke = t.elapsed();
    let smoke_medians = smoke_modes.iter().map(|&m| (m, median(&srep, m))).collect();
    progress(format!("smoke run finished in {:.0}s", smoke.as_secs_f64()));

    let data = root.join("data");
    let t = Instant::now();
    dataset::generate(&cfg, &data, cfg.dataset.n, cfg.phantom.seed, true).map_err(err)?;
    progress(format!(
        "generated {} phantoms in {:.0}s",
        cfg.dataset.n,
        t.elapsed().as_secs_f64()
    ));
    let jobs: Vec<_> = (0..3u64).flat_map(|s| Mode::ALL.iter().map(move |&m| (s, m))).collect();
    let run_dirs = train_all(&cfg, &data, &root.join("runs"), &jobs)?;
    let reports = (0..3u64)
        .map(|s| {
            eval_seed(
                &cfg,
                &data,
                &root.join(format!("eval_seed{s}")),
                s,
                &run_dirs,
                &Mode::ALL,
            )
        })
        .collect::<Res<Vec<_>>>()?;
    Ok(Ladder {
        reports,
        run_dirs,
        smoke,
        smoke_medians,
    })
}

/// Pairs `(i, j)`, `i < j`, whose medians are out of the expected order.
fn inversions(medians: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..medians.len() {
        for j in i + 1..medians.len() {
            // A missing median counts as out of order.
            if !matches!(
                medians[i].partial_cmp(&medians[j]),
                Some(Ordering::Less | Ordering::Equal)
            ) {
                out.push((i, j));
            }
        }
    }
    out
}

fn c6_ordering(l: &Ladder) -> Res<Outcome> {
    let mut good = 0;
    let mut extreme = 0;
    let mut parts = Vec::new();
    for (s, rep) in l.reports.iter().enumerate() {
        let med: Vec<f64> = Mode::ALL.iter().map(|&m| median(rep, m)).collect();
        let inv = inversions(&med);
        let adjacent = inv.len() <= 1 && inv.iter().all(|&(i, j)| j == i + 1);
        let ext = med[0] < med[4];
        good += adjacent as usize;
        extreme += ext as usize;
        parts.push(format!(
            "seed {s}: [{}] inversions {}",
            med.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" <= "),
            inv.len()
        ));
    }
    let smoke_ok = l.smoke < Duration::from_secs(30 * 60);
    parts.push(format!(
        "smoke {:.0}s ({})",
        l.smoke.as_secs_f64(),
        l.smoke_medians
            .iter()
            .map(|(m, v)| format!("{m} {v:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    Ok(Outcome::new(good == 3 && extreme == 3 && smoke_ok, parts.join("; ")))
}

fn c7_uncertainty(l: &Ladder) -> Res<Outcome> {
    let mut hits = 0;
    let mut parts = Vec::new();
    for (s, rep) in l.reports.iter().enumerate() {
        let p = rep
            .summary
            .modes
            .get(Mode::MultiscaleE2eNoise.name())
            .and_then(|m| m.pearson)
            .ok_or("no correlation for the noise-trained mode")?;
        let ok = p.r > 0.0 && p.p < 0.05;
        hits += ok as usize;
        parts.push(format!("seed {s}: r={:.3} p={:.2e} n={}", p.r, p.p, p.n));
    }
    Ok(Outcome::new(
        hits >= 2,
        format!("{hits}/3 seeds significant; {}", parts.join("; ")),
    ))
}

fn c3_equivariance(l: &Ladder) -> Res<Outcome> {
    let path = l.run_dirs[&(0, Mode::SingleScaleCom)].join(lmcascade::training::BEST);
    let ck = checkpoint::load(&path).map_err(err)?;
    let cc = &ck.config.cascade;
    let level = cc
        .single_scale_level()
        .ok_or("single-scale spacing is not a cascade scale")?;
    let net = &cc.single_scale.locnet;
    let s = 1isize << net.depth;
    let plans = plan_dataset(20, [0, 0, 20], 0xe9u64).map_err(err)?;
    let mut devs = Vec::new();
    let mut spacing = 0.0;
    for plan in &plans {
        let sample = generate_sample(&ck.config.phantom, &cc.scales, plan).map_err(err)?;
        let vol = &sample.pyramid[level];
        spacing = vol.spacing()[0];
        let dims = vol.dims();
        let base = ck.model().predict(cc, &sample.pyramid, &NoiseMode::Off).map_err(err)?;
        for sign in [1isize, -1] {
            let shift = [sign * s; 3];
            let inside = |p: WorldPoint| -> bool {
                let v = vol.world_to_voxel(p).unwrap();
                (0..3).all(|d| v[d] >= 8.0 && v[d] <= (dims[d] - 1) as f64 - 8.0)
            };
            let t = (sign * s) as f64 * spacing;
            let keep: Vec<usize> = (0..sample.landmarks.len())
                .filter(|&k| {
                    let g = sample.landmarks[k];
                    inside(g) && inside(WorldPoint::new(g.x + t, g.y + t, g.z + t))
                })
                .collect();
            if keep.is_empty() {
                continue;
            }
            let mut pyr = sample.pyramid.clone();
            pyr[level] = vol.circular_shift(shift);
            let moved = ck.model().predict(cc, &pyr, &NoiseMode::Off).map_err(err)?;
            for k in keep {
                let (a, b) = (base[k].to_array(), moved[k].to_array());
                devs.push((0..3).map(|d| (b[d] - a[d] - t).abs()).fold(0.0, f64::max));
            }
        }
    }
    let tol = 0.25 * spacing;
    devs.sort_by(f64::total_cmp);
    let worst = devs.last().copied().unwrap_or(f64::NAN);
    let within = devs.iter().filter(|&&d| d <= tol).count();
    Ok(Outcome::new(
        !devs.is_empty() && worst <= tol,
        format!(
            "{} landmark shifts of {s} voxels at {spacing} mm; per-axis deviation median {:.3} mm, worst {worst:.3} mm, {within} within the {tol} mm tolerance",
            devs.len(),
            devs.get(devs.len() / 2).copied().unwrap_or(f64::NAN)
        ),
    ))
}

// -------------------------------------------------------------------- main

fn guarded(f: impl FnOnce() -> Res<Outcome>) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        }
    }
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn main() {
    let work = std::env::var_os("LMCASCADE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    fs::create_dir_all(&work).expect("work directory");
    let quick = flag("LMCASCADE_ACCEPTANCE_QUICK");
    let started = Instant::now();

    let mut results: BTreeMap<usize, (&str, Option<Outcome>)> = BTreeMap::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Res<Outcome>| {
        let t = Instant::now();
        eprintln!("criterion {n} ({name}) ...");
        let o = guarded(f);
        eprintln!(
            "  .. {} in {:.1}s",
            if o.pass { "pass" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        results.insert(n, (name, Some(o)));
    };
    record(1, "gradient oracle suite", &c1_gradients);
    record(2, "analytic center of mass", &c2_center_of_mass);
    record(4, "loss schedule", &c4_schedule);
    record(5, "end-to-end gradient flow", &c5_gradient_flow);
    record(8, "confidence volume", &c8_confidence_volume);
    record(9, "Monte-Carlo stub", &c9_mc_stub);
    record(10, "reproducibility", &|| c10_reproducibility(&work));
    record(11, "memory", &c11_memory);

    if quick {
        for (n, name) in [
            (3, "shift equivariance"),
            (6, "mode ordering"),
            (7, "uncertainty correlation"),
        ] {
            results.insert(n, (name, None));
        }
    } else {
        eprintln!("training ladder ...");
        let t = Instant::now();
        match catch_unwind(AssertUnwindSafe(|| run_ladder(&work))) {
            Ok(Ok(ladder)) => {
                eprintln!("  .. ladder done in {:.0}s", t.elapsed().as_secs_f64());
                record(6, "mode ordering", &|| c6_ordering(&ladder));
                record(7, "uncertainty correlation", &|| c7_uncertainty(&ladder));
                record(3, "shift equivariance", &|| c3_equivariance(&ladder));
            }
            other => {
                let why = match other {
                    Ok(Err(e)) => e,
                    _ => "ladder panicked".to_string(),
                };
                for (n, name) in [
                    (3, "shift equivariance"),
                    (6, "mode ordering"),
                    (7, "uncertainty correlation"),
                ] {
                    results.insert(n, (name, Some(Outcome::new(false, format!("ladder failed: {why}")))));
                }
            }
        }
    }

    let mut passed = 0;
    let mut failed = 0;
    for (n, (name, o)) in &results {
        match o {
            Some(o) => {
                if o.pass {
                    passed += 1;
                } else {
                    failed += 1;
                }
                println!(
                    "{} criterion {n:>2} {name}: {}",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.detail
                );
            }
            None => println!("SKIP criterion {n:>2} {name}: quick mode"),
        }
    }
    println!(
        "acceptance: {passed} passed, {failed} failed, {} skipped in {:.0}s",
        results.len() - passed - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 && flag("LMCASCADE_ACCEPTANCE_STRICT") {
        std::process::exit(1);
    }
}
