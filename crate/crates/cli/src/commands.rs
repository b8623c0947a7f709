use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use serde::Serialize;

use nav_core::collect::{collect_with, CollectConfig, EnvChoice};
use nav_core::dataset::{dataset_stats, load_dataset, split_dataset, SplitSpec};
use nav_core::nets::{load_weights, model_suite, save_weights, Arch};
use nav_core::policy::{run_episode, NetworkPolicy, Termination};
use nav_core::train::{evaluate_rmse, grad_cam, train_with, GradCam, RmseReport, TrainConfig};
use nav_core::world::EnvType;
use nav_gateway::{ServeConfig, SessionConfig};
use nav_tensor::{layer_suite, GradCheckOptions};

use crate::{emit, log, CliError, Settings};

type Result<T> = std::result::Result<T, CliError>;

pub fn gen_data(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let path = s.require(&s.out, "out")?;
    let mut cfg = CollectConfig::for_choice(s.env_or(EnvChoice::Mixed), s.records, s.seed);
    cfg.dr_fraction = s.dr_fraction;
    let t0 = Instant::now();
    let mut last = 0;
    let summary = collect_with(path, &cfg, |done, total| {
        if done == total || done >= last + 500 {
            last = done;
            log(format_args!("{done}/{total} records"));
        }
    })?;
    log(format_args!("wrote {} in {:.1}s", path.display(), t0.elapsed().as_secs_f64()));
    emit(out, "dataset", &serde_json::json!({"path": path, "summary": summary}))
}

fn split(s: &Settings, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(split_dataset(
        n,
        &SplitSpec {
            train_fraction: s.split,
            seed: s.seed,
        },
    )?)
}

#[derive(Serialize)]
struct Rmse<'a> {
    arch: Arch,
    #[serde(flatten)]
    report: &'a RmseReport,
}

pub fn train(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let data = s.input(&s.data, "data")?;
    let dest = s.require(&s.out, "out")?;
    let net = s.net();
    let t0 = Instant::now();
    let ds = load_dataset(data, &net)?;
    let (train_idx, test_idx) = split(s, ds.len())?;
    log(format_args!("{} records, {} for training", ds.len(), train_idx.len()));
    let cfg = TrainConfig {
        lr: s.lr,
        momentum: s.momentum,
        batch_size: s.batch,
        epochs: s.epochs,
        seed: s.seed,
        ..TrainConfig::new(s.arch, net)
    };
    let mut failed = None;
    let outcome = train_with(&ds, &train_idx, &cfg, None, |e, _| {
        log(format_args!("epoch {} loss {:.4} ({:.0}s)", e.epoch, e.loss, t0.elapsed().as_secs_f64()));
        if let Err(err) = emit(out, "epoch", e) {
            failed.get_or_insert(err);
        }
    })?;
    if let Some(err) = failed {
        return Err(err);
    }
    save_weights(&outcome.weights, dest)?;
    log(format_args!("saved {}", dest.display()));
    let report = evaluate_rmse(&outcome.weights, &ds, &test_idx)?;
    emit(out, "rmse", &Rmse { arch: s.arch, report: &report })
}

pub fn eval(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let weights = load_weights(s.input(&s.weights, "weights")?)?;
    let net = s.net();
    weights.check_layout(&net)?;
    let ds = load_dataset(s.input(&s.data, "data")?, &net)?;
    let indices = if s.all { (0..ds.len()).collect() } else { split(s, ds.len())?.1 };
    let report = evaluate_rmse(&weights, &ds, &indices)?;
    emit(out, "rmse", &Rmse { arch: weights.arch, report: &report })
}

#[derive(Serialize)]
struct Episode {
    env: EnvType,
    seed: u64,
    distance: f64,
    steps: usize,
    terminated_by: Termination,
}

#[derive(Serialize)]
struct RunSummary {
    env: EnvType,
    episodes: usize,
    median_distance: f64,
    collisions: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn run(s: &Settings, out: &mut dyn Write) -> Result<()> {
    if s.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let weights = load_weights(s.input(&s.weights, "weights")?)?;
    let mut policy = NetworkPolicy::new(weights, s.net())?;
    let envs = match s.env_or(EnvChoice::Mixed) {
        EnvChoice::One(e) => vec![e],
        EnvChoice::Mixed => EnvType::ALL.to_vec(),
    };
    let mut trace = match &s.out {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    for env in envs {
        let mut distances = Vec::with_capacity(s.episodes);
        let mut collisions = 0;
        for k in 0..s.episodes as u64 {
            let seed = s.seed.wrapping_add(k);
            let r = run_episode(&mut policy, env, seed, s.steps, s.dt)?;
            if let Some(w) = &mut trace {
                for p in &r.trace {
                    serde_json::to_writer(&mut *w, &serde_json::json!({"env": env, "seed": seed, "point": p}))?;
                    w.write_all(b"\n")?;
                }
            }
            collisions += usize::from(r.terminated_by == Termination::Collision);
            distances.push(r.distance);
            emit(
                out,
                "episode",
                &Episode {
                    env,
                    seed,
                    distance: r.distance,
                    steps: r.steps,
                    terminated_by: r.terminated_by,
                },
            )?;
        }
        let summary = RunSummary {
            env,
            episodes: s.episodes,
            median_distance: median(distances),
            collisions,
        };
        emit(out, "summary", &summary)?;
    }
    if let Some(mut w) = trace {
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CamOut<'a> {
    index: usize,
    env: EnvType,
    steering: f32,
    #[serde(flatten)]
    cam: &'a GradCam,
}

pub fn gradcam(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let weights = load_weights(s.input(&s.weights, "weights")?)?;
    let net = s.net();
    weights.check_layout(&net)?;
    let ds = load_dataset(s.input(&s.data, "data")?, &net)?;
    let sample = ds
        .samples
        .get(s.index)
        .ok_or_else(|| CliError::Usage(format!("--index {} out of range for {} records", s.index, ds.len())))?;
    let cam = grad_cam(&weights, sample, &net, s.branch)?;
    emit(
        out,
        "gradcam",
        &CamOut {
            index: s.index,
            env: sample.env,
            steering: sample.steering,
            cam: &cam,
        },
    )
}

pub fn stats(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let stats = dataset_stats(s.input(&s.data, "data")?)?;
    emit(out, "stats", &stats)
}

pub fn serve(s: &Settings) -> Result<()> {
    let env = match s.env_or(EnvChoice::One(EnvType::NormalCity)) {
        EnvChoice::One(e) => e,
        EnvChoice::Mixed => return Err(CliError::Usage("serve needs a single --env".into())),
    };
    let cfg = ServeConfig {
        bind: s.bind.clone(),
        tick_hz: s.tick_hz,
        max_ticks: s.max_ticks,
        session: SessionConfig {
            env,
            seed: s.seed,
            dt: s.dt,
            record_path: s.record.clone(),
            net: s.net(),
            weights: match &s.weights {
                Some(_) => Some(s.input(&s.weights, "weights")?.to_path_buf()),
                None => None,
            },
            ..SessionConfig::default()
        },
    };
    Ok(nav_gateway::serve(cfg)?)
}

#[derive(Serialize)]
struct CaseOut {
    case: &'static str,
    max_rel_error: f64,
    passed: bool,
    checked: usize,
    kinked: usize,
    skipped: usize,
}

pub fn check_grad(out: &mut dyn Write) -> Result<()> {
    let t0 = Instant::now();
    let opts = GradCheckOptions::default();
    let mut cases = layer_suite(&opts)?;
    cases.extend(model_suite(&GradCheckOptions {
        max_coords: Some(16),
        ..opts.clone()
    })?);
    let mut max = 0f64;
    for c in &cases {
        let p = &c.report.params;
        max = max.max(c.report.max_rel_error);
        emit(
            out,
            "case",
            &CaseOut {
                case: c.name,
                max_rel_error: c.report.max_rel_error,
                passed: c.report.passed,
                checked: p.iter().map(|p| p.checked).sum(),
                kinked: p.iter().map(|p| p.kinked).sum(),
                skipped: p.iter().map(|p| p.skipped).sum(),
            },
        )?;
    }
    let passed = cases.iter().all(|c| c.report.passed);
    let seconds = t0.elapsed().as_secs_f64();
    log(format_args!("{} cases, max relative error {max:.3e}, {seconds:.1}s", cases.len()));
    emit(
        out,
        "check_grad",
        &serde_json::json!({"cases": cases.len(), "max_rel_error": max, "tol": opts.tol, "passed": passed, "seconds": seconds}),
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::GradCheck { max, tol: opts.tol })
    }
}
