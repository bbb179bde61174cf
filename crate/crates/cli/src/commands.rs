use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use ddss::checkpoint::{load_sampler, save_sampler, ModelCheckpoint};
use ddss::diffusion::{train_ddpm, NoiseSchedule, ScoreNetwork};
use ddss::eval::{build_report, EvalContext, EvalSampler, EvalSettings};
use ddss::ggdm::GgdmParams;
use ddss::samplers::{sample_ddim, sample_ddpm_stride, sample_ggdm, stride_timesteps, DdimNoise, Draw, SampleBatch};
use ddss::search::{ddss_search, FeatureMap, SearchData};

use crate::config::{Command, RunConfig, SamplerKind};
use crate::plot::{render, Panel};
use crate::table::{read_points, write_points, write_trajectory};
use crate::ConfigError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Worker count from `DDSS_THREADS`, else the available parallelism.
pub fn thread_budget() -> Result<usize> {
    match std::env::var("DDSS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError(format!("DDSS_THREADS must be a positive integer, got '{v}'")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Loads the model checkpoint and checks it was trained on the configured schedule.
fn load_model(config: &RunConfig) -> Result<(Arc<ScoreNetwork>, NoiseSchedule)> {
    let path = config.model_path();
    let ckpt = ModelCheckpoint::load(&path).with_context(|| format!("loading model {}", path.display()))?;
    let expected = config.schedule.build()?;
    if expected.fingerprint() != ckpt.schedule.fingerprint() {
        return Err(ddss::Error::FingerprintMismatch {
            expected: expected.fingerprint(),
            found: ckpt.schedule.fingerprint(),
        })
        .with_context(|| format!("model {} was trained on a different schedule", path.display()));
    }
    Ok((Arc::new(ckpt.ema), ckpt.schedule))
}

pub fn train(config: &RunConfig) -> Result<()> {
    config.write_resolved(Command::Train)?;
    let schedule = config.schedule.build()?;
    let data = config.dataset().splits();
    let network = ScoreNetwork::init(config.network_config(), config.network.seed);
    let out = train_ddpm(network, &schedule, &data.train, &config.train)?;
    let ckpt = ModelCheckpoint {
        network: out.network,
        ema: out.ema,
        schedule,
        seed: config.train.seed,
    };
    let path = config.out.join("model.ckpt");
    ckpt.save(&path)?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    write(&config.out.join("train_loss.csv"), losses)?;
    let tail = &out.losses[out.losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "trained {} steps; final loss (mean of last {}) {final_loss:.5}; wrote {}",
        out.losses.len(),
        tail.len(),
        path.display()
    );
    Ok(())
}

pub fn search(config: &RunConfig) -> Result<()> {
    config.write_resolved(Command::Search)?;
    let (model, schedule) = load_model(config)?;
    let data = config.dataset().splits();
    let features = FeatureMap::from_spec(&config.search.features, &data.train, config.search.seed)?;
    let result = ddss_search(
        &model,
        &schedule,
        SearchData {
            train: &data.train,
            val: &data.val,
        },
        &features,
        &config.search,
    )?;
    let seed = config.search.seed;
    save_sampler(&config.out.join("sampler_best.ckpt"), &result.best, seed)?;
    save_sampler(&config.out.join("sampler_final.ckpt"), &result.final_params, seed)?;
    write(&config.out.join("trace.csv"), result.trace_csv())?;
    if let Some(reason) = &result.aborted {
        return Err(ddss::Error::Divergence(format!(
            "{reason}; last good parameters written to {}",
            config.out.display()
        ))
        .into());
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4e}"));
    println!(
        "{} K={}: validation KID {} -> {} (best {:.4e} at step {}); wrote {}",
        config.search.sampler.tag(),
        config.search.k,
        fmt(result.initial_val_kid()),
        fmt(result.final_val_kid()),
        result.best_val_kid,
        result.best_step,
        config.out.display()
    );
    Ok(())
}

fn sampler_params_path(config: &RunConfig) -> PathBuf {
    config
        .sample
        .params
        .clone()
        .unwrap_or_else(|| config.out.join("sampler_final.ckpt"))
}

fn load_params(path: &Path, schedule: &NoiseSchedule) -> Result<GgdmParams> {
    let p = load_sampler(path).with_context(|| format!("loading sampler {}", path.display()))?;
    p.check_schedule(schedule)
        .with_context(|| format!("sampler {} was searched against a different schedule", path.display()))?;
    Ok(p)
}

pub fn sample(config: &RunConfig) -> Result<()> {
    config.write_resolved(Command::Sample)?;
    let (model, schedule) = load_model(config)?;
    let s = &config.sample;
    let draw = Draw::new(s.seed, s.n);
    let draw = if s.trajectory { draw.with_trajectory() } else { draw };
    let batch: SampleBatch = match s.sampler {
        SamplerKind::Ddpm => {
            sample_ddpm_stride(&model, &schedule, &stride_timesteps(schedule.len(), s.k, s.stride)?, draw)?
        }
        SamplerKind::Ddim => sample_ddim(
            &model,
            &schedule,
            &stride_timesteps(schedule.len(), s.k, s.stride)?,
            &DdimNoise::Eta(s.eta),
            draw,
        )?,
        SamplerKind::Ggdm => {
            let params = load_params(&sampler_params_path(config), &schedule)?;
            sample_ggdm(&model, &params, &schedule, draw)?
        }
    };
    let path = config.out.join("samples.csv");
    write_points(&path, &batch.samples)?;
    if let Some(states) = &batch.trajectory {
        write_trajectory(&config.out.join("trajectory.csv"), states)?;
    }
    println!("wrote {} samples to {}", batch.samples.rows(), path.display());
    Ok(())
}

fn eval_samplers(config: &RunConfig, schedule: &NoiseSchedule) -> Result<Vec<EvalSampler>> {
    let e = &config.eval;
    let mut searched: BTreeMap<String, Vec<GgdmParams>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut out = Vec::new();
    for entry in &e.samplers {
        match entry.as_str() {
            "ddpm" => out.push(EvalSampler::Ddpm { stride: e.stride }),
            "ddim" => out.push(EvalSampler::Ddim {
                eta: e.eta,
                stride: e.stride,
            }),
            other => {
                let Some((name, path)) = other.split_once('=') else {
                    bail!(ConfigError(format!(
                        "eval.samplers entry '{other}' must be ddpm, ddim or NAME=PATH"
                    )));
                };
                let p = load_params(Path::new(path), schedule)?;
                if !searched.contains_key(name) {
                    order.push(name.to_string());
                }
                searched.entry(name.to_string()).or_default().push(p);
            }
        }
    }
    for name in order {
        let params = searched.remove(&name).unwrap_or_default();
        out.push(EvalSampler::Searched { name, params });
    }
    Ok(out)
}

pub fn eval(config: &RunConfig) -> Result<()> {
    config.write_resolved(Command::Eval)?;
    let (model, schedule) = load_model(config)?;
    let samplers = eval_samplers(config, &schedule)?;
    let data = config.dataset().splits();
    let features = FeatureMap::from_spec(&config.eval.features, &data.train, config.search.seed)?;
    let e = &config.eval;
    let settings = EvalSettings {
        ks: e.ks.clone(),
        seeds: e.seeds.clone(),
        n_eval: e.n_eval,
        kernel: e.kernel,
        coverage_radius: e.coverage_radius,
        threads: thread_budget()?,
    };
    let ctx = EvalContext {
        model: &model,
        schedule: &schedule,
        real: &data.test,
        features: &features,
    };
    let report = build_report(&ctx, &samplers, &settings)?;
    let path = config.out.join("report.csv");
    write(&path, report.to_csv())?;
    println!("wrote {} report rows to {}", report.rows.len(), path.display());
    Ok(())
}

pub fn plot(config: &RunConfig) -> Result<()> {
    config.write_resolved(Command::Plot)?;
    let p = &config.plot;
    let real = match &p.real {
        Some(path) => read_points(path)?,
        None => config.dataset().splits().test,
    };
    let inputs: Vec<(String, ddss::tensorgrad::Tensor)> = p
        .inputs
        .iter()
        .map(|path| {
            let title = path.file_stem().map_or("samples".into(), |s| s.to_string_lossy().into_owned());
            read_points(path).map(|t| (title, t))
        })
        .collect::<Result<_>>()?;
    let mut panels = vec![Panel {
        title: "real".into(),
        points: &real,
    }];
    panels.extend(inputs.iter().map(|(title, points)| Panel {
        title: title.clone(),
        points,
    }));
    let svg = render(&panels, p.panel_size, p.extent, &config.hash()?);
    let path = config.out.join("samples.svg");
    write(&path, svg)?;
    println!("wrote {} panels to {}", panels.len(), path.display());
    Ok(())
}
