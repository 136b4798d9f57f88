use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hymoe::backbone::Model;
use hymoe::data::synthetic::{successor_cycle, to_interactions};
use hymoe::data::{build_sequences, parse_interactions, Dataset, Phase, Preprocessing, Summary};
use hymoe::eval::{evaluate, EvalOptions, MetricsReport};
use hymoe::gradcheck::{grad_check as run_grad_check, GradCheckConfig};
use hymoe::training::{load_checkpoint, save_checkpoint, Checkpoint, Event, StopReason, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{ConfigArgs, EvalArgs, GradCheckArgs, PrepareArgs, SyntheticArgs, TrainArgs};

pub const OUTPUT_ROOT_ENV: &str = "HYMOE_OUTPUT_ROOT";

type Result<T> = std::result::Result<T, CliError>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn append_lines<T: Serialize>(w: &mut impl Write, path: &Path, records: &[T]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn print_summary(s: &Summary) {
    println!(
        "users {}  items {}  interactions {}  density {:.5}  skipped short users {}",
        s.users, s.items, s.interactions, s.density, s.skipped_short_users
    );
}

pub fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let parsed = parse_interactions(&a.input, a.format, a.max_malformed)?;
    for m in &parsed.malformed {
        eprintln!("skipped line {}: {}", m.line, m.reason);
    }
    let seqs = build_sequences(&parsed.interactions, a.min_user, a.min_item)?;
    let source = a
        .input
        .file_name()
        .map_or_else(|| a.input.display().to_string(), |n| n.to_string_lossy().into_owned());
    let ds = Dataset::from_sequences(
        &seqs,
        Preprocessing {
            source,
            format: a.format,
            min_user: a.min_user,
            min_item: a.min_item,
            malformed_rows: parsed.malformed.len(),
        },
    )?;
    ds.save(&a.output)?;
    let summary = ds.summary();
    write_json(&summary_path(&a.output), &summary)?;
    print_summary(&summary);
    println!("wrote {}", a.output.display());
    Ok(())
}

fn summary_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("summary.json")
}

pub fn generate_synthetic(a: &SyntheticArgs) -> Result<()> {
    if a.sequences == 0 || a.items == 0 || a.length == 0 {
        return Err(CliError::Config("sequences, items and length must be >= 1".into()));
    }
    let rows = to_interactions(&successor_cycle(a.sequences, a.items, a.length, a.seed));
    let mut text = String::from("user,item,timestamp\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.user, r.item, r.timestamp));
    }
    fs::write(&a.output, text).map_err(|e| CliError::io(&a.output, e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

/// Outcome of a training run, written to `run.json`.
#[derive(Serialize)]
struct RunSummary<'a> {
    mode: &'static str,
    baseline: bool,
    stop_reason: StopReason,
    steps: u64,
    epochs: u64,
    best_epoch: Option<u64>,
    best_valid_ndcg10: Option<f64>,
    dataset: Summary,
    test: &'a MetricsReport,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    epoch: u64,
    batch: usize,
    ce: f64,
    lb: f64,
    total: f64,
    grad_norm: f64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, run_dir, trainer, ds) = match &a.resume {
        Some(run_dir) => {
            let mut cfg = RunConfig::default();
            cfg.apply_file(&run_dir.join("config.conf"))?;
            let ds = load_dataset(&cfg)?;
            let mut ck = load_checkpoint(&run_dir.join("last.ckpt"))?;
            let mut budget = RunConfig::default();
            budget.apply_overrides(&a.config.overrides)?;
            for o in &a.config.overrides {
                let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
                match key {
                    "epochs" => ck.train_config.epochs = budget.train.epochs,
                    "max_steps" => ck.train_config.max_steps = budget.train.max_steps,
                    "patience" => ck.train_config.patience = budget.train.patience,
                    other => {
                        return Err(CliError::Config(format!(
                            "{other} cannot change on resume (only epochs, max_steps, patience)"
                        )))
                    }
                }
            }
            cfg.train = ck.train_config.clone();
            write_resolved(&cfg, run_dir)?;
            let trainer = ck.into_trainer(&ds.split)?;
            println!("resuming {} at step {}, epoch {}", run_dir.display(), trainer.state.step, trainer.state.epoch);
            (cfg, run_dir.clone(), trainer, ds)
        }
        None => start_run(a)?,
    };
    let started = Instant::now();
    let steps_path = run_dir.join("steps.jsonl");
    let metrics_path = run_dir.join("metrics.jsonl");
    let epochs_path = run_dir.join("epochs.jsonl");
    let mut steps = open_append(&steps_path)?;
    let mut metrics = open_append(&metrics_path)?;
    let mut epochs = open_append(&epochs_path)?;
    let mut trainer = trainer;

    let mut observer = |t: &Trainer, e: Event| -> hymoe::Result<ControlFlow<()>> {
        let io = |p: &Path, e: std::io::Error| hymoe::Error::io(p, e);
        match e {
            Event::Step(r) => {
                let rec = StepRecord {
                    step: r.step,
                    epoch: r.epoch,
                    batch: r.batch,
                    ce: r.loss.ce,
                    lb: r.loss.lb,
                    total: r.loss.total,
                    grad_norm: r.grad_norm,
                };
                let line = serde_json::to_string(&rec).expect("step record serializes");
                writeln!(steps, "{line}").map_err(|e| io(&steps_path, e))?;
            }
            Event::Epoch { report, valid, improved } => {
                let line = serde_json::to_string(report).expect("epoch report serializes");
                writeln!(epochs, "{line}").map_err(|e| io(&epochs_path, e))?;
                for rec in valid.records(report.step, report.epoch) {
                    let line = serde_json::to_string(&rec).expect("metric record serializes");
                    writeln!(metrics, "{line}").map_err(|e| io(&metrics_path, e))?;
                }
                for (w, p) in [(&mut steps, &steps_path), (&mut metrics, &metrics_path), (&mut epochs, &epochs_path)] {
                    w.flush().map_err(|e| io(p, e))?;
                }
                let ck = Checkpoint::from_trainer(t);
                if improved {
                    save_checkpoint(&run_dir.join("best.ckpt"), &ck)?;
                }
                save_checkpoint(&run_dir.join("last.ckpt"), &ck)?;
                let entropy: Vec<String> = report.usage_entropy.iter().map(|h| format!("{h:.3}")).collect();
                println!(
                    "epoch {:>4}  step {:>6}  ce {:.4}  lb {:.4}  valid HR@10 {:.4} NDCG@10 {:.4}{}  usage entropy [{}]  {:.0} ex/s",
                    report.epoch,
                    report.step,
                    report.mean_ce,
                    report.mean_lb,
                    valid.hr10,
                    valid.ndcg10,
                    if improved { " *" } else { "" },
                    entropy.join(", "),
                    report.throughput
                );
            }
        }
        Ok(ControlFlow::Continue(()))
    };
    let stop = trainer.fit(&ds.split, &mut observer)?;
    steps.flush().map_err(|e| CliError::io(&steps_path, e))?;
    save_checkpoint(&run_dir.join("last.ckpt"), &Checkpoint::from_trainer(&trainer))?;
    println!("stopped: {stop:?} after {} steps", trainer.state.step);

    // score the retained best model (or the last one if no epoch finished)
    let best_path = run_dir.join("best.ckpt");
    let (model, step, epoch) = if best_path.exists() {
        let ck = load_checkpoint(&best_path)?;
        (ck.model()?, ck.state.step, ck.state.epoch.saturating_sub(1))
    } else {
        let ck = Checkpoint::from_trainer(&trainer);
        (ck.model()?, trainer.state.step, trainer.state.epoch)
    };
    let opts = EvalOptions {
        batch_size: trainer.config.eval_batch_size,
        exclude_seen: trainer.config.exclude_seen,
        step,
    };
    let test = evaluate(&model, &ds.split, Phase::Test, opts)?;
    append_lines(&mut metrics, &metrics_path, &test.records(step, epoch))?;
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    print!("{}", test.table());

    let baseline = cfg.model.uniform_pffn;
    write_json(
        &run_dir.join("run.json"),
        &RunSummary {
            mode: if baseline { "baseline-uniform-pffn" } else { "hymoe" },
            baseline,
            stop_reason: stop,
            steps: trainer.state.step,
            epochs: trainer.state.epoch,
            best_epoch: trainer.state.best_epoch,
            best_valid_ndcg10: trainer.state.best_metric,
            dataset: ds.summary(),
            test: &test,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn write_resolved(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let mut conf = String::from("# resolved configuration; `hymoe train --config <this file> --overwrite` repeats the run\n");
    if cfg.model.uniform_pffn {
        conf.push_str("# baseline run: uniform feed-forward layers\n");
    }
    conf.push_str(&cfg.to_conf());
    let path = run_dir.join("config.conf");
    fs::write(&path, conf).map_err(|e| CliError::io(&path, e))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset given (set dataset = ... or pass --dataset)".into()))?;
    Ok(Dataset::load(path)?)
}

fn start_run(a: &TrainArgs) -> Result<(RunConfig, PathBuf, Trainer, Dataset)> {
    let mut cfg = load_config(&a.config)?;
    let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(cwd.join(d));
    }
    if let Some(d) = &a.output_dir {
        cfg.output_dir = Some(cwd.join(d));
    }
    if let Some(n) = &a.run_name {
        cfg.set("run_name", n, None).map_err(CliError::Config)?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.uniform_pffn {
        cfg.model.uniform_pffn = true;
    }
    if let Some(w) = a.lb_weight {
        cfg.model.lb_weight = w;
    }
    if a.freeze_alpha {
        cfg.model.freeze_alpha = true;
    }
    // reject bad settings before touching data or disk
    cfg.model.validate()?;
    cfg.train.validate()?;

    let ds = load_dataset(&cfg)?;
    cfg.model.vocab_size = ds.vocab_size();
    let output_dir = match &cfg.output_dir {
        Some(d) => d.clone(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| cwd.join("runs"), |d| cwd.join(d)),
    };
    cfg.output_dir = Some(output_dir.clone());
    let run_name = cfg.run_name.clone().unwrap_or_else(|| {
        let mode = if cfg.model.uniform_pffn { "baseline" } else { "hymoe" };
        format!("{mode}-seed{}", cfg.train.seed)
    });
    cfg.run_name = Some(run_name.clone());
    if let Some(d) = &cfg.dataset {
        cfg.dataset = Some(fs::canonicalize(d).map_err(|e| CliError::io(d, e))?);
    }

    let run_dir = output_dir.join(&run_name);
    if run_dir.exists() && fs::read_dir(&run_dir).map_err(|e| CliError::io(&run_dir, e))?.next().is_some() {
        if !a.overwrite {
            return Err(CliError::Config(format!(
                "run directory {} is not empty (use --overwrite, another --run-name, or --resume)",
                run_dir.display()
            )));
        }
        fs::remove_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    }
    fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    write_resolved(&cfg, &run_dir)?;

    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let trainer = Trainer::new(model, cfg.train.clone(), &ds.split)?;
    println!(
        "{} parameters, {} users, {} items -> {}",
        trainer.model.params.num_scalars(),
        ds.split.len(),
        ds.vocab_size() - 1,
        run_dir.display()
    );
    Ok((cfg, run_dir, trainer, ds))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.dataset)?;
    if ds.vocab_size() != ck.model_config.vocab_size {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            ck.model_config.vocab_size,
            ds.vocab_size()
        )));
    }
    let requested = load_config(&a.config)?;
    let mut model_cfg = ck.model_config.clone();
    requested.apply_model_keys(&mut model_cfg);
    model_cfg.validate()?;
    let mut model = Model::new(model_cfg, ck.train_config.seed)?;
    ck.restore_into(&mut model)?;
    let opts = EvalOptions {
        batch_size: ck.train_config.eval_batch_size,
        exclude_seen: a.exclude_seen,
        step: ck.state.step,
    };
    let report = evaluate(&model, &ds.split, a.phase, opts)?;
    print!("{}", report.table());
    let record = a.record.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval.jsonl")
    });
    let mut w = open_append(&record)?;
    append_lines(&mut w, &record, &report.records(ck.state.step, ck.state.epoch))?;
    w.flush().map_err(|e| CliError::io(&record, e))
}

pub fn grad_check(a: &GradCheckArgs) -> Result<()> {
    let requested = load_config(&a.config)?;
    let mut cfg = GradCheckConfig::default();
    requested.apply_model_keys(&mut cfg.model);
    cfg.model.validate()?;
    cfg.step = a.step.unwrap_or(cfg.model.warmup_steps / 2);
    cfg.tolerance = a.tolerance;
    cfg.eps = a.eps;
    cfg.margin = a.margin;
    cfg.seed = a.seed;
    if cfg.eps.is_nan() || cfg.eps <= 0.0 || cfg.tolerance.is_nan() || cfg.tolerance <= 0.0 {
        return Err(CliError::Config("eps and tolerance must be > 0".into()));
    }
    let report = run_grad_check(&cfg)?;
    print!("{}", report.table());
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(cfg.tolerance))
    }
}
