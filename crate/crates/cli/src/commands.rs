use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use geoflow::data::{self, Dataset, SynthOptions};
use geoflow::flow::{self, Density};
use geoflow::model::{self, ClassifierParams};
use geoflow::oracle::{self, CheckSelector, Fault};
use geoflow::trainer::{self, TrainData, TrainReport};
use geoflow::{FlowConfig, PropagationConfig};

use crate::config::{config_echo, RunConfig};
use crate::error::CliError;
use crate::{CheckArgs, EvalArgs, FlowArgs, GenKind, GenerateArgs, Split, TrainArgs};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

fn add_run_started(obj: &mut Value, stamp: bool) {
    if stamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        obj["run_started"] = json!(secs);
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    Ok(data::load_dataset(path)?)
}

fn load_params(path: &Path) -> Result<ClassifierParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn check_flag(ok: bool, flag: &str, requirement: &str, value: impl std::fmt::Display) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} {requirement}, got {value}")))
    }
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    check_flag(a.n > 0, "--n", "must be positive", a.n)?;
    check_flag(a.d > 0, "--d", "must be positive", a.d)?;
    check_flag(a.classes >= 2, "--classes", "must be at least 2", a.classes)?;
    check_flag(a.shift.is_finite() && a.shift >= 0.0, "--shift", "must be finite and >= 0", a.shift)?;
    check_flag((0.0..=1.0).contains(&a.spurious), "--spurious", "must lie in [0, 1]", a.spurious)?;
    check_flag(a.ratio.is_finite() && a.ratio >= 1.0, "--ratio", "must be >= 1", a.ratio)?;
    check_flag(a.k_nn > 0, "--k-nn", "must be positive", a.k_nn)?;
    check_flag((0.0..=1.0).contains(&a.cross_p), "--cross-p", "must lie in [0, 1]", a.cross_p)?;
    check_flag(a.class_sep.is_finite() && a.class_sep > 0.0, "--class-sep", "must be positive", a.class_sep)?;
    check_flag(
        a.spurious_noise.is_finite() && a.spurious_noise >= 0.0,
        "--spurious-noise",
        "must be >= 0",
        a.spurious_noise,
    )?;
    let opts = SynthOptions {
        k_nn: a.k_nn,
        cross_p: a.cross_p,
        class_sep: a.class_sep,
        spurious_noise: a.spurious_noise,
    };
    let ds = match a.kind {
        GenKind::Covariate => data::gen_covariate_shift(a.seed, a.n, a.d, a.classes, a.shift, &opts)?,
        GenKind::Concept => data::gen_concept_shift(a.seed, a.n, a.d, a.classes, a.spurious, &opts)?,
        GenKind::Imbalance => {
            let base = match &a.base {
                Some(dir) => load(dir)?,
                None => data::gen_covariate_shift(a.seed, a.n, a.d, a.classes, 0.0, &opts)?,
            };
            data::gen_class_imbalance(a.seed, &base, a.ratio)?
        }
    };
    data::save_dataset(&ds, &a.out)?;
    println!(
        "{} nodes, {} edges, {} features, {} classes; train/val/test {}/{}/{}; {} test groups -> {}",
        ds.num_nodes(),
        ds.graph.num_edges(),
        ds.features.cols(),
        ds.num_classes(),
        ds.masks.train.len(),
        ds.masks.val.len(),
        ds.masks.test.len(),
        ds.groups.as_ref().map_or(0, Vec::len),
        a.out.display()
    );
    println!("{}", serde_json::to_string(&ds.meta).expect("meta serializes"));
    Ok(())
}

fn train_data(ds: &Dataset) -> TrainData<'_> {
    TrainData {
        graph: &ds.graph,
        features: &ds.features,
        labels: &ds.labels,
        masks: &ds.masks,
        groups: ds.groups.as_deref(),
    }
}

fn print_record(r: &trainer::EpochRecord) {
    let acc = |m: &Option<geoflow::Metrics>| m.map_or_else(|| "-".to_string(), |m| format!("{:.4}", m.acc));
    println!(
        "epoch {:>4}  loss {:.6}  val_acc {}  test_acc {}  gw2 {:.3e}  q_max {:.3e}",
        r.epoch,
        r.train_loss_weighted,
        acc(&r.val),
        acc(&r.test),
        r.cumulative_gw2,
        r.q_max
    );
}

fn summary(report: &TrainReport, cfg: &geoflow::TrainConfig, stamp: bool) -> Value {
    let mut s = json!({
        "method": report.method.label(),
        "best_epoch": report.best_epoch,
        "best_val": report.best_val,
        "test_at_best_val": report.test_at_best_val,
        "worst_group_acc": report.worst_group_acc,
        "config_echo": config_echo(cfg),
    });
    if stamp {
        s["timings"] = serde_json::to_value(&report.timings).expect("timings serialize");
    }
    add_run_started(&mut s, stamp);
    s
}

pub fn train(a: &TrainArgs, stamp: bool) -> Result<(), CliError> {
    let run = RunConfig::load(a.config.as_deref(), &a.run)?;
    let out = run.out()?.to_path_buf();
    let ds = load(run.dataset()?)?;
    let cfg = run.train_config()?;
    let report = trainer::train(&train_data(&ds), &cfg)?;
    ensure_dir(&out)?;
    let mut lines = String::new();
    for r in &report.records {
        print_record(r);
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    write_text(&out.join("report.jsonl"), &lines)?;
    write_json(&out.join("params.json"), &report.final_params)?;
    write_json(&out.join("best_params.json"), &report.best_params)?;
    let s = summary(&report, &cfg, stamp);
    write_json(&out.join("summary.json"), &s)?;
    println!(
        "best epoch {}: val {} test {} worst-group {}",
        report.best_epoch,
        opt_field(report.best_val),
        opt_field(report.test_at_best_val),
        opt_field(report.worst_group_acc)
    );
    Ok(())
}

pub fn sweep(a: &TrainArgs, stamp: bool) -> Result<(), CliError> {
    let run = RunConfig::load(a.config.as_deref(), &a.run)?;
    let out = run.out()?.to_path_buf();
    let ds = load(run.dataset()?)?;
    let base = run.train_config()?;
    let t_grid = run.t_in_grid();
    let b_grid = run.beta_grid();
    let cells = trainer::sweep(&train_data(&ds), &base, &t_grid, &b_grid, run.jobs.unwrap_or(1))?;
    ensure_dir(&out)?;
    let mut csv = String::from("t_in,beta,val_metric,test_metric,worst_group\n");
    for c in &cells {
        let row = format!(
            "{},{},{},{},{}\n",
            c.t_in,
            c.beta,
            opt_field(c.report.best_val),
            opt_field(c.report.test_at_best_val),
            opt_field(c.report.worst_group_acc)
        );
        print!("{row}");
        csv.push_str(&row);
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    let mut s = json!({
        "cells": cells.len(),
        "t_in_grid": t_grid,
        "beta_grid": b_grid,
        "config_echo": config_echo(&base),
    });
    add_run_started(&mut s, stamp);
    write_json(&out.join("summary.json"), &s)?;
    Ok(())
}

fn read_loss_file(path: &Path, n: usize) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let headers = reader.headers().map_err(|e| CliError::io(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["node_id", "loss"] {
        return Err(CliError::Usage(format!("{}: header must be `node_id,loss`", path.display())));
    }
    let mut loss = vec![None; n];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let bad = || CliError::Usage(format!("{}: malformed row {}", path.display(), row + 1));
        let i: usize = rec[0].trim().parse().map_err(|_| bad())?;
        let l: f64 = rec[1].trim().parse().map_err(|_| bad())?;
        if i >= n {
            return Err(bad());
        }
        loss[i] = Some(l);
    }
    loss.into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| CliError::Usage(format!("{}: no loss for node {i}", path.display()))))
        .collect()
}

pub fn flow(a: &FlowArgs, stamp: bool) -> Result<(), CliError> {
    check_flag(a.trace_every > 0, "--trace-every", "must be positive", a.trace_every)?;
    let ds = load(&a.dataset)?;
    let n = ds.num_nodes();
    let loss = match (&a.params, &a.loss_file) {
        (Some(p), _) => {
            let params = load_params(p)?;
            let prop = PropagationConfig {
                hops: a.hops,
                self_loop_weight: a.self_loop_weight,
            };
            let x = model::propagate_features(&ds.features, &ds.graph, &prop)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let y = ds.labels.restrict_to(&ds.masks.train);
            model::per_node_loss(&params, &x, &y).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, Some(f)) => read_loss_file(f, n)?,
        (None, None) => return Err(CliError::Usage("one of --params or --loss-file is required".into())),
    };
    let cfg = FlowConfig {
        beta: a.beta,
        tau: a.tau,
        t_in: a.t_in,
        positivity_floor: a.positivity_floor,
        max_step_shrinks: a.max_step_shrinks,
        clamp_on_exhaustion: a.clamp_on_exhaustion,
    };
    let trace = flow::run_flow(None, &loss, &ds.graph, &cfg)?;
    ensure_dir(&a.out)?;

    let mut csv = String::from("step,node_id,q\n");
    for (step, q) in trace.densities.iter().enumerate() {
        if step % a.trace_every == 0 || step == cfg.t_in {
            for (i, v) in q.values().iter().enumerate() {
                csv.push_str(&format!("{step},{i},{v}\n"));
            }
        }
    }
    write_text(&a.out.join("trace.csv"), &csv)?;

    let mut actions = String::from("step,action,effective_tau,free_energy\n");
    for (k, (act, tau)) in trace.step_actions.iter().zip(&trace.effective_taus).enumerate() {
        actions.push_str(&format!("{},{act},{tau},{}\n", k + 1, trace.free_energies[k + 1]));
    }
    write_text(&a.out.join("actions.csv"), &actions)?;

    let last: &Density = trace.final_density();
    let mut s = json!({
        "steps": cfg.t_in,
        "cumulative_gw2": trace.cumulative_gw2,
        "initial_free_energy": trace.free_energies[0],
        "final_free_energy": *trace.free_energies.last().expect("non-empty"),
        "final_q_max": last.max(),
        "final_q_entropy": last.entropy(),
        "config_echo": serde_json::to_value(&cfg).expect("config serializes"),
    });
    add_run_started(&mut s, stamp);
    write_json(&a.out.join("summary.json"), &s)?;
    println!(
        "{} steps, cumulative gw2 {}, free energy {} -> {}",
        cfg.t_in,
        trace.cumulative_gw2,
        trace.free_energies[0],
        trace.free_energies.last().expect("non-empty")
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = load(&a.dataset)?;
    let params = load_params(&a.params)?;
    let prop = PropagationConfig {
        hops: a.hops,
        self_loop_weight: a.self_loop_weight,
    };
    let x = model::propagate_features(&ds.features, &ds.graph, &prop).map_err(|e| CliError::Usage(e.to_string()))?;
    let (name, mask) = match a.split {
        Split::Train => ("train", &ds.masks.train),
        Split::Val => ("val", &ds.masks.val),
        Split::Test => ("test", &ds.masks.test),
    };
    let metrics = model::evaluate(&params, &x, &ds.labels, mask).map_err(|e| CliError::Usage(e.to_string()))?;
    let worst_group = match (&ds.groups, a.split) {
        (Some(groups), Split::Test) => Some(trainer::worst_group_accuracy(&params, &x, &ds.labels, groups)?),
        _ => None,
    };
    let report = json!({
        "split": name,
        "metrics": metrics,
        "worst_group_acc": worst_group,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

pub fn check(a: &CheckArgs) -> Result<(), CliError> {
    let selector: CheckSelector = a.selector.parse().map_err(CliError::Usage)?;
    let fault = a
        .inject_fault
        .as_deref()
        .map(str::parse::<Fault>)
        .transpose()
        .map_err(CliError::Usage)?;
    let report = oracle::run_checks(selector, a.seed, fault);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(&out.join("check.json"), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(report.failed().join(", ")))
    }
}
