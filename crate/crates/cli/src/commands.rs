//! Command implementations. Each writes its artifacts under the output
//! directory and returns a one-line summary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use unrec::graph::mark_forget_checked;
use unrec::synth::{self, SynthConfig};
use unrec::unlearn::{retrain_gold, train, unlearn_amun, unlearn_mmrecun};
use unrec::{
    evaluate, load_interactions, property_gaps, split_dataset, DatasetSplit, Encoder, Error, EvalReport, ForgetSpec,
    InteractionGraph, Mode, ModelParams, Partition, Result, RunResult, TrainConfig, View,
};

use crate::config::ExperimentConfig;

pub const SPLIT_FILE: &str = "split.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const MODEL_FILE: &str = "model.mmck";
pub const RUN_FILE: &str = "run.json";
pub const VALID_FILE: &str = "valid.csv";
pub const DIVERGENCE_FILE: &str = "divergence.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const TIMING_CSV: &str = "timing.csv";

pub fn report_file(view: View) -> String {
    format!("report_{}.json", view.as_str())
}

pub fn gaps_file(view: View) -> String {
    format!("gaps_{}.json", view.as_str())
}

pub fn cmd_synth(config: &SynthConfig, seed: u64, out: &Path) -> Result<String> {
    let data = synth::generate(config, seed)?;
    data.write(out)?;
    Ok(format!("wrote {} interactions to {}", data.rows.len(), out.display()))
}

pub fn load_graph(c: &ExperimentConfig) -> Result<InteractionGraph> {
    match (&c.data, &c.interactions) {
        (Some(dir), _) => synth::load_dir(dir),
        (None, Some(csv)) => load_interactions(csv, &c.features),
        (None, None) => Err(Error::Config("no dataset: set `data` or `interactions`".into())),
    }
}

pub fn load_split(c: &ExperimentConfig, graph: &InteractionGraph) -> Result<DatasetSplit> {
    match &c.split {
        Some(p) => DatasetSplit::read(p, graph),
        None => Ok(split_dataset(graph, c.seed)),
    }
}

pub fn load_partition(c: &ExperimentConfig, graph: &InteractionGraph, split: &DatasetSplit) -> Result<Option<Partition>> {
    if let Some(p) = &c.partition {
        let part = Partition::read(p, graph)?;
        let mut all: Vec<_> = part.retain.iter().chain(&part.forget).copied().collect();
        all.sort_unstable();
        if all != split.train {
            return Err(Error::Shape(format!("{}: retain and forget do not partition the training edges", p.display())));
        }
        return Ok(Some(part));
    }
    match &c.forget {
        Some(p) => {
            let spec = ForgetSpec::from_json(&fs::read_to_string(p)?, graph)?;
            mark_forget_checked(graph, split, &spec).map(Some)
        }
        None => Ok(None),
    }
}

fn load_checkpoint(path: &Path, graph: &InteractionGraph) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::NotFound(format!("checkpoint {}", path.display())));
    }
    let params = ModelParams::load(path)?;
    params.check_against(graph)?;
    if !params.all_finite() {
        return Err(Error::Numeric(format!("checkpoint {} holds non-finite values", path.display())));
    }
    Ok(params)
}

fn write_curve(path: &Path, header: &str, rows: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for (e, v) in rows {
        writeln!(f, "{e},{v}")?;
    }
    f.flush()?;
    Ok(())
}

fn write_run(out: &Path, mode: Mode, c: &ExperimentConfig, run: &RunResult) -> Result<()> {
    fs::create_dir_all(out)?;
    run.params.save(&out.join(MODEL_FILE))?;
    let doc = json!({
        "mode": mode.as_str(),
        "seed": c.seed,
        "epochs_run": run.epochs_run,
        "best_epoch": run.best_epoch,
        "best_valid_recall": run.best_valid_recall,
        "wall_time": run.wall_time,
        "stop_reason": run.stop_reason,
        "hyper": c.hyper,
    });
    fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;
    write_curve(&out.join(VALID_FILE), "epoch,valid_recall_at_20", &run.valid_curve)?;
    if !run.divergence_curve.is_empty() {
        write_curve(&out.join(DIVERGENCE_FILE), "epoch,beta", &run.divergence_curve)?;
    }
    Ok(())
}

fn require_partition(c: &ExperimentConfig, graph: &InteractionGraph, split: &DatasetSplit) -> Result<Partition> {
    load_partition(c, graph, split)?
        .ok_or_else(|| Error::Config("a forget request is required: set `forget` or `partition`".into()))
}

pub fn cmd_train(c: &ExperimentConfig) -> Result<String> {
    let out = c.out_dir()?;
    let graph = load_graph(c)?;
    let split = load_split(c, &graph)?;
    let run = train(&graph, &split, &TrainConfig::new(Mode::Train, c.hyper.clone(), c.seed))?;
    write_run(out, Mode::Train, c, &run)?;
    split.write(&out.join(SPLIT_FILE), &graph)?;
    Ok(summary(Mode::Train, &run))
}

pub fn cmd_gold(c: &ExperimentConfig) -> Result<String> {
    let out = c.out_dir()?;
    let graph = load_graph(c)?;
    let split = load_split(c, &graph)?;
    let part = require_partition(c, &graph, &split)?;
    let run = retrain_gold(&graph, &split, &part, &TrainConfig::new(Mode::Gold, c.hyper.clone(), c.seed))?;
    write_run(out, Mode::Gold, c, &run)?;
    split.write(&out.join(SPLIT_FILE), &graph)?;
    part.write(&out.join(PARTITION_FILE), &graph)?;
    Ok(summary(Mode::Gold, &run))
}

/// Runs one unlearning method, or one run per alpha into `alpha_<a>/`
/// subdirectories when `alphas` is non-empty.
pub fn cmd_unlearn(c: &ExperimentConfig, method: Mode, alphas: &[f64]) -> Result<String> {
    if !matches!(method, Mode::MmRecUn | Mode::AmUn) {
        return Err(Error::Config(format!("unlearning method must be mmrecun or amun, got {}", method.as_str())));
    }
    let out = c.out_dir()?;
    let graph = load_graph(c)?;
    let split = load_split(c, &graph)?;
    let part = require_partition(c, &graph, &split)?;
    let initial = load_checkpoint(c.require("checkpoint", &c.checkpoint)?, &graph)?;
    let reference = c.gold.as_deref().map(|p| load_checkpoint(p, &graph)).transpose()?;

    let runs: Vec<(PathBuf, ExperimentConfig)> = if alphas.is_empty() {
        vec![(out.to_path_buf(), c.clone())]
    } else {
        alphas
            .iter()
            .map(|&a| {
                let mut ca = c.clone();
                ca.hyper.alpha = a;
                (out.join(format!("alpha_{a}")), ca)
            })
            .collect()
    };
    let mut lines = Vec::new();
    for (dir, ca) in &runs {
        let tc = TrainConfig::new(method, ca.hyper.clone(), ca.seed);
        let run = match method {
            Mode::MmRecUn => unlearn_mmrecun(&graph, &split, &part, &initial, &tc, reference.as_ref())?,
            _ => unlearn_amun(&graph, &split, &part, &initial, &tc)?,
        };
        write_run(dir, method, ca, &run)?;
        split.write(&dir.join(SPLIT_FILE), &graph)?;
        part.write(&dir.join(PARTITION_FILE), &graph)?;
        lines.push(summary(method, &run));
    }
    Ok(lines.join("\n"))
}

fn summary(mode: Mode, run: &RunResult) -> String {
    format!(
        "{}: {} epochs, best epoch {} (valid recall@20 {:.4}), {:.2}s",
        mode.as_str(),
        run.epochs_run,
        run.best_epoch,
        run.best_valid_recall,
        run.wall_time
    )
}

/// Evaluates a checkpoint. The adjacency is built from the retain edges when a
/// forget request is configured, otherwise from the training edges.
pub fn evaluate_checkpoint(
    c: &ExperimentConfig,
    graph: &InteractionGraph,
    split: &DatasetSplit,
    part: Option<&Partition>,
    path: &Path,
    view: View,
) -> Result<EvalReport> {
    let params = load_checkpoint(path, graph)?;
    let edges = part.map_or(&split.train, |p| &p.retain);
    let state = Encoder::new(graph, edges, c.hyper.layers).state(&params)?;
    if !state.all_finite() {
        return Err(Error::Numeric(format!("{}: scores are not finite", path.display())));
    }
    evaluate(&state, split, part, &c.hyper.topk, view)
}

pub fn cmd_evaluate(c: &ExperimentConfig) -> Result<String> {
    let out = c.out_dir()?;
    let graph = load_graph(c)?;
    let split = load_split(c, &graph)?;
    let part = load_partition(c, &graph, &split)?;
    let ckpt = c.require("checkpoint", &c.checkpoint)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for view in c.view.views() {
        let report = evaluate_checkpoint(c, &graph, &split, part.as_ref(), ckpt, view)?;
        fs::write(out.join(report_file(view)), report.to_json() + "\n")?;
        written.push(report_file(view));
        if let Some(gold) = &c.gold {
            let reference = evaluate_checkpoint(c, &graph, &split, part.as_ref(), gold, view)?;
            let gaps = property_gaps(&report, &reference)?;
            fs::write(out.join(gaps_file(view)), gaps.to_json() + "\n")?;
            written.push(gaps_file(view));
        }
    }
    Ok(format!("wrote {} to {}", written.join(", "), out.display()))
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Flattens run directories into `report.csv` (one row per model, view, set,
/// K, metric) and `timing.csv` (one row per run with a `run.json`).
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for dir in dirs {
        let name = run_name(dir);
        let malformed = |what: String| Error::Format(format!("run directory {}: {what}", dir.display()));
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("run directory {}", dir.display())));
        }
        let mut found = false;
        let run_path = dir.join(RUN_FILE);
        if run_path.exists() {
            found = true;
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&run_path)?)
                .map_err(|e| malformed(format!("{RUN_FILE}: {e}")))?;
            let field = |k: &str| v.get(k).cloned().ok_or_else(|| malformed(format!("{RUN_FILE} lacks `{k}`")));
            let text = |x: serde_json::Value| x.as_str().map_or_else(|| x.to_string(), str::to_owned);
            timing.push(format!(
                "{name},{},{},{},{},{}",
                text(field("mode")?),
                field("epochs_run")?,
                field("best_epoch")?,
                field("wall_time")?,
                text(field("stop_reason")?)
            ));
        }
        for view in [View::UserCentric, View::ItemCentric] {
            let path = dir.join(report_file(view));
            if !path.exists() {
                continue;
            }
            found = true;
            let report = EvalReport::from_json(&fs::read_to_string(&path)?)
                .map_err(|e| malformed(format!("{}: {e}", report_file(view))))?;
            for (set, per_k) in &report.sets {
                for (k, m) in per_k {
                    for metric in unrec::MetricValues::NAMES {
                        let value = m.get(metric).expect("known metric");
                        rows.push(format!("{name},{},{},{k},{metric},{value:.6}", view.as_str(), set.as_str()));
                    }
                }
            }
        }
        if !found {
            return Err(malformed(format!("no {RUN_FILE} or report files")));
        }
    }
    fs::create_dir_all(out)?;
    let write = |file: &str, header: &str, lines: &[String]| -> Result<()> {
        let mut body = String::from(header);
        body.push('\n');
        for l in lines {
            body.push_str(l);
            body.push('\n');
        }
        fs::write(out.join(file), body)?;
        Ok(())
    };
    write(REPORT_CSV, "model,view,set,k,metric,value", &rows)?;
    write(TIMING_CSV, "model,mode,epochs_run,best_epoch,wall_time,stop_reason", &timing)?;
    Ok(format!("wrote {} metric rows and {} timing rows to {}", rows.len(), timing.len(), out.display()))
}
