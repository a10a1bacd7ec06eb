//! Subcommand bodies. Each takes a fully resolved [`RunConfig`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rescnds::data::synthetic::{write_dataset, SyntheticConfig};
use rescnds::data::{center_crop, load_manifest, stack, Dataset};
use rescnds::diagnostic::{run_probe, select_branch_point, ProbeOptions};
use rescnds::gradcheck::{run_all, REL_TOL};
use rescnds::graph::{build_cnds, build_conv_stack, infer_shapes, insert_residual_connections, Init, Network, NetworkGraph};
use rescnds::rng::derive_seed;
use rescnds::supervision::LabelBatch;
use rescnds::trainer::{evaluate, Checkpoint, EvalMode, TrainOutputs, Trainer};
use rescnds::Tensor;
use serde::Serialize;

use crate::{CliError, RunConfig};

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    Ok(out)
}

/// The graph named by `arch`, or else the one described by the config
/// fields. `branchless` drops the auxiliary head of a config-built graph.
pub fn resolve_graph(cfg: &RunConfig, branchless: bool) -> Result<NetworkGraph, CliError> {
    if let Some(path) = &cfg.arch {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return Ok(NetworkGraph::from_json(&text)?);
    }
    if let Some(stack) = cfg.stack_config() {
        return Ok(build_conv_stack(&stack)?);
    }
    let mut arch = cfg.arch_config()?;
    if branchless {
        arch.aux_attach = None;
    }
    let g = build_cnds(&arch)?;
    if cfg.residual == Some(true) {
        Ok(insert_residual_connections(&g, &cfg.residual_options())?)
    } else {
        Ok(g)
    }
}

fn input_side(g: &NetworkGraph) -> Result<usize, CliError> {
    match g.input_shape {
        [_, h, w] if h == w => Ok(h),
        [_, h, w] => Err(CliError::Usage(format!("non-square {h}x{w} network input is not supported"))),
    }
}

fn dataset_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))
}

/// Loads `split` with the training split's mean subtracted.
fn load_split(dir: &Path, split: &str) -> Result<Dataset, CliError> {
    let mean = load_manifest(dir.join("train.json"))?.mean();
    Ok(Dataset::load_split(dir, split, mean)?)
}

pub fn build(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let graph = resolve_graph(cfg, false)?;
    let shapes = infer_shapes(&graph, graph.input_shape)?;
    let out = prepare_out(cfg)?;
    fs::write(out.join("arch.json"), graph.to_json() + "\n")?;
    writeln!(stdout, "{:<14} {:<13} {:<22} output", "node", "branch", "inputs")?;
    for n in &graph.nodes {
        let kind = serde_json::to_value(&n.kind).ok();
        let kind = kind.as_ref().and_then(|v| v["type"].as_str()).unwrap_or("?");
        writeln!(
            stdout,
            "{:<14} {:<13} {:<22} {} {:?}",
            n.id,
            format!("{:?}", n.branch).to_lowercase(),
            n.inputs.join("+"),
            kind,
            shapes[&n.id]
        )?;
    }
    writeln!(stdout, "wrote {}", out.join("arch.json").display())?;
    Ok(())
}

/// Gaussian images with cycling labels, used when no dataset is given.
fn noise_batches(g: &NetworkGraph, n: usize, count: usize, seed: u64) -> Result<Vec<(Tensor, LabelBatch)>, CliError> {
    let [c, h, w] = g.input_shape;
    (0..count)
        .map(|b| {
            let x = Tensor::gaussian(&[n, c, h, w], 1.0, derive_seed(seed, &format!("probe_data/{b}")))?;
            let y = LabelBatch::new((0..n).map(|i| (i + b) % g.num_classes).collect(), g.num_classes)?;
            Ok((x, y))
        })
        .collect()
}

fn dataset_batches(g: &NetworkGraph, data: &Dataset, n: usize, count: usize) -> Result<Vec<(Tensor, LabelBatch)>, CliError> {
    let side = input_side(g)?;
    let mut out = vec![];
    for chunk in data.images.iter().zip(&data.labels).collect::<Vec<_>>().chunks(n).take(count) {
        let crops = chunk.iter().map(|(img, _)| center_crop(img, side)).collect::<Result<Vec<_>, _>>()?;
        let labels = chunk.iter().map(|(_, &l)| l).collect();
        out.push((stack(&crops)?, LabelBatch::new(labels, data.num_classes())?));
    }
    Ok(out)
}

pub fn diagnose(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let graph = resolve_graph(cfg, true)?;
    let iters = cfg.iters.unwrap_or(10);
    let n = cfg.probe_batch.unwrap_or(8).max(1);
    let count = iters.clamp(1, 16);
    let batches = match &cfg.dataset {
        Some(dir) => dataset_batches(&graph, &load_split(dir, "train")?, n, count)?,
        None => noise_batches(&graph, n, count, cfg.seed())?,
    };
    let opts = ProbeOptions {
        unit: cfg.probe_unit.unwrap_or_default(),
        init: Init::Gaussian {
            std: cfg.init_std.unwrap_or(0.01),
        },
        sgd_lr: cfg.probe_sgd_lr,
    };
    let report = run_probe(&graph, &batches, iters, cfg.seed(), &opts)?;
    let out = prepare_out(cfg)?;
    fs::write(out.join("gradient_report.csv"), report.to_csv())?;
    fs::write(out.join("gradient_summary.csv"), report.summary_csv())?;
    write!(stdout, "{}", report.summary_csv())?;
    match select_branch_point(&report, cfg.threshold.unwrap_or(rescnds::diagnostic::DEFAULT_THRESHOLD))? {
        Some(id) => writeln!(stdout, "selected: {id}")?,
        None => writeln!(stdout, "selected: none below threshold")?,
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let dir = dataset_dir(cfg)?;
    let graph = resolve_graph(cfg, false)?;
    let tcfg = cfg.train_config(input_side(&graph)?)?;
    let train_set = load_split(dir, "train")?;
    let val_set = load_split(dir, cfg.split.as_deref().unwrap_or("test"))?;
    let out = prepare_out(cfg)?;
    let mut trainer = if cfg.resume == Some(true) {
        let ckpt = Checkpoint::load(&out.join("last.ckpt"))?;
        Trainer::resume(graph, tcfg, ckpt)?
    } else {
        Trainer::new(graph, tcfg)?
    };
    rescnds::trainer::train(
        &mut trainer,
        &train_set,
        &val_set,
        Some(&TrainOutputs {
            dir: &out,
            verbose: false,
        }),
    )?;
    if let Some(last) = trainer.log().last() {
        writeln!(
            stdout,
            "epoch {} loss {:.5} val top1 {:.4} top5 {:.4}",
            last.epoch, last.train_loss_main, last.val_top1, last.val_top5
        )?;
    }
    if let Some(b) = trainer.best() {
        writeln!(stdout, "best epoch {} top1 {:.4}", b.epoch, b.top1)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: &'a str,
    mode: EvalMode,
    images: usize,
    top1: f64,
    top5: f64,
}

pub fn eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let dir = dataset_dir(cfg)?;
    let graph = resolve_graph(cfg, false)?;
    let side = input_side(&graph)?;
    let out = cfg.out_dir();
    let ckpt_path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let net = Network::new(graph, ckpt.params)?;
    let split = cfg.split.as_deref().unwrap_or("test");
    let data = load_split(dir, split)?;
    let mode = if cfg.ten_crop == Some(true) { EvalMode::TenCrop } else { EvalMode::Center };
    let acc = evaluate(&net, &data, side, mode, cfg.batch.unwrap_or(64))?;
    let report = EvalReport {
        split,
        mode,
        images: data.len(),
        top1: acc.top1,
        top5: acc.top5,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    prepare_out(cfg)?;
    fs::write(out.join("eval.json"), &json)?;
    write!(stdout, "{json}")?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let rows = run_all(cfg.seed())?;
    writeln!(stdout, "{:<28} {:>12}  result", "check", "rel_err")?;
    for r in &rows {
        writeln!(stdout, "{:<28} {:>12.3e}  {}", r.name, r.rel_err, if r.passed() { "PASS" } else { "FAIL" })?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks at or above {REL_TOL:e}", rows.len())));
    }
    writeln!(stdout, "all {} checks below {REL_TOL:e}", rows.len())?;
    Ok(())
}

pub fn synth(cfg: &RunConfig, train_per_class: usize, test_per_class: usize, size: usize, stdout: &mut dyn Write) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let sc = SyntheticConfig {
        train_per_class,
        test_per_class,
        size,
        seed: cfg.seed(),
        ..Default::default()
    };
    write_dataset(&out, &sc)?;
    writeln!(stdout, "wrote {}", out.display())?;
    Ok(())
}
