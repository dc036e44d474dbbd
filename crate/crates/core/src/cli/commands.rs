//! `gvq` subcommands.
//!
//! Exit codes: 0 on success, 2 for usage and config errors, 1 for everything
//! else. Every command echoes its resolved config to
//! `<output>/config.resolved.toml`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::checkpoint_file::{read_checkpoint_file, write_checkpoint_file};
use super::config::{load_config, DataSource, ExperimentConfig};
use super::data::{synthetic_dataset, synthetic_image};
use super::tensor_file::{read_tensor_file, write_tensor_file};
use crate::analysis::{cosine_similarity_matrix, group_stats, pca_2d, random_projection_2d, sample_codes_per_group};
use crate::codebook::{projector_param_count, GroupedCodebook};
use crate::error::{Error, Result};
use crate::numerics::{init_threads_from_env, RngStream, StreamPurpose, Tensor};
use crate::resampler::{extension_sweep, resample_codebook, ExtensionRow, ResampleMode, ResampleRequest};
use crate::trainer::{evaluate, Checkpoint, CodebookState, EpochMetrics, EvalMetrics, Mode, TrainConfig, Trainer};

pub const METRICS_HEADER: &str = "epoch,utilization,recon,codebook,commit,total,psnr,ssim";
pub const EXTENSION_HEADER: &str = "multiple,codebook_size,mse,psnr,ssim,utilization";
pub const SWEEP_GROUPS_HEADER: &str = "k,final_utilization,final_psnr,final_eval_mse,final_eval_utilization";
pub const SWEEP_PROJECTOR_HEADER: &str =
    "projector,param_count,final_utilization,final_psnr,final_eval_mse,final_eval_utilization";

#[derive(Debug, Parser)]
#[command(name = "gvq", version, about = "Grouped vector-quantization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output` in the config).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ResampleArg {
    Resample,
    SelfExtend,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training set as one GVQT file per image.
    GenerateData,
    /// Train and write metrics, summary and checkpoint.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Resample or self-extend a trained codebook.
    Resample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "resample")]
        mode: ResampleArg,
        /// Target size per group.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Scale every group by this factor instead of listing sizes.
        #[arg(long, conflicts_with = "sizes")]
        multiple: Option<usize>,
        /// Seed for the fresh cores (defaults to the training seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-extend by each multiple and evaluate.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        multiples: Vec<usize>,
    },
    /// Group statistics, cosine similarities and 2-D projections of a codebook.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Codes sampled per group for similarities and projections.
        #[arg(long, default_value_t = 128)]
        per_group: usize,
    },
    /// Train once per group count.
    SweepGroups {
        /// Group counts (defaults to `sweep.groups`).
        #[arg(long, value_delimiter = ',')]
        groups: Vec<usize>,
    },
    /// Self-extension sweep over `sweep.multiples`, training first unless a
    /// checkpoint is given.
    SweepExtension {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        multiples: Vec<usize>,
    },
    /// Train once per projector variant in `sweep.projectors`.
    SweepProjector,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gvq: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads_from_env()?;
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(o) = cli.output {
        cfg.output = o;
    }
    let out = cfg.output.clone();
    ensure_dir(&out)?;
    write_text(&out.join("config.resolved.toml"), &cfg.to_toml()?)?;
    match cli.command {
        Command::GenerateData => generate_data(&cfg),
        Command::Train { resume } => train_cmd(&cfg, resume.as_deref()),
        Command::Eval { checkpoint } => eval_cmd(&cfg, &checkpoint),
        Command::Resample {
            checkpoint,
            mode,
            sizes,
            multiple,
            seed,
        } => resample_cmd(&cfg, &checkpoint, mode, &sizes, multiple, seed),
        Command::Extend { checkpoint, multiples } => extend_cmd(&cfg, &checkpoint, &multiples, "extension"),
        Command::Analyze { checkpoint, per_group } => analyze_cmd(&cfg, &checkpoint, per_group),
        Command::SweepGroups { groups } => {
            let groups = if groups.is_empty() { cfg.sweep.groups.clone() } else { groups };
            sweep_groups(&cfg, &groups)
        }
        Command::SweepExtension { checkpoint, multiples } => {
            let multiples = if multiples.is_empty() { cfg.sweep.multiples.clone() } else { multiples };
            let ckpt_path = match checkpoint {
                Some(p) => p,
                None => {
                    let data = load_images(&cfg.data)?;
                    let eval = load_images(&cfg.eval)?;
                    let dir = out.join("base");
                    train_member(&cfg, cfg.train.clone(), &dir, &data, &eval)?;
                    dir.join("checkpoint.gvqc")
                }
            };
            extend_cmd(&cfg, &ckpt_path, &multiples, "sweep_extension")
        }
        Command::SweepProjector => sweep_projector(&cfg),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(format!("json: {e}")))?;
    write_text(path, &(text + "\n"))
}

/// Loads a dataset as `[N, H, W, 3]`. A path may name one GVQT file (rank 3
/// or 4) or a directory whose `*.gvqt` files are read in name order.
pub fn load_images(src: &DataSource) -> Result<Tensor<f32>> {
    let Some(path) = &src.path else {
        return synthetic_dataset(&src.synthetic);
    };
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "gvqt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("no .gvqt files in {}", path.display())));
        }
        files
    } else {
        vec![path.clone()]
    };
    let mut shape: Option<[usize; 3]> = None;
    let mut count = 0;
    let mut data = Vec::new();
    for f in &files {
        let t: Tensor<f32> = read_tensor_file(f)?;
        let (n, img) = match *t.shape() {
            [h, w, c] => (1, [h, w, c]),
            [n, h, w, c] => (n, [h, w, c]),
            ref s => return Err(Error::format(f, format!("expected an image tensor, got shape {s:?}"))),
        };
        if img[2] != 3 {
            return Err(Error::format(f, format!("expected 3 channels, got {}", img[2])));
        }
        if *shape.get_or_insert(img) != img {
            return Err(Error::format(f, format!("image shape {img:?} differs from {:?}", shape.unwrap())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(f, "pixel values must lie in [0, 1]"));
        }
        count += n;
        data.extend_from_slice(t.data());
    }
    let [h, w, c] = shape.expect("at least one file");
    Tensor::from_vec(&[count, h, w, c], data)
}

fn generate_data(cfg: &ExperimentConfig) -> Result<()> {
    let spec = &cfg.data.synthetic;
    if spec.count == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config("synthetic dataset needs a positive count, height and width"));
    }
    for i in 0..spec.count {
        let path = cfg.output.join(format!("image_{i:06}.gvqt"));
        write_tensor_file(&path, &synthetic_image(spec, i))?;
    }
    if cfg.export.summary_json {
        write_json(&cfg.output.join("summary.json"), &json!({ "command": "generate-data", "spec": spec }))?;
    }
    Ok(())
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.epoch, m.utilization, m.recon, m.codebook, m.commit, m.total, m.psnr, m.ssim
        ));
    }
    s
}

fn eval_json(m: &EvalMetrics) -> serde_json::Value {
    json!({
        "mse": m.mse,
        "psnr": m.psnr,
        "ssim": m.ssim,
        "utilization": m.utilization,
        "group_counts": m.group_counts,
    })
}

/// Trains one configuration into `dir` and returns the trainer with its final
/// evaluation.
fn train_member(
    cfg: &ExperimentConfig,
    train: TrainConfig,
    dir: &Path,
    data: &Tensor<f32>,
    eval: &Tensor<f32>,
) -> Result<(Trainer, EvalMetrics)> {
    let trainer = Trainer::new(train)?;
    continue_member(cfg, trainer, dir, data, eval)
}

fn continue_member(
    cfg: &ExperimentConfig,
    mut trainer: Trainer,
    dir: &Path,
    data: &Tensor<f32>,
    eval: &Tensor<f32>,
) -> Result<(Trainer, EvalMetrics)> {
    ensure_dir(dir)?;
    let total = trainer.config().epochs;
    while !trainer.is_finished() {
        for m in trainer.run(data, Some(eval), Some(data.shape()[0].div_ceil(trainer.config().batch_size) as u64))? {
            eprintln!(
                "epoch {}/{total}: utilization {:.4} recon {:.5} psnr {:.2}",
                m.epoch + 1,
                m.utilization,
                m.recon,
                m.psnr
            );
        }
    }
    let ev = evaluate(trainer.autoencoder(), &trainer.codebook().materialized()?, eval, cfg.eval_batch_size)?;
    if cfg.export.metrics_csv {
        write_text(&dir.join("metrics.csv"), &metrics_csv(trainer.history()))?;
    }
    if cfg.export.checkpoint {
        write_checkpoint_file(&dir.join("checkpoint.gvqc"), &trainer.checkpoint())?;
    }
    if cfg.export.summary_json {
        write_json(
            &dir.join("summary.json"),
            &json!({
                "command": "train",
                "mode": trainer.config().mode.to_string(),
                "epochs": trainer.epoch(),
                "steps": trainer.step_count(),
                "final": trainer.history().last(),
                "eval": eval_json(&ev),
            }),
        )?;
    }
    Ok((trainer, ev))
}

fn train_cmd(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let data = load_images(&cfg.data)?;
    let eval = load_images(&cfg.eval)?;
    match resume {
        Some(p) => {
            let trainer = Trainer::from_checkpoint(&read_checkpoint_file(p)?)?;
            continue_member(cfg, trainer, &cfg.output, &data, &eval)?;
        }
        None => {
            train_member(cfg, cfg.train.clone(), &cfg.output, &data, &eval)?;
        }
    }
    Ok(())
}

fn load_trainer(path: &Path) -> Result<(Checkpoint, Trainer)> {
    let ckpt = read_checkpoint_file::<f32>(path)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    Ok((ckpt, trainer))
}

fn grouped(trainer: &Trainer) -> Result<&GroupedCodebook> {
    match trainer.codebook() {
        CodebookState::Grouped(gc) => Ok(gc),
        CodebookState::Free { .. } => Err(Error::config("vanilla codebooks have no projector to resample")),
    }
}

fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let (_, trainer) = load_trainer(checkpoint)?;
    let eval = load_images(&cfg.eval)?;
    let cb = trainer.codebook().materialized()?;
    let ev = evaluate(trainer.autoencoder(), &cb, &eval, cfg.eval_batch_size)?;
    let mut usage = String::from("code_index,group,count\n");
    for (j, w) in cb.offsets.windows(2).enumerate() {
        for i in w[0]..w[1] {
            usage.push_str(&format!("{i},{j},{}\n", ev.code_counts[i]));
        }
    }
    write_text(&cfg.output.join("usage.csv"), &usage)?;
    write_json(&cfg.output.join("eval.json"), &eval_json(&ev))?;
    println!("mse {} psnr {} ssim {} utilization {}", ev.mse, ev.psnr, ev.ssim, ev.utilization);
    Ok(())
}

fn resample_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    mode: ResampleArg,
    sizes: &[usize],
    multiple: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (ckpt, trainer) = load_trainer(checkpoint)?;
    let gc = grouped(&trainer)?;
    let mode = match mode {
        ResampleArg::Resample => ResampleMode::Resample,
        ResampleArg::SelfExtend => ResampleMode::SelfExtend,
    };
    let rng = RngStream::derive(seed.unwrap_or(ckpt.config.seed), StreamPurpose::Resample, 0);
    let req = match (multiple, sizes.is_empty()) {
        (Some(m), _) => {
            if m == 0 {
                return Err(Error::config("--multiple must be at least 1"));
            }
            ResampleRequest::scaled(gc, mode, m, rng)
        }
        (None, false) => ResampleRequest {
            mode,
            target_sizes: sizes.to_vec(),
            rng,
        },
        (None, true) => return Err(Error::config("resample needs --sizes or --multiple")),
    };
    let (out, remap) = resample_codebook(gc, &req)?;
    let cb = out.materialized()?;
    write_tensor_file(&cfg.output.join("codebook.gvqt"), &cb.codes)?;
    write_text(&cfg.output.join("remap.csv"), &remap.to_csv())?;
    let eval = load_images(&cfg.eval)?;
    let ev = evaluate(trainer.autoencoder(), &cb, &eval, cfg.eval_batch_size)?;
    let mut summary = eval_json(&ev);
    summary["codebook_size"] = json!(cb.n());
    summary["group_sizes"] = json!(req.target_sizes);
    write_json(&cfg.output.join("resample.json"), &summary)?;
    Ok(())
}

pub fn extension_csv(rows: &[ExtensionRow]) -> String {
    let mut s = format!("{EXTENSION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.multiple, r.codebook_size, r.mse, r.psnr, r.ssim, r.utilization
        ));
    }
    s
}

fn extend_cmd(cfg: &ExperimentConfig, checkpoint: &Path, multiples: &[usize], stem: &str) -> Result<()> {
    let (ckpt, _) = load_trainer(checkpoint)?;
    let eval = load_images(&cfg.eval)?;
    let rows = extension_sweep(&ckpt, multiples, &eval, cfg.eval_batch_size)?;
    write_text(&cfg.output.join(format!("{stem}.csv")), &extension_csv(&rows))?;
    if cfg.export.summary_json {
        write_json(&cfg.output.join(format!("{stem}.json")), &json!({ "rows": rows }))?;
    }
    Ok(())
}

fn analyze_cmd(cfg: &ExperimentConfig, checkpoint: &Path, per_group: usize) -> Result<()> {
    let (ckpt, trainer) = load_trainer(checkpoint)?;
    let cb = trainer.codebook().materialized()?;
    let eval = load_images(&cfg.eval)?;
    let ev = evaluate(trainer.autoencoder(), &cb, &eval, cfg.eval_batch_size)?;
    let (stats, no_usage) = group_stats(&cb, &ev.code_counts)?;
    let mut s = String::from("group,norm_mean,norm_var,usage_frac\n");
    for g in &stats {
        s.push_str(&format!("{},{},{},{}\n", g.group, g.norm_mean, g.norm_var, g.usage_frac));
    }
    write_text(&cfg.output.join("group_stats.csv"), &s)?;

    let seed = ckpt.config.seed;
    let (codes, picked) = sample_codes_per_group(&cb, per_group, &mut RngStream::derive(seed, StreamPurpose::Analysis, 0));
    let cos = cosine_similarity_matrix(&codes)?;
    let mut cs = String::from("i,j,sim\n");
    for (a, (i, _)) in picked.iter().enumerate() {
        for (b, (j, _)) in picked.iter().enumerate() {
            cs.push_str(&format!("{i},{j},{}\n", cos.row(a)[b]));
        }
    }
    write_text(&cfg.output.join("cosine.csv"), &cs)?;
    write_tensor_file(&cfg.output.join("cosine.gvqt"), &cos)?;
    let random = random_projection_2d(&codes, &mut RngStream::derive(seed, StreamPurpose::Analysis, 1))?;
    let pca = pca_2d(&codes)?;
    let mut rp = String::from("code_index,group,x,y\n");
    let mut pp = String::from("code_index,group,x,y\n");
    for (row, (i, j)) in picked.iter().enumerate() {
        rp.push_str(&format!("{i},{j},{},{}\n", random.row(row)[0], random.row(row)[1]));
        pp.push_str(&format!("{i},{j},{},{}\n", pca.coords.row(row)[0], pca.coords.row(row)[1]));
    }
    write_text(&cfg.output.join("projection_random.csv"), &rp)?;
    write_text(&cfg.output.join("projection_pca.csv"), &pp)?;
    write_json(
        &cfg.output.join("analysis.json"),
        &json!({
            "utilization": ev.utilization,
            "no_usage": no_usage,
            "sampled_codes": picked.len(),
            "pca_explained_variance": pca.explained_variance,
            "pca_dropped_columns": pca.dropped,
        }),
    )?;
    Ok(())
}

fn final_util(t: &Trainer) -> f64 {
    t.history().last().map_or(f64::NAN, |m| m.utilization)
}

fn sweep_groups(cfg: &ExperimentConfig, groups: &[usize]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::config("sweep-groups needs at least one group count"));
    }
    for &k in groups {
        let train = TrainConfig {
            mode: Mode::Group(k),
            ..cfg.train.clone()
        };
        train.validate()?;
    }
    let data = load_images(&cfg.data)?;
    let eval = load_images(&cfg.eval)?;
    let mut table = format!("{SWEEP_GROUPS_HEADER}\n");
    let mut rows = Vec::new();
    for &k in groups {
        let train = TrainConfig {
            mode: Mode::Group(k),
            ..cfg.train.clone()
        };
        let (t, ev) = train_member(cfg, train, &cfg.output.join(format!("k{k}")), &data, &eval)?;
        table.push_str(&format!("{k},{},{},{},{}\n", final_util(&t), ev.psnr, ev.mse, ev.utilization));
        rows.push(json!({ "k": k, "final_utilization": final_util(&t), "final_psnr": ev.psnr, "final_eval_mse": ev.mse }));
    }
    write_text(&cfg.output.join("sweep_groups.csv"), &table)?;
    if cfg.export.summary_json {
        write_json(&cfg.output.join("sweep_groups.json"), &json!({ "rows": rows }))?;
    }
    Ok(())
}

fn sweep_projector(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.sweep.projectors.is_empty() {
        return Err(Error::config("sweep.projectors is empty"));
    }
    for &p in &cfg.sweep.projectors {
        TrainConfig {
            projector: p,
            ..cfg.train.clone()
        }
        .validate()?;
    }
    let data = load_images(&cfg.data)?;
    let eval = load_images(&cfg.eval)?;
    let mut table = format!("{SWEEP_PROJECTOR_HEADER}\n");
    for &p in &cfg.sweep.projectors {
        let train = TrainConfig {
            projector: p,
            ..cfg.train.clone()
        };
        let k = train.mode.groups(train.codebook_size);
        let params = k * projector_param_count(p, train.rank, train.autoencoder.dim);
        let (t, ev) = train_member(cfg, train, &cfg.output.join(p.label().replace('+', "_")), &data, &eval)?;
        table.push_str(&format!(
            "{},{params},{},{},{},{}\n",
            p.label(),
            final_util(&t),
            ev.psnr,
            ev.mse,
            ev.utilization
        ));
    }
    write_text(&cfg.output.join("sweep_projector.csv"), &table)?;
    Ok(())
}
