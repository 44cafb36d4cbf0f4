use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stpfnet::checkpoint::Checkpoint;
use stpfnet::config::RunConfig;
use stpfnet::data::dataset::frame_name;
use stpfnet::data::{load_dataset, read_mask, synth_dataset, write_dataset, write_mask, Dataset};
use stpfnet::experiment::{ablate, axis_variants, evaluate, load_data, train_run};
use stpfnet::metrics::{binarize, format_row};
use stpfnet::propagation::propagate_with;
use stpfnet::verify::{run_criterion, CRITERIA};

#[derive(Parser)]
#[command(name = "stpfnet", version, about = "Semi-supervised lesion segmentation in video by mask propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Where to dump the offending clip if the loss goes non-finite.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split and write metric tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        threshold: Option<f64>,
        /// Report directory; also receives thresholded masks with --masks.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        masks: bool,
    },
    /// Train and evaluate the variants of one ablation axis over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// modules, pooling, tap or mask.
        #[arg(long, default_value = "modules")]
        axis: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate the first-frame mask through one sequence and write the masks.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        sequence: String,
        /// First-frame mask; defaults to the sequence's own annotation.
        #[arg(long)]
        first_mask: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        /// TOML run config; only its `[data.synth]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        val_sequences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Verify {
        /// Subset of criterion ids, e.g. `1,2,9`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Dataset root; without one the synthetic benchmark is generated.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Any config key, e.g. `--set model.sfm=false --set data.synth.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; defaults to the data section of the checkpoint's config.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.train.momentum = v;
        }
        if let Some(v) = &self.data_root {
            cfg.data.root = Some(v.clone());
        }
        let cfg = apply_sets(cfg, &self.sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `a.b.c=value` overrides. Values are parsed as TOML and fall back
/// to plain strings.
fn apply_sets(cfg: RunConfig, sets: &[String]) -> Result<RunConfig> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut table = toml::Table::try_from(&cfg)?;
    for set in sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| anyhow!("--set {set:?} is not KEY=VALUE"))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty key in --set {set:?}"))?;
        let mut node = &mut table;
        for part in parts {
            node = node
                .entry(part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("--set {key}: {part} is not a section"))?;
        }
        node.insert(last.to_string(), value);
    }
    RunConfig::from_toml(&toml::to_string(&table)?).with_context(|| format!("applying {sets:?}"))
}

fn data_for(ck: &Checkpoint, args: &DataArgs) -> Result<Dataset> {
    let mut data_cfg = ck.config.data.clone();
    if let Some(root) = &args.data_root {
        data_cfg.root = Some(root.clone());
    }
    Ok(load_data(&data_cfg, ck.config.model.encoder.total_stride())?)
}

/// Echoes the effective config and a short run manifest into `dir`.
fn write_run_files(dir: &Path, cfg: &RunConfig, lines: &[String]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let args: Vec<String> = std::env::args().collect();
    let mut manifest = format!("command = {}\nversion = {}\n", args.join(" "), env!("CARGO_PKG_VERSION"));
    for l in lines {
        manifest.push_str(l);
        manifest.push('\n');
    }
    fs::write(dir.join("run.txt"), manifest)?;
    Ok(())
}

fn report_warnings(data: &Dataset) {
    for w in &data.warnings {
        log::warn!("{w}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { run, out, dump_dir } => {
            let cfg = run.resolve()?;
            eprintln!("effective config:\n{}", cfg.to_toml());
            let data = load_data(&cfg.data, cfg.model.encoder.total_stride())?;
            report_warnings(&data);
            let start = Instant::now();
            let (ck, report) = train_run(&cfg, &data, dump_dir.as_deref())?;
            ck.save(&out)?;
            let (first, last) = (report.initial_loss(cfg.train.smoothing), report.final_loss(cfg.train.smoothing));
            let losses: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
            fs::write(out.join("losses.txt"), losses)?;
            write_run_files(
                &out,
                &cfg,
                &[
                    format!("train_sequences = {}", data.train.len()),
                    format!("initial_smoothed_loss = {first}"),
                    format!("final_smoothed_loss = {last}"),
                    format!("seconds = {:.1}", start.elapsed().as_secs_f64()),
                ],
            )?;
            println!("trained {} steps: smoothed loss {first:.4} -> {last:.4}; checkpoint in {}", ck.step, out.display());
        }
        Command::Eval { checkpoint, data, split, threshold, out, masks } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let dataset = data_for(&ck, &data)?;
            report_warnings(&dataset);
            let names = match split {
                Split::Train => dataset.train.clone(),
                Split::Val => dataset.val.clone(),
                Split::All => dataset.sequences.iter().map(|s| s.name.clone()).collect(),
            };
            let thr = threshold.unwrap_or(ck.config.eval.threshold);
            let method = ck.config.model.variant_name();
            let eval = evaluate(&model, &dataset.subset(&names), thr, method)?;
            let mut cfg = ck.config.clone();
            cfg.eval.threshold = thr;
            write_run_files(&out, &cfg, &[format!("checkpoint = {}", checkpoint.display())])?;
            fs::write(out.join("metrics.tsv"), eval.report.to_table())?;
            fs::write(out.join("sequences.tsv"), eval.report.details())?;
            if masks {
                for (name, preds) in &eval.predictions {
                    let dir = out.join("masks").join(name);
                    fs::create_dir_all(&dir)?;
                    for (i, p) in preds.iter().enumerate() {
                        write_mask(&binarize(p, thr), &dir.join(frame_name(i + 1)))?;
                    }
                }
            }
            print!("{}", eval.report.to_table());
        }
        Command::Ablate { run, axis, seeds, out } => {
            let cfg = run.resolve()?;
            eprintln!("effective config:\n{}", cfg.to_toml());
            let variants = axis_variants(&axis, &cfg.model)?;
            let table = ablate(&cfg, &variants, &seeds)?;
            write_run_files(&out, &cfg, &[format!("axis = {axis}"), format!("seeds = {seeds:?}")])?;
            fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            let mut per_seed = String::from("Variant\tSeed\tDice\tIou\tRecall\tMAE\n");
            for row in &table.rows {
                for (seed, m) in seeds.iter().zip(&row.per_seed) {
                    per_seed.push_str(&format_row(&format!("{}\t{seed}", row.variant.label), m));
                    per_seed.push('\n');
                }
            }
            fs::write(out.join("ablation_seeds.tsv"), per_seed)?;
            print!("{}", table.to_tsv());
        }
        Command::Predict { checkpoint, data, sequence, first_mask, threshold, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let dataset = data_for(&ck, &data)?;
            let seq = dataset.get(&sequence).ok_or_else(|| anyhow!("no sequence named {sequence}"))?;
            let first = match &first_mask {
                Some(path) => seq.padding.apply(&read_mask(path)?)?,
                None => seq
                    .masks
                    .as_ref()
                    .map(|m| m[0].clone())
                    .ok_or_else(|| anyhow!("{sequence} has no annotation; pass --first-mask"))?,
            };
            let thr = threshold.unwrap_or(ck.config.eval.threshold);
            let preds = propagate_with(&model, seq, &first)?;
            let dir = out.join(&sequence);
            fs::create_dir_all(&dir)?;
            write_mask(&seq.unpad(&first)?, &dir.join(frame_name(0)))?;
            for (i, p) in preds.iter().enumerate() {
                write_mask(&binarize(p, thr), &dir.join(frame_name(i + 1)))?;
            }
            write_run_files(&out, &ck.config, &[format!("checkpoint = {}", checkpoint.display()), format!("sequence = {sequence}")])?;
            println!("wrote {} masks to {}", preds.len() + 1, dir.display());
        }
        Command::Synth { config, sequences, val_sequences, seed, out } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let spec = &mut cfg.data.synth;
            if let Some(v) = sequences {
                spec.sequences = v;
            }
            if let Some(v) = val_sequences {
                spec.val_sequences = v;
            }
            if let Some(v) = seed {
                spec.seed = v;
            }
            if spec.val_sequences > spec.sequences {
                bail!("val_sequences {} exceeds sequences {}", spec.val_sequences, spec.sequences);
            }
            let synth = synth_dataset(spec)?;
            write_dataset(&out, &synth.sequences, &synth.train, &synth.val)?;
            let check = load_dataset(&out, 1)?;
            report_warnings(&check);
            println!(
                "wrote {} sequences ({} train, {} val) to {}",
                synth.sequences.len(),
                synth.train.len(),
                synth.val.len(),
                out.display()
            );
        }
        Command::Verify { only } => {
            let mut failed = 0;
            for (id, _) in CRITERIA.iter().filter(|(id, _)| only.is_empty() || only.contains(id)) {
                let result = run_criterion(*id);
                println!("{result}");
                failed += usize::from(!result.passed);
            }
            println!("{}", if failed == 0 { "all criteria passed".to_string() } else { format!("{failed} criteria failed") });
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}
