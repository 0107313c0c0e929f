//! `cgmd`: synthetic cohort generation, inspectable pipeline stages, cross-validation
//! and the ablation grid.
//!
//! Stage commands (`graph`, `smooth`, `impute`, `train`) recompute everything upstream
//! of themselves for the chosen fold, so each one is self-contained and `train --fold i`
//! reproduces fold `i` of `cv` exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cgmd_core::cv::{evaluate_fold, fit_prepared, prepare_fold, run_cv, Cohorts, FoldArtifacts};
use cgmd_core::graph::{build_knn_graph, sig9, KnnGraph};
use cgmd_core::ingest::{load_cohort, save_id_list, save_matrix, RawCohortFile, Schema};
use cgmd_core::report::{emit_ablation_table, fold_report, run_ablation, write_cv_reports};
use cgmd_core::synth::{generate, SynthConfig};
use cgmd_core::trainer::TrainConfig;
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "cgmd", version, about = "Graph-guided MRI-to-fundus distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic MRI and fundus cohorts.
    Gen(GenArgs),
    /// Build the teacher and student biomarker graphs for one fold.
    Graph(StageArgs),
    /// Smooth teacher embeddings over the teacher graph for one fold.
    Smooth(StageArgs),
    /// Impute teacher priors for the training patients of one fold.
    Impute(StageArgs),
    /// Train and evaluate the student on one fold.
    Train(StageArgs),
    /// Cross-validate the configured method.
    Cv(RunArgs),
    /// Cross-validate the switch combinations and prior constructions.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file (synthetic config for `gen`, training config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Seed for generation, fold assignment and initialization; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config field, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE", value_parser = parse_assignment)]
    overrides: Vec<(String, String)>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding mri.csv, mri.schema, fundus.csv and fundus.schema.
    #[arg(long)]
    data: PathBuf,
    /// Fold index to run, counted from 0.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding mri.csv, mri.schema, fundus.csv and fundus.schema.
    #[arg(long)]
    data: PathBuf,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected FIELD=VALUE, got {s:?}")),
    }
}

/// A failure attributable to the command line rather than to a pipeline stage.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(&a.common),
        Command::Graph(a) => stage(&a, Stage::Graph),
        Command::Smooth(a) => stage(&a, Stage::Smooth),
        Command::Impute(a) => stage(&a, Stage::Impute),
        Command::Train(a) => stage(&a, Stage::Train),
        Command::Cv(a) => cv(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn synth_config(c: &Common) -> Result<SynthConfig> {
    let mut cfg = match &c.config {
        Some(p) => SynthConfig::from_toml(&read_text(p)?).with_context(|| format!("config {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    for (k, v) in &c.overrides {
        cfg.set(k, v).map_err(|e| UsageError(format!("--set {k}={v}: {e}")))?;
    }
    Ok(cfg)
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    for (k, v) in &c.overrides {
        cfg.set(k, v).map_err(|e| UsageError(format!("--set {k}={v}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_cohorts(dir: &Path) -> Result<Cohorts> {
    let load = |stem: &str| -> Result<RawCohortFile> {
        let schema = Schema::load(&dir.join(format!("{stem}.schema")))?;
        Ok(load_cohort(&dir.join(format!("{stem}.csv")), &schema)?)
    };
    Ok(Cohorts::new(load("mri")?, load("fundus")?)?)
}

fn gen(c: &Common) -> Result<()> {
    let cfg = synth_config(c)?;
    let cohorts = generate(&cfg)?;
    let out = out_dir(c)?;
    cohorts.save(out)?;
    write_file(&out.join("synth.toml"), &cfg.to_toml())?;
    info!(
        "generated {} mri and {} fundus patients, fundus oracle auc {:.4}",
        cohorts.mri.len(),
        cohorts.fundus.len(),
        cohorts.fundus_oracle_auc()?
    );
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Graph,
    Smooth,
    Impute,
    Train,
}

fn write_graph(path: &Path, g: &KnnGraph) -> Result<()> {
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(f);
    g.write_text(&mut w)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn stage(a: &StageArgs, which: Stage) -> Result<()> {
    let cfg = train_config(&a.common)?;
    let cohorts = load_cohorts(&a.data)?;
    let splits = cohorts.splits(&cfg)?;
    let Some(split) = splits.get(a.fold) else {
        return Err(UsageError(format!("--fold {} out of range for {} folds", a.fold, splits.len())).into());
    };
    let artifacts = prepare_fold(&cohorts, split, &cfg)?;
    let out = out_dir(&a.common)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    match which {
        Stage::Graph => graph_stage(out, &artifacts, &cfg),
        Stage::Smooth => smooth_stage(out, &artifacts),
        Stage::Impute => impute_stage(out, &artifacts),
        Stage::Train => {
            let fit = fit_prepared(&artifacts, &cfg)?;
            fit.params.save_checkpoint(out, "student")?;
            let result = evaluate_fold(&artifacts, fit, &cfg)?;
            info!("fold {}: auc {:.4}", result.fold_id, result.eval.auc);
            write_file(&out.join(format!("fold_{}.txt", result.fold_id)), &fold_report(&result))
        }
    }
}

fn graph_stage(out: &Path, a: &FoldArtifacts, cfg: &TrainConfig) -> Result<()> {
    let teacher = match &a.teacher_graph {
        Some(g) => g.clone(),
        None => build_knn_graph(&a.teacher.biomarkers, cfg.k_mri, cfg.sigma)?,
    };
    let student = build_knn_graph(&a.train.biomarkers, cfg.k_fundus, cfg.sigma)?;
    let sym = cgmd_core::graph::symmetrize(&student, cfg.fundus_edge_weight)?;
    write_graph(&out.join("teacher_graph.txt"), &teacher)?;
    write_graph(&out.join("student_graph.txt"), &student)?;
    let edges: String = sym.edges.iter().map(|(u, v, w)| format!("{u},{v},{}\n", sig9(*w))).collect();
    write_file(&out.join("student_edges.txt"), &edges)?;
    save_id_list(&out.join("teacher_ids.txt"), &a.teacher.ids)?;
    save_id_list(&out.join("train_ids.txt"), &a.train.ids)?;
    info!(
        "teacher graph {} edges, student graph {} directed / {} undirected edges",
        teacher.edge_count(),
        student.edge_count(),
        sym.edges.len()
    );
    Ok(())
}

fn smooth_stage(out: &Path, a: &FoldArtifacts) -> Result<()> {
    let Some(z) = &a.teacher_embeddings else {
        bail!("smooth needs distill = true");
    };
    save_matrix(&out.join("teacher_embeddings.bin"), z)?;
    save_id_list(&out.join("teacher_ids.txt"), &a.teacher.ids)?;
    info!("wrote {} teacher embeddings of width {}", z.rows(), z.cols());
    Ok(())
}

fn impute_stage(out: &Path, a: &FoldArtifacts) -> Result<()> {
    let Some(p) = &a.priors else {
        bail!("impute needs distill = true");
    };
    save_matrix(&out.join("priors.bin"), &p.priors)?;
    save_id_list(&out.join("train_ids.txt"), &a.train.ids)?;
    let path = out.join("priors_manifest.txt");
    let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(f);
    p.write_manifest(&mut w, &a.train.ids, &a.teacher.ids)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", path.display()))?;
    info!("imputed {} priors, gated fallback rate {:.3}", p.len(), p.fallback_rate());
    Ok(())
}

fn cv(a: &RunArgs) -> Result<()> {
    let cfg = train_config(&a.common)?;
    let cohorts = load_cohorts(&a.data)?;
    let report = run_cv(&cohorts, &cfg, a.jobs as usize)?;
    let out = out_dir(&a.common)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    write_cv_reports(out, &report)?;
    for m in &report.summary {
        println!("{:<12} {:.4} ± {:.4}", m.name, m.mean, m.std);
    }
    Ok(())
}

fn ablate(a: &RunArgs) -> Result<()> {
    let cfg = train_config(&a.common)?;
    let cohorts = load_cohorts(&a.data)?;
    let rows: Vec<_> = run_ablation(&cohorts, &cfg, a.jobs as usize)?
        .into_iter()
        .map(|(name, report)| (name, report.summary))
        .collect();
    let table = emit_ablation_table(&rows)?;
    let out = out_dir(&a.common)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    write_file(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
