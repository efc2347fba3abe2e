use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use noisegcl::evaluation::{
    ablation_grid, evaluate_embeddings, fingerprint, linear_probe, EvalProtocol, EvalReport,
};
use noisegcl::experiment::{DataSource, ExperimentSpec};
use noisegcl::graph::{generate_sbm, load_graph, save_graph, SbmParams, SplitMasks};
use noisegcl::noise::{write_edge_noise_dot, write_edge_noise_tsv};
use noisegcl::params::{save_checkpoint, ParamSet};
use noisegcl::training::{
    gradcheck_fixture, gradcheck_objective, train, TrainConfig, TrainContext,
};
use noisegcl::{EncoderParams, Error};

const OUT_ENV: &str = "NOISEGCL_OUT";

#[derive(Parser)]
#[command(
    name = "noisegcl",
    version,
    about = "Graph contrastive learning with learnable noise views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write its checkpoint, diagnostics and edge-noise export.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Graph directory; overrides the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the 3 x 3 feature / edge augmentation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Also write a LaTeX table.
        #[arg(long)]
        emit_latex: bool,
    },
    /// Write a stochastic block model graph directory.
    GenSynth {
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Nodes per block.
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 1.0)]
        shift: f64,
        #[arg(long, default_value_t = 16)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
    },
    /// Compare tape gradients of the training objective with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Default)]
        scale: Scale,
        /// Corrupt the backward pass; the check must then fail.
        #[arg(long)]
        inject_bug: bool,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Linear-probe a trained encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fixed split file (`splits.json` layout); otherwise random splits.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Number of random 10/10/80 splits.
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment file whose training settings produced the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Probe the raw node features instead of the encoder.
        #[arg(long)]
        raw: bool,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
    Default,
}

/// Failure classes and their exit codes.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Diverged(anyhow::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::Check(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Data(e) => write!(f, "data error: {e:#}"),
            Failure::Diverged(e) => write!(f, "{e:#}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

/// Sorts a library error raised while running into an exit class.
fn run_err(e: Error) -> Failure {
    match e {
        Error::Diverged(_) => Failure::Diverged(e.into()),
        Error::Config(_) | Error::NonPositive { .. } => Failure::Config(e.into()),
        _ => Failure::Data(e.into()),
    }
}

fn load_spec(
    config: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(ExperimentSpec, PathBuf), Failure> {
    let mut spec = ExperimentSpec::load(config).map_err(config_err)?;
    if let Some(d) = data {
        spec.data = DataSource {
            path: Some(d.to_path_buf()),
            synth: None,
        };
    }
    spec.data.validate().map_err(config_err)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| spec.out.clone())
        .ok_or_else(|| {
            config_err(anyhow!(
                "no output directory: pass --out, set {OUT_ENV}, or set `out`"
            ))
        })?;
    Ok((spec, out))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(config_err)
}

fn write_text(path: &Path, body: &str) -> CmdResult {
    fs::write(path, body)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(config_err)
}

fn write_json_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> CmdResult {
    let mut body = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut body, r).expect("record serialises");
        body.push(b'\n');
    }
    fs::write(path, body)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(config_err)
}

fn save_params<P: ParamSet>(stem: &Path, p: &P, kind: &str) -> CmdResult {
    save_checkpoint(
        stem,
        &p.to_named_tensors(),
        serde_json::json!({ "kind": kind }),
    )
    .map(|_| ())
    .map_err(config_err)
}

fn cmd_train(
    config: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CmdResult {
    let (mut spec, out) = load_spec(config, data, out)?;
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    spec.train.validate().map_err(config_err)?;
    let (graph, _) = spec.data.load().map_err(data_err)?;
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &spec.to_toml())?;

    let started = Instant::now();
    let outcome = match train(&graph, &spec.train) {
        Ok(o) => o,
        Err(Error::Diverged(d)) => {
            write_json_lines(&out.join("diagnostics.jsonl"), &d.trace)?;
            d.last_good
                .save(out.join("last_good"))
                .map_err(config_err)?;
            return Err(Failure::Diverged(anyhow!(
                "training diverged at epoch {}; last good encoder written to {}",
                d.epoch,
                out.join("last_good.bin").display()
            )));
        }
        Err(e) => return Err(run_err(e)),
    };
    log::info!(
        "trained {} epochs in {:.1?}",
        spec.train.epochs,
        started.elapsed()
    );

    write_json_lines(&out.join("diagnostics.jsonl"), &outcome.trace)?;
    outcome
        .encoder
        .save(out.join("encoder"))
        .map_err(config_err)?;
    if let Some(p) = &outcome.edge_gen {
        save_params(&out.join("edge_gen"), p, "edge_gen")?;
    }
    if let Some(p) = &outcome.attr_gen {
        save_params(&out.join("attr_gen"), p, "attr_gen")?;
    }
    if let Some(edge) = outcome.last_sample.as_ref().and_then(|s| s.edge.as_ref()) {
        write_edge_noise_tsv(out.join("edge_noise.tsv"), &graph, edge).map_err(config_err)?;
        write_edge_noise_dot(out.join("edge_noise.dot"), &graph, edge).map_err(config_err)?;
    }
    if let Some(last) = outcome.trace.last() {
        println!(
            "epoch {} loss {:.6} mean_kappa {:.6}",
            last.epoch, last.loss, last.mean_kappa
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(config: &Path, data: Option<&Path>, out: Option<&Path>, latex: bool) -> CmdResult {
    let (spec, out) = load_spec(config, data, out)?;
    let (graph, _) = spec.data.load().map_err(data_err)?;
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &spec.to_toml())?;
    let grid = ablation_grid(&graph, &spec.train, &spec.eval).map_err(run_err)?;
    grid.write(&out, latex).map_err(config_err)?;
    print!("{}", grid.to_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_synth(
    blocks: usize,
    size: usize,
    p_in: f64,
    p_out: f64,
    shift: f64,
    feat_dim: usize,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let params = SbmParams {
        n_per_block: size,
        num_blocks: blocks,
        p_in,
        p_out,
        feat_dim,
        feat_shift: shift,
        seed,
    };
    params.validate().map_err(config_err)?;
    let (graph, splits) = generate_sbm(&params).map_err(data_err)?;
    save_graph(out, &graph, Some(&splits), None).map_err(config_err)?;
    println!(
        "{} nodes, {} edges -> {}",
        graph.num_nodes(),
        graph.num_edges(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(scale: Scale, inject_bug: bool, tol: f64, out: Option<&Path>) -> CmdResult {
    let (seeds, n_per_block) = match scale {
        Scale::Tiny => (1, 3),
        Scale::Default => (20, 6),
    };
    let started = Instant::now();
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (graph, cfg) = gradcheck_fixture(seed, n_per_block).map_err(data_err)?;
        let report = gradcheck_objective(&graph, &cfg, seed, inject_bug).map_err(run_err)?;
        worst = worst.max(report.max_rel_error());
        println!(
            "seed {seed:2}: n={} max_rel_error {:.3e} checked {} skipped {}",
            graph.num_nodes(),
            report.max_rel_error(),
            report.checked_entries(),
            report.skipped_entries()
        );
        reports.push(serde_json::json!({ "seed": seed, "report": report }));
    }
    println!(
        "max relative error {worst:.3e} over {seeds} seeds in {:.2?}",
        started.elapsed()
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        let body = serde_json::to_string_pretty(&reports).expect("report serialises") + "\n";
        write_text(&dir.join("gradcheck.json"), &body)?;
    }
    if worst < tol {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {worst:.3e} >= {tol:e}"
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    splits: Option<&Path>,
    repeats: usize,
    seed: u64,
    config: Option<&Path>,
    raw: bool,
    out: Option<&Path>,
) -> CmdResult {
    let train_cfg = match config {
        Some(c) => ExperimentSpec::load(c).map_err(config_err)?.train,
        None => TrainConfig::default(),
    };
    if repeats == 0 {
        return Err(config_err(anyhow!("--repeats must be at least 1")));
    }
    let (graph, _) = load_graph(data).map_err(data_err)?;
    let labels = graph
        .labels()
        .ok_or_else(|| data_err(anyhow!("{} has no labels.csv", data.display())))?;
    let z = if raw {
        graph.features().clone()
    } else {
        let enc = EncoderParams::load(checkpoint).map_err(data_err)?;
        let ctx = TrainContext::new(&graph, train_cfg.row_normalize_features);
        noisegcl::encoder::embed(&enc, &ctx.adjacency, &ctx.features).map_err(data_err)?
    };
    let protocol = EvalProtocol {
        n_splits: repeats,
        seeds: vec![0],
        split_seed: seed,
        ..EvalProtocol::default()
    };
    let report: EvalReport = match splits {
        Some(path) => {
            let fixed = read_split_file(path, graph.num_nodes())?;
            let acc = linear_probe(&z, labels, &fixed, &protocol.probe)
                .map_err(data_err)?
                .test_accuracy;
            EvalReport::from_runs(vec![acc], fingerprint(&path))
        }
        None => evaluate_embeddings(&z, labels, &protocol).map_err(data_err)?,
    };
    println!(
        "accuracy {:.4} +- {:.4} over {} runs",
        report.mean,
        report.std,
        report.accuracies.len()
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        report
            .write_json(dir.join("eval_report.json"))
            .map_err(config_err)?;
    }
    Ok(())
}

fn read_split_file(path: &Path, num_nodes: usize) -> Result<SplitMasks, Failure> {
    #[derive(serde::Deserialize)]
    struct SplitFile {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    }
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(data_err)?;
    let s: SplitFile = serde_json::from_str(&text)
        .with_context(|| format!("{}", path.display()))
        .map_err(data_err)?;
    SplitMasks::from_indices(num_nodes, &s.train, &s.val, &s.test).map_err(data_err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(config, data.as_deref(), out.as_deref(), *seed),
        Command::Ablate {
            config,
            data,
            out,
            emit_latex,
        } => cmd_ablate(config, data.as_deref(), out.as_deref(), *emit_latex),
        Command::GenSynth {
            blocks,
            size,
            p_in,
            p_out,
            shift,
            feat_dim,
            seed,
            out,
        } => cmd_gen_synth(*blocks, *size, *p_in, *p_out, *shift, *feat_dim, *seed, out),
        Command::Gradcheck {
            scale,
            inject_bug,
            tol,
            out,
        } => cmd_gradcheck(*scale, *inject_bug, *tol, out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            splits,
            repeats,
            seed,
            config,
            raw,
            out,
        } => cmd_eval(
            checkpoint,
            data,
            splits.as_deref(),
            *repeats,
            *seed,
            config.as_deref(),
            *raw,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = writeln!(std::io::stderr(), "noisegcl: {f}");
            ExitCode::from(f.code())
        }
    }
}
