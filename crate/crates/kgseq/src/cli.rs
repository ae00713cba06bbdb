//! Command-line front end. Every command reads its inputs from files and
//! the configuration alone, and writes its artifacts under `--out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kgseq_core::eval::explain;
use kgseq_core::fusion::FusedTable;
use kgseq_core::kg::Triple;
use kgseq_core::trajectory::Trajectory;
use log::info;

use crate::checkpoint::{Checkpoint, Kind};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{self, Data, Model};
use crate::report;

pub const FUSION_CKPT: &str = "fusion.ckpt";
pub const PATHS: &str = "paths.txt";
pub const TRAJECTORIES: &str = "trajectories.bin";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const REPORT: &str = "report.jsonl";

#[derive(Parser, Debug)]
#[command(name = "kgseq", version, about = "Return-conditioned multi-hop link prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset applied after the file (paper-best, overfit).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Single `key=value` override; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ablation mode: no-img, mkg, rl or mkg+rl.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (train/valid/test/features) into `--out`.
    Gen,
    /// Pretrain the fusion blocks on the dataset's features.
    Pretrain(DataArg),
    /// Mine a supervision path for every training query.
    Mine(DataArg),
    /// Build the trajectory cache from the mined paths.
    BuildTraj(DataArg),
    /// Train the encoder; reuses cached stages found in `--out`.
    Train(DataArg),
    /// Rank tails for a split and write the report.
    Eval(EvalArgs),
    /// Print decoded reasoning paths for one query.
    Explain(ExplainArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Dataset directory with train.tsv, valid.tsv, test.tsv, features.tsv.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
    pub split: String,
    /// Skip other known tails of the same query when ranking.
    #[arg(long)]
    pub filtered: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ExplainArgs {
    pub head: String,
    pub relation: String,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of candidate tails to print.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

/// Resolves the configuration: defaults, file, preset, `--set`, then the
/// dedicated flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse(&io::read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.preset {
        cfg.apply_preset(p)?;
    }
    for kv in &common.sets {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = &common.mode {
        cfg.mode = m.parse()?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(&cli.common)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, out),
        Command::Pretrain(d) => cmd_pretrain(&cfg, &d.data, out),
        Command::Mine(d) => cmd_mine(&cfg, &d.data, out),
        Command::BuildTraj(d) => cmd_build_traj(&cfg, &d.data, out),
        Command::Train(d) => cmd_train(&cfg, &d.data, out),
        Command::Eval(a) => cmd_eval(&cli.common, a),
        Command::Explain(a) => cmd_explain(&cli.common, a),
    }
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = crate::synth::generate(&cfg.gen)?;
    io::write_dataset(out, &data)?;
    let lines = |s: &str| s.lines().count();
    Ok(format!(
        "wrote {} train, {} valid, {} test triples and {} feature rows to {}\n",
        lines(&data.train),
        lines(&data.valid),
        lines(&data.test),
        lines(&data.features),
        out.display()
    ))
}

fn load(cfg: &RunConfig, data: &Path) -> Result<Data> {
    io::load_dataset(data, cfg.feature_width)
}

/// Fusion-relevant settings; a cached stage built under other values is stale.
fn fusion_fingerprint(cfg: &RunConfig) -> String {
    let keys = [
        "seed",
        "feature_width",
        "fusion_epochs",
        "fusion_lr",
        "segments",
        "structure_width",
        "image_width",
        "ocr_width",
    ];
    let entries = cfg.entries();
    keys.iter()
        .map(|k| {
            let v = &entries.iter().find(|(n, _)| n == k).expect("known key").1;
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn trajectory_fingerprint(cfg: &RunConfig) -> String {
    format!(
        "{};mode={};r_good={};r_bad={};r_step={};train_limit={}",
        fusion_fingerprint(cfg),
        cfg.mode.multimodal(),
        cfg.r_good,
        cfg.r_bad,
        cfg.r_step,
        cfg.train_limit
    )
}

fn pretrained(cfg: &RunConfig, data: &Data, out: &Path) -> Result<FusedTable> {
    let path = out.join(FUSION_CKPT);
    let model = if path.exists() {
        let ck = Checkpoint::from_bytes(&path, &io::read_bytes(&path)?)?;
        ck.expect_kind(Kind::Fusion)?;
        ck.check_vocab(&data.dataset.vocab)?;
        if fusion_fingerprint(&ck.config) != fusion_fingerprint(cfg) {
            return Err(Error::Version(format!(
                "{} was pretrained under a different configuration; rerun `pretrain`",
                path.display()
            )));
        }
        info!("using {}", path.display());
        ck.fusion_model()?
    } else {
        let (m, _) = pipeline::pretrain(data, cfg)?;
        io::write_file(&path, Checkpoint::fusion(cfg, &data.dataset.vocab, &m).to_bytes())?;
        m
    };
    pipeline::fused_table(data, &model)
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let data = load(cfg, data)?;
    let (model, curve) = pipeline::pretrain(&data, cfg)?;
    let path = out.join(FUSION_CKPT);
    io::write_file(&path, Checkpoint::fusion(cfg, &data.dataset.vocab, &model).to_bytes())?;
    Ok(format!(
        "reconstruction loss {:.5} -> {:.5} over {} epochs; wrote {}\n",
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        curve.len(),
        path.display()
    ))
}

pub fn cmd_mine(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let data = load(cfg, data)?;
    let paths = pipeline::mine(&data, cfg)?;
    let path = out.join(PATHS);
    io::write_file(&path, io::format_paths(&data.dataset.vocab, &paths))?;
    let corrective = paths.iter().filter(|(_, p)| p.corrective).count();
    Ok(format!(
        "{} paths ({corrective} corrective); wrote {}\n",
        paths.len(),
        path.display()
    ))
}

fn trajectories(cfg: &RunConfig, data: &Data, out: &Path, cache_paths: bool) -> Result<(Vec<Trajectory>, Option<FusedTable>)> {
    let table = if cfg.mode.multimodal() {
        Some(pretrained(cfg, data, out)?)
    } else {
        None
    };
    let path_file = out.join(PATHS);
    let paths = if path_file.exists() {
        info!("using {}", path_file.display());
        io::parse_paths(&path_file, &io::read_text(&path_file)?, &data.dataset.vocab)?
    } else if cache_paths {
        return Err(Error::Missing {
            path: path_file,
            step: "mine",
        });
    } else {
        pipeline::mine(data, cfg)?
    };
    let trajs = pipeline::build_trajectories(data, &paths, table.as_ref(), cfg)?;
    Ok((trajs, table))
}

fn widths(cfg: &RunConfig) -> (usize, usize, usize) {
    (cfg.structure_width, cfg.image_width, cfg.ocr_width)
}

pub fn cmd_build_traj(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let data = load(cfg, data)?;
    let (trajs, _) = trajectories(cfg, &data, out, true)?;
    let path = out.join(TRAJECTORIES);
    io::write_file(
        &path,
        io::encode_trajectories(&trajs, widths(cfg), &trajectory_fingerprint(cfg))?,
    )?;
    Ok(format!("{} trajectories; wrote {}\n", trajs.len(), path.display()))
}

/// Runs the training stage, returning the model checkpoint and the
/// per-epoch log lines.
pub fn train_model(cfg: &RunConfig, data: &Data, out: &Path) -> Result<(Checkpoint, String)> {
    let cache = out.join(TRAJECTORIES);
    let (trajs, table) = if cache.exists() {
        let (header, trajs) = io::decode_trajectories(&cache, &io::read_bytes(&cache)?)?;
        if header.source != trajectory_fingerprint(cfg) || header.widths != widths(cfg) {
            return Err(Error::Version(format!(
                "{} was built under a different configuration; rerun `build-traj`",
                cache.display()
            )));
        }
        info!("using {}", cache.display());
        let table = if cfg.mode.multimodal() {
            Some(pretrained(cfg, data, out)?)
        } else {
            None
        };
        (trajs, table)
    } else {
        trajectories(cfg, data, out, false)?
    };
    let train_queries: Vec<Triple> = trajs.iter().map(|t| t.query).collect();
    let mut log = String::from("epoch\tL_fig\tL_ocr\tL_concat\trho_fig\trho_ocr\tcoeff_fig\tcoeff_ocr\ttrain_hits1\n");
    let encoder = pipeline::train(data.dataset.vocab.size(), &trajs, cfg, |e, enc| {
        let hits = if cfg.eval_every > 0 && (e.epoch as usize + 1).is_multiple_of(cfg.eval_every) {
            let model = Model {
                encoder: enc.clone(),
                table: table.clone(),
                images: data.registry.clone(),
            };
            let r = pipeline::evaluate(&model, &data.dataset, &train_queries, cfg)?;
            format!("{:.5}", r.hits1)
        } else {
            "-".into()
        };
        let l = &e.losses;
        let _ = writeln!(
            log,
            "{}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{hits}",
            e.epoch + 1,
            l.fig,
            l.ocr,
            l.concat,
            e.rho_fig,
            e.rho_ocr,
            e.coeff_fig,
            e.coeff_ocr
        );
        info!("epoch {} concat {:.5} train_hits1 {hits}", e.epoch + 1, l.concat);
        Ok(true)
    })?;
    let ck = Checkpoint::model(cfg, &data.dataset.vocab, &encoder, table.as_ref(), &data.registry)?;
    Ok((ck, log))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let data = load(cfg, data)?;
    let (ck, log) = train_model(cfg, &data, out)?;
    let path = out.join(MODEL_CKPT);
    io::write_file(&path, ck.to_bytes())?;
    io::write_file(&out.join(TRAIN_LOG), &log)?;
    Ok(format!("{log}wrote {}\n", path.display()))
}

fn open_model(common: &Common, checkpoint: &Option<PathBuf>) -> Result<(Checkpoint, RunConfig)> {
    let path = checkpoint.clone().unwrap_or_else(|| common.out.join(MODEL_CKPT));
    let path = io::require(&path, "train")?;
    let ck = Checkpoint::from_bytes(&path, &io::read_bytes(&path)?)?;
    ck.expect_kind(Kind::Model)?;
    // Decoding settings may be overridden; the model shape comes from the
    // checkpoint.
    let mut cfg = ck.config.clone();
    for kv in &common.sets {
        cfg.apply_override(kv)?;
    }
    if let Some(m) = &common.mode {
        let m: Mode = m.parse()?;
        if m != cfg.mode {
            return Err(Error::Config(format!("checkpoint was trained in mode {}, not {m}", cfg.mode)));
        }
    }
    Ok((ck, cfg))
}

pub fn cmd_eval(common: &Common, args: &EvalArgs) -> Result<String> {
    let (ck, mut cfg) = open_model(common, &args.checkpoint)?;
    cfg.filtered |= args.filtered;
    let data = load(&cfg, &args.data)?;
    ck.check_vocab(&data.dataset.vocab)?;
    let model = Model {
        encoder: ck.encoder()?,
        table: ck.table()?,
        images: ck.images()?,
    };
    let queries: Vec<Triple> = match args.split.as_str() {
        "train" => data.dataset.train.triples.clone(),
        "valid" => data.dataset.valid.clone(),
        _ => data.dataset.test.clone(),
    };
    if queries.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", args.split)));
    }
    let rep = pipeline::evaluate(&model, &data.dataset, &queries, &cfg)?;
    let path = common.out.join(REPORT);
    io::write_file(&path, report::jsonl(&rep, &data.dataset.vocab))?;
    Ok(format!("{}wrote {}\n", report::table(&rep, &data.dataset.vocab), path.display()))
}

pub fn cmd_explain(common: &Common, args: &ExplainArgs) -> Result<String> {
    let (ck, cfg) = open_model(common, &args.checkpoint)?;
    let vocab = &ck.vocab;
    let unknown = |kind, name: &str, relations| Error::Unknown {
        kind,
        name: name.to_string(),
        closest: vocab.suggestions(name, relations, 3).join(", "),
    };
    let head = vocab
        .entity(&args.head)
        .map_err(|_| unknown("entity", &args.head, false))?;
    let relation = vocab
        .relation(&args.relation)
        .map_err(|_| unknown("relation", &args.relation, true))?;
    let model = Model {
        encoder: ck.encoder()?,
        table: ck.table()?,
        images: ck.images()?,
    };
    let ranked = model.rank(vocab, head, relation, &cfg)?;
    let mut out = String::new();
    for c in ranked.iter().take(args.top) {
        let _ = writeln!(out, "{:.5}\t{}", c.score, explain(vocab, head, &c.path));
    }
    Ok(out)
}
