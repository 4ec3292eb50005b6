mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use safr::checkpoint::load_checkpoint;
use safr::data::{synth_dataset, write_dataset, Dataset, Split, SynthConfig};
use safr::evaluation::{
    evaluate_embeddings, extract_embeddings, repeated_gallery_protocol, write_embeddings, EmbeddingMeta,
};
use safr::instrumentation::{emit_model_card, profile};
use safr::training::{fit, resume, write_json};
use safr::{build_model, ModelConfig, ModelVariant};

use config::{resolve, ConfigError, Protocol, RunConfig};

const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(name = "safr", version, about = "Train, evaluate and profile SAFR vehicle re-id models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a manifest (resumes when --checkpoint is given)
    Train(Common),
    /// Extract query and gallery embeddings and report mAP / CMC
    Eval(Common),
    /// Write model cards with parameter and FLOP counts
    Profile(Common),
    /// Write embedding files for the query and gallery splits
    ExportEmbeddings(Common),
    /// Generate a synthetic dataset and its manifest
    SynthData(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Baseline,
    Large,
    Medium,
    Small,
    Micro,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    cross_camera_filter: Option<Toggle>,
}

impl Common {
    fn flag_overrides(&self) -> Vec<(Vec<String>, Value)> {
        let mut out = Vec::new();
        let mut set = |path: &str, v: Value| out.push((path.split('.').map(String::from).collect(), v));
        if let Some(s) = self.seed {
            set("seed", s.into());
        }
        if let Some(v) = self.variant.filter(|v| !matches!(v, VariantArg::All)) {
            set("model.variant", format!("{v:?}").to_ascii_lowercase().into());
        }
        if let Some(p) = &self.manifest {
            set("manifest", p.to_string_lossy().into_owned().into());
        }
        if let Some(p) = &self.checkpoint {
            set("checkpoint", p.to_string_lossy().into_owned().into());
        }
        if let Some(p) = &self.out {
            set("out_dir", p.to_string_lossy().into_owned().into());
        }
        if let Some(w) = self.workers {
            set("workers", w.into());
        }
        if let Some(m) = self.metric {
            set("eval.metric", format!("{m:?}").to_ascii_lowercase().into());
        }
        if let Some(t) = self.cross_camera_filter {
            set("eval.cross_camera_filter", matches!(t, Toggle::On).into());
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let cfg = resolve(self.config.as_deref(), std::env::vars(), &self.flag_overrides())?;
        if let Some(w) = cfg.workers {
            if w == 0 {
                return Err(ConfigError::new("workers", "must be at least 1").into());
            }
            // Fails only if a pool already exists, which cannot happen in this process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
        }
        Ok(cfg)
    }
}

fn persist(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_json(&cfg.out_dir.join(RESOLVED_CONFIG), cfg)?;
    Ok(())
}

fn require<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| ConfigError::new(field, "is required for this command").into())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let dataset = Dataset::from_manifest(require(&cfg.manifest, "manifest")?)?;
    persist(cfg)?;
    let tc = cfg.train_config();
    let out = match &cfg.checkpoint {
        Some(ck) => resume(&tc, &dataset, ck)?,
        None => fit(&tc, &dataset)?,
    };
    match out.log.last() {
        Some(r) => println!(
            "trained {} epochs ({} steps); final L_F {:.5} (L_S {:.5}, L_T {:.5}, L_C {:.5})",
            out.trainer.epoch, out.trainer.step, r.loss_total, r.loss_softmax, r.loss_triplet, r.loss_center
        ),
        None => println!("no training steps run (epoch {})", out.trainer.epoch),
    }
    if let Some(p) = &out.last_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(safr::Model, Dataset, PathBuf)> {
    let ck_path = require(&cfg.checkpoint, "checkpoint")?.to_path_buf();
    let dataset = Dataset::from_manifest(require(&cfg.manifest, "manifest")?)?;
    let ck = load_checkpoint(&ck_path)?;
    Ok((ck.model, dataset, ck_path))
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let (model, dataset, _) = load_model(cfg)?;
    persist(cfg)?;
    let e = &cfg.eval;
    let query = extract_embeddings(&model, &dataset, e.query_split, &cfg.preprocess, e.batch_size)?;
    if query.is_empty() {
        bail!("split `{}` has no records", e.query_split.name());
    }
    match e.protocol {
        Protocol::QueryGallery => {
            let gallery = if e.gallery_split == e.query_split {
                query.clone()
            } else {
                extract_embeddings(&model, &dataset, e.gallery_split, &cfg.preprocess, e.batch_size)?
            };
            let r = evaluate_embeddings(&query, &gallery, e.metric, e.max_rank, e.cross_camera_filter)?;
            write_json(&cfg.out_dir.join("eval_report.json"), &r)?;
            std::fs::write(cfg.out_dir.join("eval_report.txt"), r.table())?;
            println!(
                "mAP {:.3}  Rank-1 {:.3}  Rank-5 {:.3}  ({} queries, {} excluded)",
                r.map,
                r.rank(1),
                r.rank(5),
                r.valid_queries,
                r.excluded_queries
            );
        }
        Protocol::RepeatedGallery => {
            let r = repeated_gallery_protocol(&query.features, &query.identities, e.repeats, cfg.seed, e.metric, e.max_rank)?;
            write_json(&cfg.out_dir.join("eval_report.json"), &r)?;
            println!(
                "mAP {:.3} ± {:.3}  Rank-1 {:.3} ± {:.3}  Rank-5 {:.3} ± {:.3}  ({} repeats)",
                r.map_mean,
                r.map_std,
                r.cmc_mean[0],
                r.cmc_std[0],
                r.cmc_mean[4.min(e.max_rank - 1)],
                r.cmc_std[4.min(e.max_rank - 1)],
                r.repeats
            );
        }
    }
    Ok(())
}

fn export(cfg: &RunConfig) -> Result<()> {
    let (model, dataset, ck_path) = load_model(cfg)?;
    persist(cfg)?;
    let mut splits = vec![cfg.eval.query_split];
    if cfg.eval.gallery_split != cfg.eval.query_split {
        splits.push(cfg.eval.gallery_split);
    }
    for split in splits {
        let emb = extract_embeddings(&model, &dataset, split, &cfg.preprocess, cfg.eval.batch_size)?;
        let path = cfg.out_dir.join(format!("{}.emb", split.name()));
        let paths = dataset
            .index()
            .split_indices(split)
            .iter()
            .map(|&i| dataset.index().records()[i].path.clone())
            .collect();
        let meta = EmbeddingMeta {
            count: 0,
            dims: 0,
            dtype: String::new(),
            layout: String::new(),
            checkpoint: Some(ck_path.to_string_lossy().into_owned()),
            split: Some(split),
            identities: Vec::new(),
            cameras: Vec::new(),
            paths,
        };
        write_embeddings(&path, &emb, meta)?;
        println!("{}: {} × {} -> {}", split.name(), emb.len(), emb.features.ncols(), path.display());
    }
    Ok(())
}

fn profile_cmd(cfg: &RunConfig, all: bool) -> Result<()> {
    persist(cfg)?;
    let variants: Vec<ModelVariant> = if all { ModelVariant::ALL.to_vec() } else { vec![cfg.model.variant] };
    println!("{:<9} {:>12} {:>12} {:>6} {:>10}", "variant", "params", "with head", "input", "GFLOPs");
    for v in variants {
        let base = ModelConfig::new(v, cfg.model.num_classes);
        let mc = ModelConfig {
            width_multiplier: cfg.model.width_multiplier,
            dbam_depth: cfg.model.dbam_depth,
            leaky_slope: cfg.model.leaky_slope,
            mask_mode: cfg.model.mask_mode,
            ..if all || v != cfg.model.variant { base } else { cfg.model.clone() }
        };
        let model = build_model(&mc, cfg.seed)?;
        let size = cfg.profile.input_size.unwrap_or(mc.input_size);
        let images = if cfg.profile.density_images > 0 {
            let synth = SynthConfig {
                num_ids: cfg.profile.density_images.max(2),
                samples_per_id: 1,
                image_size: size,
                seed: cfg.seed,
                ..Default::default()
            };
            let ds = synth_dataset(&synth)?;
            let recs: Vec<usize> = (0..cfg.profile.density_images).collect();
            Some(ds.load_batch(&recs, size, &cfg.preprocess, None, 0)?)
        } else {
            None
        };
        let report = profile(&model, size, images.as_ref().map(|i| (i, cfg.profile.density_threshold)))?;
        emit_model_card(&report, &cfg.out_dir.join(v.name()))?;
        println!(
            "{:<9} {:>12} {:>12} {:>6} {:>10.3}",
            v.name(),
            report.params.feature,
            report.params.total,
            size,
            report.gflops()
        );
    }
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let mut sc = cfg.synth.clone();
    sc.seed = cfg.seed;
    let ds = synth_dataset(&sc)?;
    persist(cfg)?;
    let manifest = write_dataset(&ds, &cfg.out_dir)?;
    let counts = ds.index().split_counts();
    println!(
        "{} images, {} identities -> {} (train {}, query {}, gallery {})",
        ds.index().len(),
        sc.num_ids,
        manifest.display(),
        counts.get(&Split::Train).unwrap_or(&0),
        counts.get(&Split::Query).unwrap_or(&0),
        counts.get(&Split::Gallery).unwrap_or(&0)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, cmd) = match &cli.command {
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Profile(c) => (c, "profile"),
        Command::ExportEmbeddings(c) => (c, "export-embeddings"),
        Command::SynthData(c) => (c, "synth-data"),
    };
    let all = matches!(common.variant, Some(VariantArg::All));
    if all && cmd != "profile" {
        return Err(ConfigError::new("model.variant", "`all` is only valid for `profile`").into());
    }
    let cfg = common.resolve()?;
    match cmd {
        "train" => train(&cfg),
        "eval" => eval(&cfg),
        "profile" => profile_cmd(&cfg, all),
        "export-embeddings" => export(&cfg),
        _ => synth(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<safr::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        2
    } else {
        1
    }
}

fn parse_failure(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            ExitCode::from(2)
        }
        _ => {
            let text = e.render().to_string();
            let line: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            eprintln!("{}", line.join(" "));
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return parse_failure(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
