//! Command-line front end. [`run`] maps errors to exit codes: 0 on success,
//! 1 for usage errors, 2 for data or contract errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::experiment::{load_splits, pretrain, run_experiment, Pretrained, PretrainLog, Splits, Variant};
use super::metrics::{evaluate, long_format, write_csv, write_metrics, EvalReport, MetricsRow};
use crate::corpus::synthesize;
use crate::grounder::{self, write_predictions, Grounder, TransplantMode};
use crate::numerics::{ParamStore, SeedStream};
use crate::vgcl::Pacing;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vgground", version, about = "Spoken video grounding with CPC and video-guided curriculum pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding train.vgcd / val.vgcd / test.vgcd.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the first audio stage with CPC or VGCL.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["cpc", "vgcl"])]
        mode: String,
        #[arg(long)]
        pacing: Option<Pacing>,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_curriculum: bool,
        #[arg(long)]
        no_entire_video: bool,
        #[arg(long)]
        no_self_attention: bool,
    },
    /// Train the grounder, optionally from a pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained grounder on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Run variants over several seeds and collect their metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values = ["baseline", "cpc", "vgcl", "vgcl-no-cl"])]
        variants: Vec<Variant>,
    },
    /// Merge evaluation reports into a metrics table and a long-format table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() || matches!(e, Error::Invalid(_)) { 2 } else { 1 })
        }
    }
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.data {
        cfg.corpus.train = Some(dir.join("train.vgcd"));
        let val = dir.join("val.vgcd");
        cfg.corpus.val = val.exists().then_some(val);
        cfg.corpus.test = Some(dir.join("test.vgcd"));
    }
    Ok(cfg)
}

fn prepare(common: &Common, cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)?;
    cfg.save(common.out.join("config.json"))?;
    load_splits(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => {
            let cfg = effective_config(&common)?;
            cfg.validate()?;
            let splits = synthesize(&cfg.synth, super::experiment::corpus_seed(cfg.seed))?;
            std::fs::create_dir_all(&common.out)?;
            cfg.save(common.out.join("config.json"))?;
            splits.train.save(common.out.join("train.vgcd"))?;
            splits.val.save(common.out.join("val.vgcd"))?;
            splits.test.save(common.out.join("test.vgcd"))?;
            Ok(())
        }
        Command::Pretrain { common, mode, pacing, kappa, steps, no_curriculum, no_entire_video, no_self_attention } => {
            let mut cfg = effective_config(&common)?;
            if let Some(p) = pacing {
                cfg.vgcl.curriculum.pacing = p;
            }
            if let Some(k) = kappa {
                cfg.vgcl.curriculum.kappa = k;
            }
            if let Some(s) = steps {
                cfg.cpc.steps = s;
                cfg.vgcl.curriculum.total_steps = s;
            }
            cfg.vgcl.flags.no_curriculum |= no_curriculum;
            cfg.vgcl.flags.no_entire_video |= no_entire_video;
            cfg.vgcl.flags.no_self_attention |= no_self_attention;
            let splits = prepare(&common, &cfg)?;
            let variant = if mode == "cpc" { Variant::Cpc } else { Variant::Vgcl };
            let p = pretrain(&cfg, variant, &splits.train)?.expect("pretraining variant");
            write_pretrained(&p, &common.out)
        }
        Command::Train { common, init, epochs } => {
            let mut cfg = effective_config(&common)?;
            if let Some(e) = epochs {
                cfg.grounding.epochs = e;
            }
            let splits = prepare(&common, &cfg)?;
            let (model, mut store) = build(&cfg, &splits, init.as_deref())?;
            let log = grounder::train(&model, &mut store, &splits.train, &cfg.grounding, SeedStream::new(cfg.seed).child("grounding"))?;
            store.save(common.out.join("grounder.ckpt"))?;
            write_csv(common.out.join("train_log.csv"), &log)
        }
        Command::Eval { common, checkpoint, label } => {
            let cfg = effective_config(&common)?;
            let splits = prepare(&common, &cfg)?;
            let mut store = ParamStore::new();
            let model = Grounder::new(&mut store, splits.test.n_mel, splits.test.d_v, &cfg.grounding, &mut SeedStream::new(0).rng("shape"))?;
            let trained = ParamStore::load(&checkpoint).map_err(|e| e.context(checkpoint.display().to_string()))?;
            copy_params(&mut store, &trained)?;
            let (report, preds) = evaluate(&model, &store, &splits.test, &cfg.eval.iou_thresholds, &label, cfg.seed)?;
            write_predictions(common.out.join("predictions.csv"), &preds)?;
            report.save_json(common.out.join("report.json"))?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
        Command::Ablate { common, seeds, variants } => {
            let base = effective_config(&common)?;
            base.validate()?;
            std::fs::create_dir_all(&common.out)?;
            let mut rows = Vec::new();
            for &seed in &seeds {
                let cfg = RunConfig { seed, ..base.clone() };
                let splits = load_splits(&cfg)?;
                for &v in &variants {
                    let out = run_experiment(&cfg, v, &splits)?;
                    out.write(&cfg, common.out.join(format!("{v}-seed{seed}")))?;
                    rows.push(MetricsRow::from_report(&out.report)?);
                }
            }
            write_tables(&rows, &common.out)
        }
        Command::Report { reports, out } => {
            let rows = reports
                .iter()
                .map(|p| EvalReport::load_json(p).and_then(|r| MetricsRow::from_report(&r)).map_err(|e| e.context(p.display().to_string())))
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&out)?;
            write_tables(&rows, &out)
        }
    }
}

fn write_pretrained(p: &Pretrained, out: &Path) -> Result<()> {
    p.store.save(out.join(format!("{}.ckpt", p.mode)))?;
    match &p.log {
        PretrainLog::Cpc(records) => write_csv(out.join("cpc_log.csv"), records),
        PretrainLog::Vgcl(log) => {
            log.write_csv(out.join("curriculum.csv"))?;
            log.write_stages_csv(out.join("stages.csv"))
        }
    }
}

fn build(cfg: &RunConfig, splits: &Splits, init: Option<&Path>) -> Result<(Grounder, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = SeedStream::new(cfg.seed).child("grounder").rng("init");
    let model = Grounder::new(&mut store, splits.train.n_mel, splits.train.d_v, &cfg.grounding, &mut rng)?;
    if let Some(path) = init {
        let ckpt = ParamStore::load(path).map_err(|e| e.context(path.display().to_string()))?;
        let mode = if ckpt.iter().any(|p| p.name.starts_with("vgcl.")) { TransplantMode::Vgcl } else { TransplantMode::Cpc };
        grounder::transplant(&model, &mut store, &ckpt, mode)?;
    }
    Ok((model, store))
}

fn copy_params(store: &mut ParamStore, trained: &ParamStore) -> Result<()> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let value = trained.get(&name).ok_or_else(|| Error::Corrupt(format!("checkpoint lacks parameter {name}")))?;
        store.set(&name, value.clone())?;
    }
    Ok(())
}

fn write_tables(rows: &[MetricsRow], out: &Path) -> Result<()> {
    write_metrics(out.join("metrics.csv"), rows)?;
    write_csv(out.join("metrics_long.csv"), &long_format(rows))
}
