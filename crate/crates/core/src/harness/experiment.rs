use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{evaluate, write_csv, EvalReport};
use crate::corpus::{load, synthesize, CorpusFile};
use crate::cpc::{self, CpcModel, TrainRecord};
use crate::grounder::{self, transplant, write_predictions, EpochRecord, Grounder, Prediction, TransplantMode};
use crate::numerics::{ParamStore, SeedStream};
use crate::vgcl::{self, CurriculumLog, VariantFlags, VgclModel};
use crate::{Error, Result};

/// Pretraining pipeline feeding the grounder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Cpc,
    Vgcl,
    VgclNoCurriculum,
    VgclNoEntireVideo,
    VgclNoSelfAttention,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::Cpc, Variant::Vgcl, Variant::VgclNoCurriculum, Variant::VgclNoEntireVideo, Variant::VgclNoSelfAttention];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cpc => "cpc",
            Variant::Vgcl => "vgcl",
            Variant::VgclNoCurriculum => "vgcl-no-cl",
            Variant::VgclNoEntireVideo => "vgcl-no-entire-video",
            Variant::VgclNoSelfAttention => "vgcl-no-self-attention",
        }
    }

    /// Ablation switches layered on top of the configured ones.
    pub fn flags(self, base: VariantFlags) -> VariantFlags {
        let mut f = base;
        match self {
            Variant::VgclNoCurriculum => f.no_curriculum = true,
            Variant::VgclNoEntireVideo => f.no_entire_video = true,
            Variant::VgclNoSelfAttention => f.no_self_attention = true,
            _ => {}
        }
        f
    }

    pub fn pretraining(self) -> Option<TransplantMode> {
        match self {
            Variant::Baseline => None,
            Variant::Cpc => Some(TransplantMode::Cpc),
            _ => Some(TransplantMode::Vgcl),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.label() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
            Error::Config(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Train/val/test splits used by one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: CorpusFile,
    pub val: Option<CorpusFile>,
    pub test: CorpusFile,
}

/// Loads the configured corpus files, or synthesizes one from the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match (&cfg.corpus.train, &cfg.corpus.test) {
        (Some(train), Some(test)) => Ok(Splits {
            train: load(train)?,
            val: cfg.corpus.val.as_ref().map(load).transpose()?,
            test: load(test)?,
        }),
        (None, None) => {
            let s = synthesize(&cfg.synth, corpus_seed(cfg.seed))?;
            Ok(Splits { train: s.train, val: Some(s.val), test: s.test })
        }
        _ => Err(Error::Config("corpus.train and corpus.test must be given together".into())),
    }
}

pub(crate) fn corpus_seed(seed: u64) -> u64 {
    SeedStream::new(seed).child("corpus").key()
}

/// Logs of whichever pretraining ran.
#[derive(Clone, Debug, PartialEq)]
pub enum PretrainLog {
    Cpc(Vec<TrainRecord>),
    Vgcl(CurriculumLog),
}

/// Result of a pretraining run: the checkpoint and its log.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub mode: TransplantMode,
    pub store: ParamStore,
    pub log: PretrainLog,
}

/// Runs CPC or VGCL pretraining on the training split.
pub fn pretrain(cfg: &RunConfig, variant: Variant, train: &CorpusFile) -> Result<Option<Pretrained>> {
    let Some(mode) = variant.pretraining() else {
        return Ok(None);
    };
    let seeds = SeedStream::new(cfg.seed).child("pretrain").child(variant.label());
    let mut store = ParamStore::new();
    let mut init = seeds.rng("init");
    let log = match mode {
        TransplantMode::Cpc => {
            let m = CpcModel::new(&mut store, train.n_mel, &cfg.cpc.model, &mut init)?;
            PretrainLog::Cpc(cpc::pretrain(&m, &mut store, train, cfg.cpc.steps, &cfg.cpc.model, seeds.child("train"))?)
        }
        TransplantMode::Vgcl => {
            let m = VgclModel::new(&mut store, train.n_mel, train.d_v, &cfg.cpc.model, &mut init)?;
            let flags = variant.flags(cfg.vgcl.flags);
            PretrainLog::Vgcl(vgcl::pretrain_curriculum(&m, &mut store, train, &cfg.vgcl.curriculum, flags, &cfg.cpc.model, seeds.child("train"))?)
        }
    };
    Ok(Some(Pretrained { mode, store, log }))
}

/// Builds the grounder with the run's shared initialization and optionally
/// transplants pretrained weights.
pub fn build_grounder(cfg: &RunConfig, data: &CorpusFile, pretrained: Option<&Pretrained>) -> Result<(Grounder, ParamStore)> {
    let mut store = ParamStore::new();
    let mut init = SeedStream::new(cfg.seed).child("grounder").rng("init");
    let model = Grounder::new(&mut store, data.n_mel, data.d_v, &cfg.grounding, &mut init)?;
    if let Some(p) = pretrained {
        transplant(&model, &mut store, &p.store, p.mode)?;
    }
    Ok((model, store))
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub variant: Variant,
    pub report: EvalReport,
    pub pretrained: Option<Pretrained>,
    pub grounder: ParamStore,
    pub train_log: Vec<EpochRecord>,
    pub predictions: Vec<Prediction>,
}

/// Pretrains (if the variant asks for it), transplants, trains the grounder
/// and evaluates on the test split. All randomness derives from
/// `cfg.seed`; the grounder's initialization and batch order are shared
/// across variants so runs with one seed are paired.
pub fn run_experiment(cfg: &RunConfig, variant: Variant, splits: &Splits) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let pretrained = pretrain(cfg, variant, &splits.train).map_err(|e| e.context(format!("{variant}: pretraining")))?;
    let (model, mut store) = build_grounder(cfg, &splits.train, pretrained.as_ref()).map_err(|e| e.context(format!("{variant}: transplant")))?;
    let seeds = SeedStream::new(cfg.seed).child("grounding");
    let train_log = grounder::train(&model, &mut store, &splits.train, &cfg.grounding, seeds).map_err(|e| e.context(format!("{variant}: grounding")))?;
    let (report, predictions) =
        evaluate(&model, &store, &splits.test, &cfg.eval.iou_thresholds, variant.label(), cfg.seed).map_err(|e| e.context(format!("{variant}: evaluation")))?;
    log::info!("{variant} seed {}: mIoU {:.2}", cfg.seed, report.mean_iou);
    Ok(ExperimentOutput { variant, report, pretrained, grounder: store, train_log, predictions })
}

impl ExperimentOutput {
    /// Writes config, checkpoints, logs, predictions and the report into `dir`.
    pub fn write(&self, cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        cfg.save(dir.join("config.json"))?;
        if let Some(p) = &self.pretrained {
            p.store.save(dir.join(format!("{}.ckpt", p.mode)))?;
            match &p.log {
                PretrainLog::Cpc(records) => write_csv(dir.join("cpc_log.csv"), records)?,
                PretrainLog::Vgcl(log) => {
                    log.write_csv(dir.join("curriculum.csv"))?;
                    log.write_stages_csv(dir.join("stages.csv"))?;
                }
            }
        }
        self.grounder.save(dir.join("grounder.ckpt"))?;
        write_csv(dir.join("train_log.csv"), &self.train_log)?;
        write_predictions(dir.join("predictions.csv"), &self.predictions)?;
        self.report.save_json(dir.join("report.json"))?;
        Ok(())
    }
}
