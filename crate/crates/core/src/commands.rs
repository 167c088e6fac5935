//! The four operator commands, shared by the binary and the Python module.
//! Every output file starts with a [`Header`] naming the config hash and the
//! dataset digest.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, LoadedConfig};
use crate::embedder::Model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::inference::{
    assemble_protocol, detect_scenes, ProtocolMode, ProtocolSpec, SceneDetections,
};
use crate::prototype::PrototypeBank;
use crate::sim::{generate_world, Dataset, Scene, SupportSet};
use crate::trainer::{train as run_training, training_support, StepRecord};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub dataset_digest: String,
}

impl Header {
    pub fn new(kind: &str, config_hash: &str, dataset_digest: &str) -> Self {
        Header {
            tool: "protodetect".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: kind.into(),
            config_hash: config_hash.into(),
            dataset_digest: dataset_digest.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub header: Header,
    pub dataset: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub final_step: Option<StepRecord>,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: Header,
    pub model: Model,
    pub bank: PrototypeBank,
    pub metrics: TrainMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankFile {
    pub header: Header,
    pub bank: PrototypeBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub header: Header,
    pub protocol: String,
    pub scenes: Vec<SceneDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub header: Header,
    pub report: EvalReport,
}

/// Content hash of a dataset's canonical JSON.
pub fn dataset_digest(ds: &Dataset) -> Result<String> {
    Ok(sha256_hex(ds.to_json()?.as_bytes()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub path: PathBuf,
    pub digest: String,
    pub scenes: usize,
}

pub fn gen_data(ctx: &LoadedConfig) -> Result<GenDataSummary> {
    let ds = generate_world(&ctx.config.world)?;
    let digest = dataset_digest(&ds)?;
    let path = ctx.resolve(&ctx.config.paths.dataset);
    let file = DatasetFile {
        header: Header::new("dataset", &ctx.hash, &digest),
        dataset: ds,
    };
    write_file(&path, &serde_json::to_string(&file)?)?;
    Ok(GenDataSummary {
        path,
        digest,
        scenes: file.dataset.scenes.len(),
    })
}

/// Loads the configured dataset, verifying its embedded digest and the
/// config's expected digest when one is set.
pub fn load_dataset(ctx: &LoadedConfig) -> Result<(Dataset, String)> {
    let path = ctx.resolve(&ctx.config.paths.dataset);
    let file: DatasetFile = read_json(&path)?;
    let ds = Dataset::from_json(&serde_json::to_string(&file.dataset)?)?;
    let digest = dataset_digest(&ds)?;
    if digest != file.header.dataset_digest {
        return Err(Error::input(format!(
            "{}: content digest {digest} does not match header {}",
            path.display(),
            file.header.dataset_digest
        )));
    }
    if let Some(want) = &ctx.config.paths.expected_dataset_digest {
        if *want != digest {
            return Err(Error::input(format!(
                "dataset digest {digest} differs from expected {want}"
            )));
        }
    }
    Ok((ds, digest))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: TrainMetrics,
}

pub fn train(ctx: &LoadedConfig) -> Result<TrainSummary> {
    let cfg = &ctx.config;
    let (ds, digest) = load_dataset(ctx)?;
    let out = run_training(&ds, &cfg.model, &cfg.train, &cfg.loss)?;

    let header = |kind: &str| Header::new(kind, &ctx.hash, &digest);
    let mut log = serde_json::to_string(&serde_json::json!({ "header": header("log") }))?;
    log.push('\n');
    for r in &out.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    let metrics = TrainMetrics {
        steps: out.log.len(),
        final_step: out.log.last().cloned(),
        heldout_accuracy: out.heldout_accuracy,
    };
    let ckpt = Checkpoint {
        header: header("checkpoint"),
        model: out.model,
        bank: out.bank.clone(),
        metrics: metrics.clone(),
    };
    let bank = BankFile {
        header: header("bank"),
        bank: out.bank,
    };
    let paths = &cfg.paths;
    let (ckpt_path, bank_path, log_path) = (
        ctx.resolve(&paths.checkpoint),
        ctx.resolve(&paths.bank),
        ctx.resolve(&paths.log),
    );
    write_file(&log_path, &log)?;
    write_file(&ckpt_path, &serde_json::to_string(&ckpt)?)?;
    write_file(&bank_path, &serde_json::to_string_pretty(&bank)?)?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log: log_path,
        metrics,
    })
}

pub fn load_checkpoint(ctx: &LoadedConfig, dataset_digest: &str) -> Result<Checkpoint> {
    let path = ctx.resolve(&ctx.config.paths.checkpoint);
    let ckpt: Checkpoint = read_json(&path)?;
    if ckpt.header.dataset_digest != dataset_digest {
        return Err(Error::input(format!(
            "{} was trained on dataset {}, not {dataset_digest}",
            path.display(),
            ckpt.header.dataset_digest
        )));
    }
    if !ckpt.model.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok(ckpt)
}

fn truncated(mut s: SupportSet, shots: usize) -> SupportSet {
    for v in s.values_mut() {
        v.truncate(shots);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub csv: PathBuf,
    pub json: PathBuf,
    pub detections: PathBuf,
}

/// Runs one protocol end to end with frozen parameters.
pub fn eval(ctx: &LoadedConfig, mode: Option<ProtocolMode>, threads: usize) -> Result<EvalSummary> {
    let cfg = &ctx.config;
    let spec = ProtocolSpec {
        mode: mode.unwrap_or(cfg.protocol.mode),
        ..cfg.protocol.clone()
    };
    let (ds, digest) = load_dataset(ctx)?;
    let ckpt = load_checkpoint(ctx, &digest)?;
    let background = ckpt
        .bank
        .get(ClassId::BACKGROUND)
        .ok_or(Error::NoBackgroundPool)?
        .to_vec();
    let seen = training_support(&ds, cfg.train.shots)?;
    let unseen = truncated(ds.support_for(&ds.config.unseen_ids())?, cfg.train.shots);
    let protocol = assemble_protocol(&spec, &seen, &unseen, &ckpt.model.net, &background)?;

    let scenes: Vec<&Scene> = ds.scenes_in(protocol.split).collect();
    let dets = detect_scenes(&scenes, &ckpt.model.net, &protocol.bank, threads)?;
    let report = evaluate(&dets, &scenes, &protocol)?;

    let name = spec.mode.name();
    let header = |kind: &str| Header::new(kind, &ctx.hash, &digest);
    let det_path = ctx.resolve(&with_suffix(
        &cfg.paths.detections,
        &format!("-{name}.json"),
    ));
    let csv_path = ctx.resolve(&with_suffix(&cfg.paths.report, &format!("-{name}.csv")));
    let json_path = ctx.resolve(&with_suffix(&cfg.paths.report, &format!("-{name}.json")));

    let det_file = DetectionsFile {
        header: header("detections"),
        protocol: name.into(),
        scenes: dets,
    };
    write_file(&det_path, &serde_json::to_string_pretty(&det_file)?)?;
    let csv = format!(
        "# config_hash={}\n# dataset_digest={}\n{}",
        ctx.hash,
        digest,
        report.to_csv()
    );
    write_file(&csv_path, &csv)?;
    let rf = ReportFile {
        header: header("report"),
        report,
    };
    write_file(&json_path, &serde_json::to_string_pretty(&rf)?)?;
    Ok(EvalSummary {
        report: rf.report,
        csv: csv_path,
        json: json_path,
        detections: det_path,
    })
}

/// Runs the finite-difference suite. A failing suite is returned as
/// [`Error::GradCheck`] naming the offending blocks, after `on_report`
/// has seen the table.
pub fn gradcheck(
    ctx: &LoadedConfig,
    on_report: impl FnOnce(&GradcheckReport),
) -> Result<GradcheckReport> {
    let report = run_gradcheck(&ctx.config.gradcheck)?;
    on_report(&report);
    if report.passed() {
        return Ok(report);
    }
    let mut blocks: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{}@depth{}: {}",
                r.loss.name(),
                r.depth,
                r.failing_blocks.join(",")
            )
        })
        .collect();
    blocks.dedup();
    Err(Error::GradCheck(blocks.join("; ")))
}
