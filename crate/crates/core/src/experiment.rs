//! End-to-end runs behind the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::is_backbone_param;
use crate::config::ExperimentConfig;
use crate::data::{
    match_manifest, read_manifest, scan_images, stratified_split, synth_dataset, Dataset, Difficulty, Exclusions,
    ImageTensor, ManifestRecord, ManifestRow, Partition, SplitAssignment, DEFAULT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Architecture;
use crate::params::ParamStore;
use crate::ssm::{complexity_probe, ProbeConfig, ProbeReport};
use crate::train::{
    dataset_scores, history_csv, load_checkpoint, save_checkpoint, sha256_hex, Checkpoint, EpochRecord, Trainer,
};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SPLIT_FILE: &str = "split.tsv";
pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset (PNG images plus `manifest.csv`) to `out`.
pub fn run_synth(n: usize, size: usize, seed: u64, difficulty: Difficulty, out: &Path) -> Result<PathBuf> {
    let ds = synth_dataset(n, size, seed, difficulty)?;
    ds.write(out)
}

fn rows_to_records(rows: &[ManifestRow]) -> Result<Vec<ManifestRecord>> {
    rows.iter()
        .map(|r| {
            Ok(ManifestRecord {
                patient_id: r.patient_id.clone(),
                abnormality_id: r.abnormality_id.clone(),
                image_path: PathBuf::from(&r.image_path),
                pathology: r.pathology.clone(),
                label: crate::data::encode_label(&r.pathology)?,
            })
        })
        .collect()
}

/// Computes a split from a manifest's patient ids and labels and writes it.
pub fn run_split(manifest: &Path, seed: u64, out: &Path) -> Result<SplitAssignment> {
    let records = rows_to_records(&read_manifest(manifest)?)?;
    let split = stratified_split(&records, DEFAULT_FRACTIONS, seed)?;
    split.check_covers(&records)?;
    write(out, split.to_text())?;
    // Re-read what was written and re-check it.
    let back = SplitAssignment::load(out)?;
    if back.map != split.map {
        return Err(Error::Split("split file does not round-trip".into()));
    }
    back.check_covers(&records)?;
    Ok(back)
}

/// Records and their images, split into partitions.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub records: Vec<ManifestRecord>,
    pub split: SplitAssignment,
    /// Exact bytes of the split file; digested into checkpoints.
    pub split_text: String,
    pub exclusions: Exclusions,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    pub fn partition(&self, p: Partition) -> &Dataset {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn split_digest(&self) -> String {
        sha256_hex(self.split_text.as_bytes())
    }
}

/// Loads the configured data source and partitions it. `split_override`
/// takes precedence over the config's split file.
pub fn prepare_data(cfg: &ExperimentConfig, split_override: Option<&Path>) -> Result<PreparedData> {
    let size = cfg.model.image_size;
    let (records, images, exclusions) = if let Some(spec) = &cfg.data.synth {
        let ds = synth_dataset(spec.n, spec.size, spec.seed.unwrap_or(cfg.seed), spec.difficulty)?;
        let images: Vec<ImageTensor> = (0..spec.n).map(|i| ds.image(i)).collect::<Result<_>>()?;
        (ds.records, Some(images), Exclusions::default())
    } else {
        let manifest = cfg.data.manifest.as_ref().expect("validated data source");
        let root = match &cfg.data.images_root {
            Some(r) => r.clone(),
            None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let scan = scan_images(&root)?;
        let matched = match_manifest(&read_manifest(manifest)?, &scan.files, cfg.data.match_key)?;
        log::info!(
            "matched {} records ({} excluded: {:?})",
            matched.records.len(),
            matched.excluded_count(),
            matched.excluded
        );
        (matched.records, None, matched.excluded)
    };

    let split_path = split_override.or(cfg.data.split.as_deref());
    let (split, split_text) = match split_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            (SplitAssignment::parse(&text)?, text)
        }
        None => {
            let s = stratified_split(&records, cfg.data.fractions, cfg.seed)?;
            let text = s.to_text();
            (s, text)
        }
    };
    split.check_covers(&records)?;

    let build = |part: Partition| -> Result<Dataset> {
        let idx: Vec<usize> =
            (0..records.len()).filter(|&i| split.partition_of(&records[i].patient_id) == Some(part)).collect();
        let recs: Vec<ManifestRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        match &images {
            Some(imgs) => Dataset::from_images(recs, idx.iter().map(|&i| imgs[i].clone()).collect(), size),
            None => Dataset::load(&recs, size),
        }
    };
    let (train, val, test) = (build(Partition::Train)?, build(Partition::Val)?, build(Partition::Test)?);
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(PreparedData { records, split, split_text, exclusions, train, val, test })
}

/// Copies every backbone tensor found in a checkpoint over `params`.
fn load_backbone_weights(params: &mut ParamStore<f32>, dir: &Path) -> Result<usize> {
    let src = load_checkpoint(dir)?;
    let mut copied = 0;
    for (name, arr) in src.state.params.iter() {
        if !is_backbone_param(name) || !params.contains(name) {
            continue;
        }
        let dst = params.get_mut(name)?;
        if dst.shape() != arr.shape() {
            return Err(Error::shape(format!(
                "pretrained `{name}` has shape {:?}, model expects {:?}",
                arr.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(arr.data());
        copied += 1;
    }
    log::info!("loaded {copied} backbone tensors from {}", dir.display());
    Ok(copied)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub test: MetricsReport,
}

#[derive(Serialize)]
struct ParamHealth {
    name: String,
    non_finite: usize,
    max_abs: f32,
}

fn nan_dump(trainer: &Trainer, msg: &str) -> String {
    let st = trainer.state();
    let params: Vec<ParamHealth> = st
        .params
        .iter()
        .map(|(name, a)| ParamHealth {
            name: name.to_string(),
            non_finite: a.data().iter().filter(|v| !v.is_finite()).count(),
            max_abs: a.data().iter().filter(|v| v.is_finite()).fold(0.0f32, |m, v| m.max(v.abs())),
        })
        .collect();
    let dump = serde_json::json!({
        "error": msg,
        "epoch": st.epoch + 1,
        "step": st.step + 1,
        "history": st.history,
        "params": params,
    });
    serde_json::to_string_pretty(&dump).expect("dump serialises") + "\n"
}

/// Trains one configuration: writes the resolved config, the split, the
/// per-epoch history and `best/` + `last/` checkpoints, then evaluates the
/// best checkpoint on the test partition.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.canonical_json())?;
    let data = prepare_data(cfg, None)?;
    write(&out.join(SPLIT_FILE), &data.split_text)?;
    let config_value = serde_json::to_value(cfg).expect("config serialises");
    let (config_digest, split_digest) = (cfg.digest(), data.split_digest());

    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.seed, &data.train.labels())?;
    if let Some(dir) = &cfg.model.backbone_weights {
        let mut state = trainer.clone().into_state();
        load_backbone_weights(&mut state.params, dir)?;
        trainer = Trainer::from_state(cfg.model.clone(), cfg.train.clone(), state, &data.train.labels())?;
    }
    let checkpoint = |t: &Trainer| Checkpoint {
        state: t.state().clone(),
        config: config_value.clone(),
        config_digest: config_digest.clone(),
        split_digest: split_digest.clone(),
    };

    let mut saved_best = false;
    while !trainer.is_done() {
        let outcome = match trainer.run_epoch(&data.train, &data.val) {
            Ok(o) => o,
            Err(e @ Error::Numeric(_)) => {
                write(&out.join(NAN_DUMP_FILE), nan_dump(&trainer, &e.to_string()))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let r = &outcome.record;
        log::info!(
            "epoch {} [{}] train_loss {:.4} val_loss {:.4} val_auc {}",
            r.epoch,
            r.phase.name(),
            r.train_loss,
            r.val_loss,
            r.val_auc.map_or("undefined".into(), |a| format!("{a:.4}"))
        );
        write(&out.join(HISTORY_FILE), history_csv(&trainer.state().history))?;
        let ck = checkpoint(&trainer);
        save_checkpoint(&out.join(LAST_DIR), &ck)?;
        if outcome.improved {
            save_checkpoint(&out.join(BEST_DIR), &ck)?;
            saved_best = true;
        }
    }
    if !saved_best {
        save_checkpoint(&out.join(BEST_DIR), &checkpoint(&trainer))?;
    }
    let best = load_checkpoint(&out.join(BEST_DIR))?;
    let scores = dataset_scores(&best.state.params, &cfg.model, &data.test, cfg.eval.batch_size)?;
    let test = evaluate("test", &scores, &data.test.labels(), cfg.eval.threshold)?;
    test.write(out, "test_metrics")?;
    let st = trainer.state();
    Ok(TrainSummary {
        out_dir: out.to_path_buf(),
        history: st.history.clone(),
        best_epoch: st.best_epoch,
        best_val_auc: st.best_val_auc,
        test,
    })
}

/// Evaluates a checkpoint on one partition of the given split. The split
/// file must be the one the checkpoint was trained on.
pub fn run_eval(
    checkpoint: &Path,
    split: &Path,
    partition: Partition,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg: ExperimentConfig =
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    let cfg = cfg.resolved()?;
    let split_bytes = std::fs::read(split).map_err(|e| Error::io(split, e))?;
    ck.verify_digests(&cfg.digest(), &sha256_hex(&split_bytes))?;
    let data = prepare_data(&cfg, Some(split))?;
    let ds = data.partition(partition);
    let scores = dataset_scores(&ck.state.params, &cfg.model, ds, cfg.eval.batch_size)?;
    let report = evaluate(partition.name(), &scores, &ds.labels(), threshold.unwrap_or(cfg.eval.threshold))?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    report.write(&dir, &format!("eval_{}", partition.name()))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub split_digest: String,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub test: MetricsReport,
}

pub const ABLATION_VARIANTS: [Architecture; 3] =
    [Architecture::BackboneOnly, Architecture::VimOnly, Architecture::Hybrid];

/// Trains and tests the three variants on the same split and seed.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for arch in ABLATION_VARIANTS {
        let mut variant = cfg.clone();
        variant.model.architecture = arch;
        let variant = variant.resolved()?;
        let dir = out.join(arch.name());
        let summary = run_train(&variant, &dir)?;
        let split_text = std::fs::read(dir.join(SPLIT_FILE)).map_err(|e| Error::io(dir.join(SPLIT_FILE), e))?;
        summary.test.write(out, arch.name())?;
        rows.push(AblationRow {
            variant: arch.name().to_string(),
            split_digest: sha256_hex(&split_text),
            best_epoch: summary.best_epoch,
            best_val_auc: summary.best_val_auc,
            test: summary.test,
        });
    }
    if rows.windows(2).any(|w| w[0].split_digest != w[1].split_digest) {
        return Err(Error::Split("ablation variants ended up on different splits".into()));
    }
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&rows).expect("rows serialise") + "\n")?;
    Ok(rows)
}

/// Runs the scan/attention timing probe and writes its CSV.
pub fn run_bench_scan(cfg: &ProbeConfig, lengths: &[usize], out: &Path) -> Result<ProbeReport> {
    let report = complexity_probe(cfg, lengths)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).expect("writing to memory");
    write(out, buf)?;
    Ok(report)
}
