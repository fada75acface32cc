//! Staged, cached experiment runs.
//!
//! Every stage writes into `<output_dir>/<stage>/` and records a
//! `manifest.json` holding its seed, its configuration, the content hashes of
//! the upstream stages it read and the hashes of the files it wrote. A stage
//! whose manifest key and file hashes still match is reused as is.
//! Downstream stages always read upstream artifacts back from disk, so cached
//! and fresh runs see the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use reidpatch::attack::{build_generating_set, optimize_pattern, GenEntry, GeneratingSet, Provenance};
use reidpatch::dataset::{quad_sidecar, read_quad_sidecar, save_split, Dataset};
use reidpatch::evalbench::{run_attack_evaluation, MetricsTable, Scenario};
use reidpatch::imagecore::{Image, Mask, Pattern};
use reidpatch::physicsim::generate_toy_dataset;
use reidpatch::reid::{train_model, ReIDModel};
use reidpatch::rng::seeded;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, ExperimentConfig, FolderSource};
use crate::error::{CliError, CliResult, Stage};
use crate::ingest::ingest_dataset;

pub const MANIFEST: &str = "manifest.json";
const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub code_version: String,
    pub global_seed: u64,
    pub seed: u64,
    pub config: Value,
    /// Content hashes of the upstream stages (or source files) this stage read.
    pub inputs: BTreeMap<String, String>,
    /// Hash of everything above; decides cache validity.
    pub key: String,
    /// Relative path to SHA-256 of each file written.
    pub outputs: BTreeMap<String, String>,
    /// Hash over `outputs`; what downstream stages record as their input.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub content_hash: String,
    pub cached: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub table: Option<MetricsTable>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(stage: Stage, path: &Path, e: std::io::Error) -> CliError {
    CliError::Stage {
        stage,
        source: reidpatch::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except the stage manifest, keyed by
/// `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    let mut out = BTreeMap::new();
    for rel in files {
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if key == MANIFEST {
            continue;
        }
        out.insert(key, sha256_hex(&fs::read(dir.join(&rel))?));
    }
    Ok(out)
}

fn outputs_hash(outputs: &BTreeMap<String, String>) -> String {
    sha256_hex(serde_json::to_string(outputs).expect("string map serialises").as_bytes())
}

pub fn read_manifest(stage_dir: &Path) -> Option<Manifest> {
    serde_json::from_str(&fs::read_to_string(stage_dir.join(MANIFEST)).ok()?).ok()
}

struct StageSpec {
    stage: Stage,
    seed: u64,
    config: Value,
    inputs: BTreeMap<String, String>,
}

impl StageSpec {
    fn key(&self, global_seed: u64) -> String {
        let v = json!({
            "stage": self.stage.name(),
            "code_version": CODE_VERSION,
            "global_seed": global_seed,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
        });
        sha256_hex(v.to_string().as_bytes())
    }
}

/// Runs `cfg` up to and including `last`.
pub fn run_experiment(cfg: &ExperimentConfig, last: Stage) -> CliResult<RunSummary> {
    cfg.validate()?;
    let mut p = Pipeline::new(cfg)?;
    p.run_until(last)?;
    Ok(RunSummary {
        output_dir: p.out.clone(),
        stages: p.records,
        table: p.table,
    })
}

struct Pipeline<'a> {
    cfg: ExperimentConfig,
    raw: &'a ExperimentConfig,
    out: PathBuf,
    records: Vec<StageRecord>,
    hashes: BTreeMap<Stage, String>,
    dataset: Option<Dataset>,
    model: Option<ReIDModel>,
    table: Option<MetricsTable>,
}

impl<'a> Pipeline<'a> {
    fn new(raw: &'a ExperimentConfig) -> CliResult<Self> {
        let out = raw.output_dir.clone();
        fs::create_dir_all(&out)
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", out.display())))?;
        fs::write(out.join("config.toml"), raw.to_toml_string())
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", out.display())))?;
        Ok(Self {
            cfg: raw.resolved(),
            raw,
            out,
            records: Vec::new(),
            hashes: BTreeMap::new(),
            dataset: None,
            model: None,
            table: None,
        })
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    fn run_until(&mut self, last: Stage) -> CliResult<()> {
        for stage in Stage::ALL {
            if stage > last {
                break;
            }
            match stage {
                Stage::Dataset => self.dataset_stage()?,
                Stage::Model => self.model_stage()?,
                Stage::Genset => self.genset_stage()?,
                Stage::Attack => self.attack_stage()?,
                Stage::Evaluate => self.evaluate_stage()?,
                Stage::Report => self.report_stage()?,
            }
        }
        Ok(())
    }

    fn inputs(&self, upstream: &[Stage]) -> BTreeMap<String, String> {
        upstream.iter().map(|s| (s.name().to_string(), self.hashes[s].clone())).collect()
    }

    /// Reuses the stage when its manifest matches, otherwise clears the
    /// previous outputs, runs `produce` and writes a fresh manifest.
    fn execute(&self, spec: StageSpec, produce: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<(Stage, String, bool)> {
        let stage = spec.stage;
        let dir = self.dir(stage);
        let key = spec.key(self.raw.seed);
        if let Some(m) = read_manifest(&dir) {
            if m.key == key && hash_tree(&dir).ok().as_ref() == Some(&m.outputs) {
                info!("{stage}: cached ({})", &m.content_hash[..12]);
                return Ok((stage, m.content_hash, true));
            }
            for rel in m.outputs.keys() {
                let _ = fs::remove_file(dir.join(rel));
            }
            let _ = fs::remove_file(dir.join(MANIFEST));
        } else if dir.is_dir() && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
            return Err(CliError::Config(format!(
                "{} exists without a stage manifest; refusing to overwrite it",
                dir.display()
            )));
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(stage, &dir, e))?;
        info!("{stage}: running");
        produce(&dir)?;
        let outputs = hash_tree(&dir).map_err(|e| io_err(stage, &dir, e))?;
        let content_hash = outputs_hash(&outputs);
        let manifest = Manifest {
            stage: stage.name().into(),
            code_version: CODE_VERSION.into(),
            global_seed: self.raw.seed,
            seed: spec.seed,
            config: spec.config,
            inputs: spec.inputs,
            key,
            outputs,
            content_hash: content_hash.clone(),
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises"))
            .map_err(|e| io_err(stage, &path, e))?;
        Ok((stage, content_hash, false))
    }

    fn finish(&mut self, (stage, content_hash, cached): (Stage, String, bool)) {
        self.hashes.insert(stage, content_hash.clone());
        self.records.push(StageRecord { stage, content_hash, cached });
    }

    fn dataset_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Dataset;
        let mut inputs = BTreeMap::new();
        if let DatasetSource::Folder(f) = &self.cfg.dataset {
            let files = hash_tree(&f.path).map_err(|e| CliError::Ingest(format!("{}: {e}", f.path.display())))?;
            inputs.insert("source".to_string(), outputs_hash(&files));
        }
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!(self.cfg.dataset),
            inputs,
        };
        let source = self.cfg.dataset.clone();
        let done = self.execute(spec, |dir| {
            let ds = match &source {
                DatasetSource::Toy(t) => generate_toy_dataset(t).map_err(CliError::in_stage(stage))?,
                DatasetSource::Folder(f) => ingest_dataset(f)?,
            };
            info!("{stage}: {} train and {} test images", ds.train.len(), ds.test.len());
            save_split(&dir.join("train"), &ds.train).map_err(CliError::in_stage(stage))?;
            save_split(&dir.join("test"), &ds.test).map_err(CliError::in_stage(stage))
        })?;
        self.finish(done);
        let (height, width) = self.cfg.dataset.image_size();
        self.dataset = Some(ingest_dataset(&FolderSource {
            path: self.dir(stage),
            height,
            width,
            train_fraction: 0.5,
        })?);
        Ok(())
    }

    fn model_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Model;
        let mut inputs = self.inputs(&[Stage::Dataset]);
        if let Some(ck) = &self.cfg.model.checkpoint {
            let bytes = fs::read(ck).map_err(|e| io_err(stage, ck, e))?;
            inputs.insert("checkpoint".into(), sha256_hex(&bytes));
        }
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!({ "variant": self.cfg.model.variant, "train": self.cfg.model.train, "checkpoint": self.cfg.model.checkpoint.is_some() }),
            inputs,
        };
        let section = self.cfg.model.clone();
        let ds = self.dataset.as_ref().expect("dataset stage ran");
        let size = self.cfg.dataset.image_size();
        let done = self.execute(spec, |dir| {
            let model = match &section.checkpoint {
                Some(ck) => {
                    let m = ReIDModel::load(ck).map_err(CliError::in_stage(stage))?;
                    if m.input_size() != size {
                        return Err(CliError::Config(format!(
                            "checkpoint input {:?} differs from the dataset image size {size:?}",
                            m.input_size()
                        )));
                    }
                    m
                }
                None => train_model(ds, section.variant, &section.train).map_err(CliError::in_stage(stage))?,
            };
            if let Some(r) = model.meta().held_out_rank1 {
                info!("{stage}: held-out cross-camera rank-1 {r:.3}");
            }
            model.save(&dir.join("model.ckpt")).map_err(CliError::in_stage(stage))
        })?;
        self.finish(done);
        self.model = Some(ReIDModel::load(&self.dir(stage).join("model.ckpt")).map_err(CliError::in_stage(stage))?);
        Ok(())
    }

    fn genset_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Genset;
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!({ "identity": self.cfg.adversary.identity, "augment": self.cfg.attack.augment }),
            inputs: self.inputs(&[Stage::Dataset]),
        };
        let identity = self.cfg.adversary.identity;
        let augment = self.cfg.attack.augment.clone();
        let seed = spec.seed;
        let ds = self.dataset.as_ref().expect("dataset stage ran");
        let done = self.execute(spec, |dir| {
            let raw: Vec<_> = ds.train.iter().filter(|li| li.identity == identity).cloned().collect();
            if raw.is_empty() {
                return Err(CliError::Config(format!("adversary identity {identity} has no training images")));
            }
            let gs = build_generating_set(&raw, &augment, &mut seeded(seed)).map_err(CliError::in_stage(stage))?;
            info!("{stage}: {} entries over {} cameras", gs.len(), gs.camera_count());
            save_genset(dir, &gs).map_err(CliError::in_stage(stage))
        })?;
        self.finish(done);
        Ok(())
    }

    fn attack_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Attack;
        let gs = load_genset(&self.dir(Stage::Genset)).map_err(CliError::in_stage(stage))?;
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!({ "attack": self.cfg.attack, "target": self.cfg.active_target() }),
            inputs: self.inputs(&[Stage::Dataset, Stage::Model, Stage::Genset]),
        };
        let attack = self.cfg.attack.clone();
        let target = self.cfg.active_target();
        let ds = self.dataset.as_ref().expect("dataset stage ran");
        let model = self.model.as_ref().expect("model stage ran");
        let done = self.execute(spec, |dir| {
            let targets: Vec<Image> = match target {
                Some(t) => ds.train.iter().filter(|li| li.identity == t).map(|li| li.image.clone()).collect(),
                None => Vec::new(),
            };
            if let (Some(t), true) = (target, targets.is_empty()) {
                return Err(CliError::Config(format!("target identity {t} has no training images")));
            }
            let mask = attack.mask().map_err(CliError::in_stage(stage))?;
            let (pattern, trace) =
                optimize_pattern(&gs, model, &attack, &mask, &targets).map_err(CliError::in_stage(stage))?;
            pattern.save(&dir.join("pattern.png")).map_err(CliError::in_stage(stage))?;
            mask.save(&dir.join("mask.png")).map_err(CliError::in_stage(stage))?;
            trace.save_csv(&dir.join("trace.csv")).map_err(CliError::in_stage(stage))?;
            let summary = json!({
                "iterations": trace.rows.len(),
                "smoothed_loss_first_50": trace.smoothed_loss(trace.rows.len().min(50), 50),
                "smoothed_loss_last_50": trace.smoothed_loss(trace.rows.len(), 50),
                "targets": targets.len(),
            });
            let path = dir.join("summary.json");
            fs::write(&path, serde_json::to_string_pretty(&summary).expect("json")).map_err(|e| io_err(stage, &path, e))
        })?;
        self.finish(done);
        Ok(())
    }

    fn evaluate_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Evaluate;
        let attack_dir = self.dir(Stage::Attack);
        let pattern = Pattern::load(&attack_dir.join("pattern.png")).map_err(CliError::in_stage(stage))?;
        let mask = Mask::load(&attack_dir.join("mask.png")).map_err(CliError::in_stage(stage))?;
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!({
                "evaluation": self.cfg.evaluation,
                "identity": self.cfg.adversary.identity,
                "target": self.cfg.active_target(),
            }),
            inputs: self.inputs(&[Stage::Dataset, Stage::Model, Stage::Attack]),
        };
        let identity = self.cfg.adversary.identity;
        let target = self.cfg.active_target();
        let eval = self.cfg.evaluation.clone();
        let ds = self.dataset.as_ref().expect("dataset stage ran");
        let model = self.model.as_ref().expect("model stage ran");
        let done = self.execute(spec, |dir| {
            let adversary: Vec<_> = ds.test.iter().filter(|li| li.identity == identity).cloned().collect();
            let scenario = Scenario {
                adversary: &adversary,
                distractors: &ds.test,
                target,
                pattern: &pattern,
                mask: &mask,
            };
            let table = run_attack_evaluation(model, &scenario, &eval).map_err(CliError::in_stage(stage))?;
            table
                .save(&dir.join("metrics.txt"), &dir.join("metrics.csv"))
                .map_err(CliError::in_stage(stage))?;
            let path = dir.join("metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&table).expect("json")).map_err(|e| io_err(stage, &path, e))
        })?;
        self.finish(done);
        let path = self.dir(stage).join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(stage, &path, e))?;
        self.table = Some(serde_json::from_str(&text).map_err(|e| CliError::Stage {
            stage,
            source: reidpatch::Error::Format { path, reason: e.to_string() },
        })?);
        Ok(())
    }

    fn report_stage(&mut self) -> CliResult<()> {
        let stage = Stage::Report;
        let spec = StageSpec {
            stage,
            seed: self.cfg.stage_seed(stage),
            config: json!({ "mode": self.cfg.attack.mode }),
            inputs: self.inputs(&[Stage::Dataset, Stage::Model, Stage::Genset, Stage::Attack, Stage::Evaluate]),
        };
        let out = self.out.clone();
        let model = self.model.as_ref().expect("model stage ran");
        let held_out = model.meta().held_out_rank1;
        let table = self.table.clone().expect("evaluate stage ran");
        let hashes: BTreeMap<String, String> = self.hashes.iter().map(|(s, h)| (s.name().to_string(), h.clone())).collect();
        let raw = self.raw.clone();
        let done = self.execute(spec, |dir| {
            let copy = |from: &str, to: &str| -> CliResult<()> {
                let src = out.join(from);
                fs::copy(&src, dir.join(to)).map(|_| ()).map_err(|e| io_err(stage, &src, e))
            };
            copy("attack/pattern.png", "pattern.png")?;
            copy("attack/pattern.json", "pattern.json")?;
            copy("attack/mask.png", "mask.png")?;
            copy("attack/trace.csv", "trace.csv")?;
            copy("evaluate/metrics.txt", "metrics.txt")?;
            copy("evaluate/metrics.csv", "metrics.csv")?;
            let summary = json!({
                "mode": raw.attack.mode,
                "adversary": raw.adversary.identity,
                "target": raw.active_target(),
                "global_seed": raw.seed,
                "code_version": CODE_VERSION,
                "held_out_rank1": held_out,
                "metrics": table,
                "stage_hashes": hashes,
            });
            let path = dir.join("summary.json");
            fs::write(&path, serde_json::to_string_pretty(&summary).expect("json")).map_err(|e| io_err(stage, &path, e))
        })?;
        self.finish(done);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct GensetIndex {
    identity: u32,
    entries: Vec<GensetRecord>,
}

#[derive(Serialize, Deserialize)]
struct GensetRecord {
    file: String,
    camera: u32,
    position: String,
    provenance: Provenance,
}

/// Writes entries as `NNNN.png` with quad sidecars plus an `entries.json` index.
pub fn save_genset(dir: &Path, gs: &GeneratingSet) -> reidpatch::Result<()> {
    let mut index = GensetIndex { identity: gs.identity(), entries: Vec::new() };
    for (i, e) in gs.entries().iter().enumerate() {
        let file = format!("{i:04}.png");
        let path = dir.join(&file);
        e.image.save_png(&path)?;
        fs::write(quad_sidecar(&path), format!("{}\n", e.quad.to_sidecar_line()))?;
        index.entries.push(GensetRecord {
            file,
            camera: e.camera,
            position: e.position.clone(),
            provenance: e.provenance.clone(),
        });
    }
    fs::write(dir.join("entries.json"), serde_json::to_string_pretty(&index).expect("json"))?;
    Ok(())
}

pub fn load_genset(dir: &Path) -> reidpatch::Result<GeneratingSet> {
    let index_path = dir.join("entries.json");
    let index: GensetIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)
        .map_err(|e| reidpatch::Error::Format { path: index_path.clone(), reason: e.to_string() })?;
    let mut entries = Vec::with_capacity(index.entries.len());
    for r in index.entries {
        let path = dir.join(&r.file);
        let quad = read_quad_sidecar(&quad_sidecar(&path))?
            .ok_or_else(|| reidpatch::Error::Format { path: path.clone(), reason: "missing quad sidecar".into() })?;
        entries.push(GenEntry {
            image: Image::load(&path)?,
            camera: r.camera,
            position: r.position,
            quad,
            provenance: r.provenance,
        });
    }
    GeneratingSet::new(index.identity, entries)
}
