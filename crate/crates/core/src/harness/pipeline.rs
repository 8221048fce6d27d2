//! Cached, resumable experiment pipeline: generate -> split -> shared
//! initialization -> per-paradigm training -> drift/collapse/quadrant ->
//! cohort geometry -> probe suite -> report bundle.
//!
//! Every stage persists its outputs under the run directory together with a
//! key file hashing the stage's configuration closure and the code version;
//! re-running with an unchanged key reloads instead of recomputing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{
    paradigm_spec, train_paradigm, ParadigmName, TrainLog, TrainLogEntry,
};
use crate::diagnostics::{
    cohort_geometry, collapse_track, fit_projection, quadrant_summary, rollout_drift,
    CollapseTrack, DriftCurve, GeometryReport, QuadrantSummary,
};
use crate::encoder::{encode_window, init_encoder, sft_init, EncoderPair};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::predictor::rollout_from_embeddings;
use crate::probes::{probe_suite, ProbeReport, ProbeSuiteInputs};
use crate::synthworld::{
    generate_population, read_split, sample_cohort_panel, split_patients, window_stay,
    write_split, DatasetManifest, DatasetSplit,
};
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::report::{emit_report, ReportFormat};

/// Exclusive run-directory lock, removed on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "run directory {} is locked by another writer (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ),
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub drift: BTreeMap<String, DriftCurve>,
    pub collapse: BTreeMap<String, CollapseTrack>,
    pub final_z_std: BTreeMap<String, f64>,
    pub quadrant: QuadrantSummary,
    pub geometry: BTreeMap<String, GeometryReport>,
    pub probes: ProbeReport,
}

pub struct TrainedModel {
    pub pair: EncoderPair,
    pub predictor: ParamStore<f32>,
    pub log: TrainLog,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    out: PathBuf,
    _lock: LockGuard,
}

fn stage_fresh(dir: &Path, key: &str) -> bool {
    fs::read_to_string(dir.join("stage.key"))
        .map(|k| k.trim() == key)
        .unwrap_or(false)
}

fn commit_stage(dir: &Path, key: &str) -> Result<()> {
    fs::write(dir.join("stage.key"), key)?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Pipeline> {
        cfg.validate()?;
        let lock = LockGuard::acquire(out)?;
        Ok(Pipeline {
            cfg,
            out: out.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn stage_err<T>(stage: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| e.in_stage(stage))
    }

    // -- dataset ----------------------------------------------------------

    pub fn dataset(&self) -> Result<(DatasetSplit, DatasetManifest)> {
        Self::stage_err("dataset", self.dataset_inner())
    }

    fn dataset_inner(&self) -> Result<(DatasetSplit, DatasetManifest)> {
        let dir = self.out.join("dataset");
        let key = self.cfg.stage_key(&["dataset"]);
        if stage_fresh(&dir, &key) {
            return read_split(&dir);
        }
        let (patients, stays) = generate_population(&self.cfg.generator, self.cfg.seed)?;
        let mut windows = Vec::new();
        for s in &stays {
            windows.extend(window_stay(s, self.cfg.dataset.t_max, self.cfg.dataset.stride)?);
        }
        let ids: Vec<u64> = patients.iter().map(|p| p.patient_id).collect();
        let split = split_patients(
            &ids,
            windows,
            self.cfg.dataset.ratios,
            crate::numerics::derive_seed(self.cfg.seed, &["split"]),
        )?;
        write_split(
            &dir,
            &split,
            self.cfg.seed,
            self.cfg.dataset.t_max,
            self.cfg.dataset.stride,
        )?;
        commit_stage(&dir, &key)?;
        read_split(&dir)
    }

    // -- shared initialization --------------------------------------------

    pub fn sft_encoder(&self) -> Result<ParamStore<f32>> {
        Self::stage_err("pretrain-init", self.sft_inner())
    }

    fn sft_inner(&self) -> Result<ParamStore<f32>> {
        let dir = self.out.join("sft");
        let key = self.cfg.stage_key(&["sft"]);
        let base = dir.join("encoder");
        if stage_fresh(&dir, &key) {
            let stores: BTreeMap<String, ParamStore<f32>> = load_checkpoint(&base)?;
            return stores
                .get(crate::encoder::STORE_ONLINE)
                .cloned()
                .ok_or_else(|| Error::CheckpointFormat("sft checkpoint missing encoder".into()));
        }
        let (split, _) = self.dataset()?;
        fs::create_dir_all(&dir)?;
        let enc0 = init_encoder(
            &self.cfg.encoder,
            crate::numerics::derive_seed(self.cfg.seed, &["encoder-init"]),
        )?;
        let trained = sft_init(
            &enc0,
            &self.cfg.encoder,
            &split.train,
            &self.cfg.sft,
            crate::numerics::derive_seed(self.cfg.seed, &["sft"]),
        )?;
        let mut stores = BTreeMap::new();
        stores.insert(crate::encoder::STORE_ONLINE.to_string(), trained.clone());
        save_checkpoint(&stores, &base)?;
        commit_stage(&dir, &key)?;
        Ok(trained)
    }

    // -- per-paradigm training ---------------------------------------------

    fn train_dir(&self, paradigm: ParadigmName) -> PathBuf {
        self.out.join("train").join(paradigm.as_str())
    }

    pub fn train(&self, paradigm: ParadigmName) -> Result<TrainedModel> {
        Self::stage_err(&format!("train:{}", paradigm.as_str()), self.train_inner(paradigm))
    }

    fn train_inner(&self, paradigm: ParadigmName) -> Result<TrainedModel> {
        if !self.cfg.paradigms.contains(&paradigm) {
            return Err(Error::Config(format!(
                "paradigm {} is not in the configured paradigm list",
                paradigm.as_str()
            )));
        }
        let dir = self.train_dir(paradigm);
        let key = self.cfg.stage_key(&["train", paradigm.as_str()]);
        if stage_fresh(&dir, &key) {
            return self.load_trained(paradigm);
        }
        let (split, _) = self.dataset()?;
        let sft = self.sft_encoder()?;
        fs::create_dir_all(&dir)?;
        let spec = paradigm_spec(paradigm, self.cfg.train.total_steps);
        let outcome = train_paradigm(
            &spec,
            &sft,
            &split.train,
            &self.cfg.encoder,
            &self.cfg.predictor,
            &self.cfg.train,
            self.cfg.seed,
        )?;
        let mut stores = BTreeMap::new();
        stores.insert(
            crate::encoder::STORE_ONLINE.to_string(),
            outcome.pair.online.clone(),
        );
        if !outcome.pair.is_shared() {
            stores.insert(
                crate::encoder::STORE_TARGET.to_string(),
                outcome.pair.target().clone(),
            );
        }
        stores.insert(
            crate::predictor::STORE_PREDICTOR.to_string(),
            outcome.predictor.clone(),
        );
        save_checkpoint(&stores, &dir.join("model"))?;
        self.write_train_log(&dir.join("log.jsonl"), paradigm, &outcome.log)?;
        commit_stage(&dir, &key)?;
        Ok(TrainedModel {
            pair: outcome.pair,
            predictor: outcome.predictor,
            log: outcome.log,
        })
    }

    fn write_train_log(&self, path: &Path, paradigm: ParadigmName, log: &TrainLog) -> Result<()> {
        let mut text = String::new();
        text.push_str(
            &serde_json::to_string(&serde_json::json!({
                "meta": {
                    "config_hash": self.cfg.config_hash(),
                    "seed": self.cfg.seed,
                    "paradigm": paradigm.as_str(),
                    "version": crate::VERSION,
                }
            }))
            .expect("meta serializes"),
        );
        text.push('\n');
        for (name, step) in &log.phase_boundaries {
            text.push_str(
                &serde_json::to_string(&serde_json::json!({"phase_start": name, "step": step}))
                    .expect("boundary serializes"),
            );
            text.push('\n');
        }
        for e in &log.entries {
            text.push_str(&serde_json::to_string(e).expect("entry serializes"));
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    fn read_train_log(path: &Path) -> Result<TrainLog> {
        let text = fs::read_to_string(path)?;
        let mut log = TrainLog::default();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("corrupt train log: {e}")))?;
            if v.get("meta").is_some() {
                continue;
            }
            if let Some(name) = v.get("phase_start") {
                let step = v["step"].as_u64().unwrap_or(0);
                log.phase_boundaries
                    .push((name.as_str().unwrap_or("?").to_string(), step));
                continue;
            }
            let entry: TrainLogEntry = serde_json::from_value(v)
                .map_err(|e| Error::InvalidArgument(format!("corrupt train log entry: {e}")))?;
            log.entries.push(entry);
        }
        Ok(log)
    }

    fn load_trained(&self, paradigm: ParadigmName) -> Result<TrainedModel> {
        let dir = self.train_dir(paradigm);
        let stores: BTreeMap<String, ParamStore<f32>> = load_checkpoint(&dir.join("model"))?;
        let online = stores
            .get(crate::encoder::STORE_ONLINE)
            .cloned()
            .ok_or_else(|| Error::CheckpointFormat("checkpoint missing online encoder".into()))?;
        let predictor = stores
            .get(crate::predictor::STORE_PREDICTOR)
            .cloned()
            .ok_or_else(|| Error::CheckpointFormat("checkpoint missing predictor".into()))?;
        let pair = match stores.get(crate::encoder::STORE_TARGET) {
            Some(t) => EncoderPair::with_target(online, t.clone(), self.cfg.train.tau)?,
            None => EncoderPair::new_shared(online, self.cfg.train.tau),
        };
        let log = Self::read_train_log(&dir.join("log.jsonl"))?;
        Ok(TrainedModel {
            pair,
            predictor,
            log,
        })
    }

    // -- drift + collapse ---------------------------------------------------

    pub fn eval_drift(&self, paradigm: ParadigmName) -> Result<(DriftCurve, CollapseTrack)> {
        Self::stage_err(
            &format!("eval-drift:{}", paradigm.as_str()),
            self.eval_drift_inner(paradigm),
        )
    }

    fn eval_drift_inner(&self, paradigm: ParadigmName) -> Result<(DriftCurve, CollapseTrack)> {
        let dir = self.out.join("eval");
        let key = self.cfg.stage_key(&["drift", paradigm.as_str()]);
        let path = dir.join(format!("drift_{}.json", paradigm.as_str()));
        let keyfile = dir.join(format!("drift_{}.key", paradigm.as_str()));
        if fs::read_to_string(&keyfile).map(|k| k.trim() == key).unwrap_or(false) {
            let text = fs::read_to_string(&path)?;
            let v: (DriftCurve, CollapseTrack) = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("corrupt drift artifact: {e}")))?;
            return Ok(v);
        }
        let (split, _) = self.dataset()?;
        let model = self.train(paradigm)?;
        fs::create_dir_all(&dir)?;
        let curve = rollout_drift(
            &model.predictor,
            &model.pair.online,
            &self.cfg.encoder,
            &self.cfg.predictor,
            &split.test,
            self.cfg.eval.context,
            self.cfg.eval.horizon,
        )?;
        let track = collapse_track(&model.log);
        // sample rollout traces for downstream inspection
        let mut traces = String::new();
        for w in split
            .test
            .iter()
            .filter(|w| w.t() >= self.cfg.eval.context + self.cfg.eval.horizon)
            .take(8)
        {
            let emb = encode_window(&model.pair.online, w, &self.cfg.encoder)?;
            let trace = rollout_from_embeddings(
                &model.predictor,
                &emb,
                &self.cfg.predictor,
                self.cfg.eval.context,
                self.cfg.eval.horizon,
                self.cfg.eval.rollout_actions,
            )?;
            traces.push_str(&trace.to_record_json(w.stay_id, w.start_hour));
            traces.push('\n');
        }
        fs::write(dir.join(format!("traces_{}.jsonl", paradigm.as_str())), traces)?;
        let payload = serde_json::to_string_pretty(&(curve.clone(), track.clone()))
            .expect("drift artifact serializes");
        fs::write(&path, payload)?;
        fs::write(&keyfile, key)?;
        Ok((curve, track))
    }

    // -- geometry ------------------------------------------------------------

    pub fn eval_geometry(&self) -> Result<BTreeMap<String, GeometryReport>> {
        Self::stage_err("eval-geometry", self.eval_geometry_inner())
    }

    fn eval_geometry_inner(&self) -> Result<BTreeMap<String, GeometryReport>> {
        let dir = self.out.join("eval");
        let key = self.cfg.stage_key(&["geometry"]);
        let path = dir.join("geometry.json");
        let keyfile = dir.join("geometry.key");
        if fs::read_to_string(&keyfile).map(|k| k.trim() == key).unwrap_or(false) {
            let text = fs::read_to_string(&path)?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("corrupt geometry artifact: {e}")));
        }
        let (split, manifest) = self.dataset()?;
        let (det, stable) = sample_cohort_panel(
            &split.test,
            manifest.t_max,
            self.cfg.eval.panel_per_cohort,
            crate::numerics::derive_seed(self.cfg.seed, &["panel"]),
        )?;
        fs::create_dir_all(&dir)?;
        let mut reports = BTreeMap::new();

        let mut encoders: Vec<(String, ParamStore<f32>)> = Vec::new();
        for &p in &self.cfg.paradigms {
            let model = self.train(p)?;
            encoders.push((p.as_str().to_string(), model.pair.online.clone()));
        }
        encoders.push((
            "untrained".to_string(),
            init_encoder(
                &self.cfg.encoder,
                crate::numerics::derive_seed(self.cfg.seed, &["encoder-init"]),
            )?,
        ));

        for (name, enc) in &encoders {
            let full = cohort_geometry(enc, &self.cfg.encoder, &det, &stable, None)?;
            reports.insert(format!("{name}.full"), full);
            // 2-D projection fitted on the panel's pooled per-hour embeddings
            let mut rows: Vec<Tensor<f32>> = Vec::new();
            for w in det.iter().chain(stable.iter()) {
                rows.push(encode_window(enc, w, &self.cfg.encoder)?.z);
            }
            let total: usize = rows.iter().map(|r| r.rows()).sum();
            let mut all = Tensor::zeros(total, self.cfg.encoder.d_z);
            let mut r = 0;
            for m in &rows {
                for i in 0..m.rows() {
                    all.row_mut(r).copy_from_slice(m.row(i));
                    r += 1;
                }
            }
            match fit_projection(&all) {
                Ok(proj) => {
                    let flat =
                        cohort_geometry(enc, &self.cfg.encoder, &det, &stable, Some(&proj))?;
                    reports.insert(format!("{name}.2d"), flat);
                }
                Err(Error::DegenerateGeometry(_)) => {
                    // collapsed encoders can be rank-deficient; the full-dim
                    // report already records the failure mode
                }
                Err(e) => return Err(e),
            }
        }
        fs::write(
            &path,
            serde_json::to_string_pretty(&reports).expect("geometry serializes"),
        )?;
        fs::write(&keyfile, key)?;
        Ok(reports)
    }

    // -- probes ---------------------------------------------------------------

    pub fn eval_probes(&self) -> Result<ProbeReport> {
        Self::stage_err("eval-probes", self.eval_probes_inner())
    }

    fn eval_probes_inner(&self) -> Result<ProbeReport> {
        let dir = self.out.join("eval");
        let key = self.cfg.stage_key(&["probes"]);
        let path = dir.join("probes.json");
        let keyfile = dir.join("probes.key");
        if fs::read_to_string(&keyfile).map(|k| k.trim() == key).unwrap_or(false) {
            let text = fs::read_to_string(&path)?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("corrupt probe artifact: {e}")));
        }
        let (split, _) = self.dataset()?;
        let mut models = BTreeMap::new();
        for &p in &self.cfg.paradigms {
            let model = self.train(p)?;
            models.insert(p, (model.pair.online.clone(), model.predictor.clone()));
        }
        fs::create_dir_all(&dir)?;
        let min_t = self.cfg.eval.context + 1;
        let train_windows: Vec<_> = split
            .train
            .iter()
            .filter(|w| w.t() >= min_t)
            .cloned()
            .collect();
        let test_windows: Vec<_> = split
            .test
            .iter()
            .filter(|w| w.t() >= min_t)
            .cloned()
            .collect();
        let report = probe_suite(&ProbeSuiteInputs {
            models: &models,
            train_windows: &train_windows,
            test_windows: &test_windows,
            tasks: &self.cfg.eval.tasks,
            enc_cfg: &self.cfg.encoder,
            pred_cfg: &self.cfg.predictor,
            probe_cfg: &self.cfg.eval.probe,
            context: self.cfg.eval.context,
            n_boot: self.cfg.eval.n_boot,
            actions: self.cfg.eval.rollout_actions,
            seed: crate::numerics::derive_seed(self.cfg.seed, &["probes"]),
        })?;
        fs::write(
            &path,
            serde_json::to_string_pretty(&report).expect("probe report serializes"),
        )?;
        fs::write(&keyfile, key)?;
        Ok(report)
    }

    // -- bundle / report -------------------------------------------------------

    pub fn bundle(&self) -> Result<ReportBundle> {
        let mut drift = BTreeMap::new();
        let mut collapse = BTreeMap::new();
        let mut final_z = BTreeMap::new();
        let mut quadrant_rows = Vec::new();
        for &p in &self.cfg.paradigms {
            let (curve, track) = self.eval_drift(p)?;
            let fz = track.z_std.last().copied().unwrap_or(0.0);
            quadrant_rows.push((p, fz, curve.accumulation_pct));
            drift.insert(p.as_str().to_string(), curve);
            collapse.insert(p.as_str().to_string(), track);
            final_z.insert(p.as_str().to_string(), fz);
        }
        let quadrant = quadrant_summary(&quadrant_rows)?;
        let geometry = self.eval_geometry()?;
        let probes = self.eval_probes()?;
        Ok(ReportBundle {
            config_hash: self.cfg.config_hash(),
            version: crate::VERSION.to_string(),
            seed: self.cfg.seed,
            drift,
            collapse,
            final_z_std: final_z,
            quadrant,
            geometry,
            probes,
        })
    }

    /// Full pipeline plus report emission; returns the bundle.
    pub fn run_all(&self, format: ReportFormat) -> Result<ReportBundle> {
        let bundle = self.bundle()?;
        let report_dir = self.out.join("report");
        emit_report(&bundle, format, &report_dir)?;
        fs::write(
            self.out.join("bundle.json"),
            serde_json::to_string_pretty(&bundle).expect("bundle serializes"),
        )?;
        let hash = bundle_hash(&self.out)?;
        fs::write(self.out.join("bundle.hash"), &hash)?;
        Ok(bundle)
    }
}

/// Hash of every emitted report artifact plus the bundle JSON, in sorted
/// relative-path order. Two runs of the same config must agree byte-wise.
pub fn bundle_hash(out: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    let report_dir = out.join("report");
    if report_dir.is_dir() {
        collect_files(&report_dir, &mut files)?;
    }
    let bundle_json = out.join("bundle.json");
    if bundle_json.is_file() {
        files.push(bundle_json);
    }
    files.sort();
    let mut acc: Vec<u8> = Vec::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(&f);
        acc.extend_from_slice(rel.to_string_lossy().as_bytes());
        acc.push(0);
        acc.extend_from_slice(&fs::read(&f)?);
        acc.push(0);
    }
    Ok(sha256_hex(&acc))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
