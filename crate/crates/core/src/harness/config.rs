//! Experiment configuration: a strict TOML schema with full desk-scale
//! defaults, the "appendix-b" full-scale preset, cross-field validation,
//! and a canonical hash for caching and provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{ParadigmName, TrainHyper};
use crate::encoder::{EncoderConfig, SftInitConfig};
use crate::numerics::checkpoint::sha256_hex;
use crate::predictor::{ActionSource, PredictorConfig};
use crate::synthworld::GeneratorConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub t_max: usize,
    pub stride: usize,
    pub ratios: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            t_max: 72,
            stride: 12,
            ratios: (0.70, 0.15, 0.15),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Encoder context length C for drift evaluation and probes.
    pub context: usize,
    /// Drift-evaluation rollout horizon H.
    pub horizon: usize,
    pub panel_per_cohort: usize,
    pub n_boot: usize,
    pub tasks: Vec<String>,
    pub probe: crate::probes::ProbeConfig,
    pub rollout_actions: ActionSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context: 24,
            horizon: 24,
            panel_per_cohort: 50,
            n_boot: 500,
            tasks: vec!["deteriorated".into(), "late_event".into()],
            probe: crate::probes::ProbeConfig::default(),
            rollout_actions: ActionSource::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub sft: SftInitConfig,
    pub train: TrainHyper,
    pub paradigms: Vec<ParadigmName>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            generator: GeneratorConfig::default(),
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            sft: SftInitConfig::default(),
            train: TrainHyper::default(),
            paradigms: ParadigmName::all().to_vec(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    AppendixB,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "appendix-b" => Ok(Preset::AppendixB),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"desk\" or \"appendix-b\")"
            ))),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: minutes-scale CPU runs.
    pub fn desk() -> Self {
        ExperimentConfig::default()
    }

    /// Full-scale preset mirroring the published hyperparameter table
    /// verbatim: 4096-dim latents, the 92.5M-parameter predictor, AdamW
    /// with lrs 5e-5/5e-4, weight decay 0.04, clips 0.5/1.0, EMA momentum
    /// 0.996, cosine schedule with 2% warmup over 11776 steps split
    /// 3072/3072/1024/0/4608 across the phases, batch 64, seed 42.
    pub fn appendix_b() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.encoder = EncoderConfig {
            d_z: 4096,
            hidden: 64,
            dropout: 0.0,
        };
        cfg.predictor = PredictorConfig::paper_preset();
        cfg.sft = SftInitConfig {
            lr: 1e-4,
            ..SftInitConfig::default()
        };
        cfg.train = TrainHyper {
            total_steps: 11776,
            batch_windows: 64,
            encoder_lr: 5e-5,
            predictor_lr: 5e-4,
            weight_decay: 0.04,
            encoder_clip: 0.5,
            predictor_clip: 1.0,
            tau: 0.996,
            warmup_fraction: 0.02,
            mask_fraction: 0.25,
        };
        cfg.eval.horizon = 48;
        cfg
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::AppendixB => Self::appendix_b(),
        }
    }

    /// Parse a TOML config over a preset base; unknown keys are rejected.
    /// An empty document yields the preset unchanged.
    pub fn from_toml_str(text: &str, base: Preset) -> Result<Self> {
        // Overlay semantics: parse the raw TOML, then deserialize into the
        // base via serde's partial-default path per section. toml does not
        // support true deep merges of defaulted structs, so sections given
        // in the file replace whole sections of the base.
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Partial {
            seed: Option<u64>,
            generator: Option<GeneratorConfig>,
            dataset: Option<DatasetConfig>,
            encoder: Option<EncoderConfig>,
            predictor: Option<PredictorConfig>,
            sft: Option<SftInitConfig>,
            train: Option<TrainHyper>,
            paradigms: Option<Vec<ParadigmName>>,
            eval: Option<EvalConfig>,
        }
        let partial: Partial =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut cfg = ExperimentConfig::preset(base);
        if let Some(v) = partial.seed {
            cfg.seed = v;
        }
        if let Some(v) = partial.generator {
            cfg.generator = v;
        }
        if let Some(v) = partial.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = partial.encoder {
            cfg.encoder = v;
        }
        if let Some(v) = partial.predictor {
            cfg.predictor = v;
        }
        if let Some(v) = partial.sft {
            cfg.sft = v;
        }
        if let Some(v) = partial.train {
            cfg.train = v;
        }
        if let Some(v) = partial.paradigms {
            cfg.paradigms = v;
        }
        if let Some(v) = partial.eval {
            cfg.eval = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, base)
    }

    /// Cross-field validation; collects every violation with a field path.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if let Err(e) = self.encoder.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.predictor.validate() {
            problems.push(e.to_string());
        }
        if self.encoder.d_z != self.predictor.d_z {
            problems.push(format!(
                "encoder.d_z {} must match predictor.d_z {}",
                self.encoder.d_z, self.predictor.d_z
            ));
        }
        if self.dataset.t_max < 1 || self.dataset.stride < 1 {
            problems.push("dataset.t_max and dataset.stride must be >= 1".into());
        }
        let rsum = self.dataset.ratios.0 + self.dataset.ratios.1 + self.dataset.ratios.2;
        if (rsum - 1.0).abs() > 1e-9 {
            problems.push(format!("dataset.ratios must sum to 1, got {rsum}"));
        }
        if self.eval.context < 1 || self.eval.horizon < 1 {
            problems.push("eval.context and eval.horizon must be >= 1".into());
        }
        if self.eval.context + self.eval.horizon > self.dataset.t_max {
            problems.push(format!(
                "eval.context + eval.horizon = {} exceeds dataset.t_max = {}",
                self.eval.context + self.eval.horizon,
                self.dataset.t_max
            ));
        }
        if 2 * self.dataset.t_max + 1 > self.predictor.max_seq {
            problems.push(format!(
                "dataset.t_max {} needs predictor.max_seq >= {}, got {}",
                self.dataset.t_max,
                2 * self.dataset.t_max + 1,
                self.predictor.max_seq
            ));
        }
        if self.paradigms.is_empty() {
            problems.push("paradigms must be non-empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.paradigms {
            if !seen.insert(*p) {
                problems.push(format!("paradigms lists {} twice", p.as_str()));
            }
        }
        if self.train.batch_windows == 0 {
            problems.push("train.batch_windows must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.train.warmup_fraction) {
            problems.push("train.warmup_fraction must be in [0, 1)".into());
        }
        if self.eval.tasks.is_empty() {
            problems.push("eval.tasks must be non-empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Canonical hash over the config contents and the code version.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(format!("{json}|{}", crate::VERSION).as_bytes())
    }

    /// Hash of a named stage's dependency closure.
    pub fn stage_key(&self, parts: &[&str]) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(format!("{json}|{}|{}", crate::VERSION, parts.join("/")).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::{split_budget, PHASE_WEIGHTS};

    #[test]
    fn empty_config_is_desk_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", Preset::Desk).unwrap();
        assert_eq!(cfg, ExperimentConfig::desk());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str("nonsense = 3\n", Preset::Desk).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err =
            ExperimentConfig::from_toml_str("[train]\nbogus_field = 1\n", Preset::Desk).unwrap_err();
        assert!(err.to_string().contains("bogus_field"), "{err}");
    }

    #[test]
    fn appendix_b_values_verbatim() {
        let cfg = ExperimentConfig::appendix_b();
        assert_eq!(cfg.train.tau, 0.996);
        assert_eq!(cfg.train.encoder_lr, 5e-5);
        assert_eq!(cfg.train.predictor_lr, 5e-4);
        assert_eq!(cfg.train.weight_decay, 0.04);
        assert_eq!(cfg.train.encoder_clip, 0.5);
        assert_eq!(cfg.train.predictor_clip, 1.0);
        assert_eq!(cfg.train.warmup_fraction, 0.02);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.batch_windows, 64);
        assert_eq!(cfg.predictor.layers, 6);
        assert_eq!(cfg.predictor.d_p, 1024);
        assert_eq!(cfg.predictor.heads, 8);
        assert_eq!(cfg.predictor.ffn_dim, 4096);
        assert_eq!(cfg.predictor.max_seq, 149);
        assert_eq!(cfg.predictor.ffn_dropout, 0.15);
        assert_eq!(cfg.predictor.attn_dropout, 0.10);
        assert_eq!(cfg.encoder.d_z, 4096);
        let phases = split_budget(cfg.train.total_steps, &PHASE_WEIGHTS);
        assert_eq!(phases, vec![3072, 3072, 1024, 4608]);
    }

    #[test]
    fn cross_field_validation() {
        let ok = ExperimentConfig::from_toml_str(
            "[eval]\ncontext = 24\nhorizon = 48\n",
            Preset::Desk,
        );
        assert!(ok.is_ok(), "{ok:?}");
        let err = ExperimentConfig::from_toml_str(
            "[eval]\ncontext = 30\nhorizon = 48\n",
            Preset::Desk,
        )
        .unwrap_err();
        assert!(err.to_string().contains("t_max"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::desk();
        let b = ExperimentConfig::desk();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = ExperimentConfig::desk();
        c.seed = 123;
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
