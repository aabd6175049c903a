//! Run configuration: JSON-serializable, schema-checked by the typed structs
//! (unknown keys rejected), with two built-in presets and CLI flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_feature_file, make_session_stream, Hierarchy, LabeledDataset,
    SessionStream, SynthParams,
};
use crate::embedding::OptimConfig;
use crate::error::{Error, Result};
use crate::protocol::{Mode, NetSpec, RunFlags};

/// Where the feature vectors come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        coarse_classes: usize,
        fine_per_coarse: usize,
        params: SynthParams,
    },
    FeatureFile {
        path: PathBuf,
    },
}

/// Episode layout: C-way K-shot sessions with H queries per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub c_way: usize,
    pub k_shot: usize,
    pub h_queries: usize,
    pub sessions: usize,
}

/// Knobs for the ablate/analyze subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Number of seeds per grid cell / variant.
    pub seeds: usize,
    /// Accuracy-point margin defining "freezing the embedding improves".
    pub eps_points: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            seeds: 5,
            eps_points: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub stream: StreamSpec,
    pub flags: RunFlags,
    pub net: NetSpec,
    pub base_opt: OptimConfig,
    pub session_opt: OptimConfig,
    pub seed: u64,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

impl RunConfig {
    /// Named preset. "paper" mirrors the published hyperparameters (lr
    /// 0.12/0.1, batch 256, 200 epochs, tau 0.2, lambda 0.5) on a 20x5
    /// hierarchy; "desk" is a few-minute configuration that exhibits the same
    /// qualitative behavior.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(RunConfig {
                dataset: DatasetSpec::Synthetic {
                    coarse_classes: 20,
                    fine_per_coarse: 5,
                    params: SynthParams {
                        input_dim: 64,
                        coarse_sep: 10.0,
                        fine_sep: 3.0,
                        noise_sigma: 0.5,
                        n_per_fine: 40,
                    },
                },
                stream: StreamSpec {
                    c_way: 5,
                    k_shot: 5,
                    h_queries: 15,
                    sessions: 8,
                },
                flags: RunFlags::knowe(),
                net: NetSpec {
                    hidden: vec![128, 128],
                    feat_dim: 64,
                    proj_hidden: 64,
                    proj_dim: 64,
                    lambda: 0.5,
                },
                base_opt: OptimConfig {
                    lr: 0.12,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 256,
                    epochs: 200,
                    tau: 0.2,
                    view_jitter: 0.25,
                },
                session_opt: OptimConfig {
                    lr: 0.1,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 256,
                    epochs: 200,
                    tau: 0.2,
                    view_jitter: 0.25,
                },
                seed: 1,
                analysis: AnalysisSpec::default(),
            }),
            "desk" => Ok(RunConfig {
                dataset: DatasetSpec::Synthetic {
                    coarse_classes: 6,
                    fine_per_coarse: 3,
                    params: SynthParams {
                        input_dim: 32,
                        coarse_sep: 10.0,
                        fine_sep: 3.0,
                        noise_sigma: 0.5,
                        n_per_fine: 40,
                    },
                },
                stream: StreamSpec {
                    c_way: 3,
                    k_shot: 5,
                    h_queries: 10,
                    sessions: 4,
                },
                flags: RunFlags::knowe(),
                net: NetSpec::desk(),
                base_opt: OptimConfig {
                    lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 64,
                    epochs: 30,
                    tau: 0.2,
                    view_jitter: 0.25,
                },
                session_opt: OptimConfig {
                    lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 16,
                    epochs: 40,
                    tau: 0.2,
                    view_jitter: 0.25,
                },
                seed: 1,
                analysis: AnalysisSpec::default(),
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected \"paper\" or \"desk\""
            ))),
        }
    }

    /// The 5-superclass, 4-children layout (5-way 5-shot, 4 sessions, d=32)
    /// used by the stability analysis. Fully refined by the last session.
    pub fn stability_layout() -> Self {
        let mut cfg = RunConfig::preset("desk").expect("builtin preset");
        cfg.dataset = DatasetSpec::Synthetic {
            coarse_classes: 5,
            fine_per_coarse: 4,
            params: SynthParams {
                input_dim: 32,
                coarse_sep: 10.0,
                fine_sep: 3.0,
                noise_sigma: 1.0,
                n_per_fine: 40,
            },
        };
        cfg.stream = StreamSpec {
            c_way: 5,
            k_shot: 5,
            h_queries: 10,
            sessions: 4,
        };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_opt.validate()?;
        self.session_opt.validate()?;
        if self.stream.c_way == 0
            || self.stream.k_shot == 0
            || self.stream.h_queries == 0
            || self.stream.sessions == 0
        {
            return Err(Error::Config(
                "stream: c_way, k_shot, h_queries, sessions must be positive".into(),
            ));
        }
        if self.net.feat_dim == 0 || self.net.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("net: zero-width layer".into()));
        }
        if !(self.net.lambda > 0.0) {
            return Err(Error::Config("net: lambda must be positive".into()));
        }
        if self.analysis.seeds == 0 || !(self.analysis.eps_points > 0.0) {
            return Err(Error::Config(
                "analysis: seeds and eps_points must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Materialize the dataset (generating or loading features).
    pub fn build_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                coarse_classes,
                fine_per_coarse,
                params,
            } => {
                let h = Hierarchy::balanced(*coarse_classes, *fine_per_coarse)?;
                generate_synthetic(&h, params, crate::rng::derive_seed(self.seed, "dataset"))
            }
            DatasetSpec::FeatureFile { path } => load_feature_file(path),
        }
    }

    /// Materialize the full session stream.
    pub fn build_stream(&self) -> Result<SessionStream> {
        let ds = self.build_dataset()?;
        make_session_stream(
            &ds,
            self.stream.c_way,
            self.stream.k_shot,
            self.stream.h_queries,
            self.stream.sessions,
            crate::rng::derive_seed(self.seed, "stream"),
        )
    }

    /// Apply `key=value` overrides from the CLI `--flags` option. Accepted
    /// keys: the four booleans of `RunFlags` plus `mode`.
    pub fn apply_flag_overrides(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("flag override {part:?} is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_bool = |v: &str| -> Result<bool> {
                v.parse::<bool>()
                    .map_err(|_| Error::Config(format!("flag {key}: {v:?} is not a boolean")))
            };
            match key {
                "contrastive_base" => self.flags.contrastive_base = parse_bool(value)?,
                "freeze_embedding" => self.flags.freeze_embedding = parse_bool(value)?,
                "normalize_weights" => self.flags.normalize_weights = parse_bool(value)?,
                "freeze_classifier" => self.flags.freeze_classifier = parse_bool(value)?,
                "mode" => {
                    self.flags.mode = match value {
                        "knowe" => Mode::Knowe,
                        "ft_baseline" => Mode::FtBaseline,
                        "joint_upper_bound" => Mode::JointUpperBound,
                        other => {
                            return Err(Error::Config(format!("unknown mode {other:?}")))
                        }
                    };
                    if self.flags.mode == Mode::FtBaseline {
                        self.flags = RunFlags::ft_baseline();
                    }
                }
                other => return Err(Error::Config(format!("unknown flag key {other:?}"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["paper", "desk"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(RunConfig::preset("giant").is_err());
        RunConfig::stability_layout().validate().unwrap();
    }

    #[test]
    fn paper_preset_carries_published_hyperparameters() {
        let cfg = RunConfig::preset("paper").unwrap();
        assert_eq!(cfg.base_opt.lr, 0.12);
        assert_eq!(cfg.session_opt.lr, 0.1);
        assert_eq!(cfg.base_opt.batch_size, 256);
        assert_eq!(cfg.base_opt.epochs, 200);
        assert_eq!(cfg.base_opt.tau, 0.2);
        assert_eq!(cfg.net.lambda, 0.5);
        assert_eq!(cfg.base_opt.momentum, 0.9);
        assert_eq!(cfg.base_opt.weight_decay, 5e-4);
    }

    #[test]
    fn json_round_trip_and_unknown_key_rejection() {
        let cfg = RunConfig::preset("desk").unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());

        let bad = text.replacen("\"seed\"", "\"sneed\"", 1);
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn load_reports_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));

        let mut cfg = RunConfig::preset("desk").unwrap();
        cfg.stream.sessions = 0;
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn desk_stream_materializes() {
        let mut cfg = RunConfig::preset("desk").unwrap();
        // shrink for test speed
        if let DatasetSpec::Synthetic { params, .. } = &mut cfg.dataset {
            params.n_per_fine = 20;
        }
        let stream = cfg.build_stream().unwrap();
        assert_eq!(stream.sessions, 4);
        assert_eq!(stream.supports.len(), 4);
        assert_eq!(stream.queries.len(), 5);
    }

    #[test]
    fn flag_overrides() {
        let mut cfg = RunConfig::preset("desk").unwrap();
        cfg.apply_flag_overrides("normalize_weights=false, freeze_classifier=false")
            .unwrap();
        assert!(!cfg.flags.normalize_weights);
        assert!(!cfg.flags.freeze_classifier);
        assert!(cfg.flags.freeze_embedding);

        cfg.apply_flag_overrides("mode=ft_baseline").unwrap();
        assert_eq!(cfg.flags, RunFlags::ft_baseline());

        assert!(cfg.apply_flag_overrides("bogus=true").is_err());
        assert!(cfg.apply_flag_overrides("normalize_weights").is_err());
        assert!(cfg.apply_flag_overrides("normalize_weights=maybe").is_err());
    }
}
