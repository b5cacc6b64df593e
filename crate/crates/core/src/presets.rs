//! Named model and hardware presets.
//!
//! Extra presets can be supplied as JSON files in the directory named by
//! `MEMPLAN_PRESET_DIR`; each file may hold `{"models": {..}, "hardware": {..}}`
//! and entries override built-ins of the same name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareProfile;
use crate::trace::{Architecture, ModelSpec};

pub const PRESET_DIR_ENV: &str = "MEMPLAN_PRESET_DIR";

/// Hardware fields shipped as placeholders rather than measurements.
pub const UNCALIBRATED_FIELDS: [&str; 3] = ["cpu_optim_rate", "gpu_optim_rate", "coll_alpha"];

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("unknown {kind} preset `{name}`")]
    UnknownPreset { kind: &'static str, name: String },
    #[error("cannot read preset directory {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed preset file {path}: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetCatalog {
    #[serde(default)]
    pub models: BTreeMap<String, ModelSpec>,
    #[serde(default)]
    pub hardware: BTreeMap<String, HardwareProfile>,
}

fn llama(hidden: u64, blocks: usize, heads: u64, ffn: u64, kv_heads: u64) -> ModelSpec {
    ModelSpec {
        vocab_size: 32000,
        arch: Architecture::Llama,
        ffn_hidden: Some(ffn),
        n_kv_heads: Some(kv_heads),
        ..ModelSpec::gpt(hidden, blocks, heads)
    }
}

fn opt(hidden: u64, blocks: usize, heads: u64) -> ModelSpec {
    ModelSpec {
        vocab_size: 50272,
        ..ModelSpec::gpt(hidden, blocks, heads)
    }
}

fn rtx3090x4() -> HardwareProfile {
    HardwareProfile {
        h2d_bw: 15.8e9,
        d2h_bw: 15.8e9,
        coll_alpha: 20e-6,
        // Without NVLink every ring hop crosses the PCIe root complex twice.
        coll_bw: 15.8e9 / 2.0,
        world_size: 4,
        gpu_mem: 24e9,
        cpu_mem: 384e9,
        cpu_optim_rate: 1e9,
        gpu_optim_rate: 1e10,
    }
}

fn a100x4() -> HardwareProfile {
    HardwareProfile {
        h2d_bw: 31.5e9,
        d2h_bw: 31.5e9,
        coll_alpha: 20e-6,
        coll_bw: 300e9,
        world_size: 4,
        gpu_mem: 80e9,
        cpu_mem: 1e12,
        cpu_optim_rate: 1e9,
        gpu_optim_rate: 1e10,
    }
}

impl PresetCatalog {
    pub fn builtin() -> Self {
        let models = [
            ("gpt2-1b", ModelSpec::gpt(1536, 32, 16)),
            ("mistral-7b", llama(4096, 32, 32, 14336, 8)),
            ("gpt2-10b", ModelSpec::gpt(4096, 48, 32)),
            ("opt-13b", opt(5120, 40, 40)),
            ("llama-13b", llama(5120, 40, 40, 13824, 40)),
            ("gpt2-15b", ModelSpec::gpt(8192, 18, 64)),
            ("gpt2-20b", ModelSpec::gpt(8192, 24, 64)),
            ("gpt2-30b", ModelSpec::gpt(8192, 36, 64)),
            ("gpt2-40b", ModelSpec::gpt(8192, 50, 64)),
            ("opt-30b", opt(7168, 48, 56)),
            ("llama-34b", llama(8192, 48, 64, 22016, 8)),
        ];
        let hardware = [
            ("rtx3090x4", rtx3090x4()),
            ("a100x4", a100x4()),
            (
                "a100x1",
                HardwareProfile {
                    world_size: 1,
                    ..a100x4()
                },
            ),
        ];
        PresetCatalog {
            models: models
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            hardware: hardware
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    /// Merges every `*.json` file of `dir`, in file-name order.
    pub fn extend_from_dir(&mut self, dir: &Path) -> Result<(), PresetError> {
        let io = |e: std::io::Error| PresetError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for path in files {
            let malformed = |message: String| PresetError::Malformed {
                path: path.display().to_string(),
                message,
            };
            let text = std::fs::read_to_string(&path).map_err(|e| malformed(e.to_string()))?;
            let extra: PresetCatalog =
                serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
            for (name, spec) in extra.models {
                spec.validate()
                    .map_err(|e| malformed(format!("{name}: {e}")))?;
                self.models.insert(name, spec);
            }
            for (name, hw) in extra.hardware {
                hw.validate()
                    .map_err(|e| malformed(format!("{name}: {e}")))?;
                self.hardware.insert(name, hw);
            }
        }
        Ok(())
    }

    /// Built-ins plus the presets directory named by the environment, if set.
    pub fn load() -> Result<Self, PresetError> {
        let mut cat = Self::builtin();
        if let Some(dir) = std::env::var_os(PRESET_DIR_ENV) {
            cat.extend_from_dir(Path::new(&dir))?;
        }
        Ok(cat)
    }

    pub fn model(&self, name: &str) -> Result<ModelSpec, PresetError> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| PresetError::UnknownPreset {
                kind: "model",
                name: name.to_string(),
            })
    }

    pub fn hardware(&self, name: &str) -> Result<HardwareProfile, PresetError> {
        self.hardware
            .get(name)
            .cloned()
            .ok_or_else(|| PresetError::UnknownPreset {
                kind: "hardware",
                name: name.to_string(),
            })
    }
}

pub fn get_model(name: &str) -> Result<ModelSpec, PresetError> {
    PresetCatalog::builtin().model(name)
}

pub fn get_hardware(name: &str) -> Result<HardwareProfile, PresetError> {
    PresetCatalog::builtin().hardware(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookups() {
        let m = get_model("gpt2-10b").unwrap();
        assert_eq!((m.hidden_size, m.n_blocks, m.n_heads), (4096, 48, 32));
        let m = get_model("llama-34b").unwrap();
        assert_eq!((m.hidden_size, m.n_blocks, m.n_heads), (8192, 48, 64));
        let m = get_model("opt-30b").unwrap();
        assert_eq!((m.hidden_size, m.n_blocks, m.n_heads), (7168, 48, 56));
        assert!(matches!(
            get_model("gpt5"),
            Err(PresetError::UnknownPreset { .. })
        ));
    }

    #[test]
    fn hardware_values() {
        let r = get_hardware("rtx3090x4").unwrap();
        assert_eq!(
            (r.h2d_bw, r.d2h_bw, r.gpu_mem, r.world_size),
            (15.8e9, 15.8e9, 24e9, 4)
        );
        let a = get_hardware("a100x4").unwrap();
        assert_eq!((a.h2d_bw, a.coll_bw, a.gpu_mem), (31.5e9, 300e9, 80e9));
        let one = get_hardware("a100x1").unwrap();
        assert_eq!(one, HardwareProfile { world_size: 1, ..a });
    }

    #[test]
    fn every_preset_is_valid() {
        let c = PresetCatalog::builtin();
        for (name, m) in &c.models {
            assert!(m.validate().is_ok(), "{name}");
        }
        for (name, h) in &c.hardware {
            assert!(h.validate().is_ok(), "{name}");
        }
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("extra.json"),
            r#"{"hardware": {"tiny": {"h2d_bw": 1.0, "d2h_bw": 1.0, "coll_alpha": 0.0,
                "coll_bw": 1.0, "world_size": 1, "gpu_mem": 1.0, "cpu_mem": 1.0,
                "cpu_optim_rate": 1.0, "gpu_optim_rate": 1.0}},
               "models": {"gpt2-10b": {"hidden_size": 64, "n_blocks": 2, "n_heads": 4}}}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("ignored.txt"), "not json").unwrap();
        let mut c = PresetCatalog::builtin();
        c.extend_from_dir(dir.path()).unwrap();
        assert_eq!(c.hardware("tiny").unwrap().world_size, 1);
        assert_eq!(c.model("gpt2-10b").unwrap().hidden_size, 64);

        std::fs::write(dir.path().join("bad.json"), "{").unwrap();
        assert!(matches!(
            c.extend_from_dir(dir.path()),
            Err(PresetError::Malformed { .. })
        ));
    }
}
