use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{InputFormat, PreprocessRules, SplitRatios};
use crate::eval::Objective;
use crate::prompt_kit::{DefinitionVariant, Task};
use crate::{Error, Result};

/// Experiment configuration, loaded from TOML and copied into every manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    pub corpus: CorpusSection,
    pub preprocess: PreprocessRules,
    pub split: SplitSection,
    pub prompt: PromptSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub calibration: CalibrationSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub input: Option<PathBuf>,
    pub format: Option<InputFormat>,
    pub min_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub stratify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub task: Task,
    pub definition: DefinitionVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub profile: String,
    pub endpoint: Option<String>,
    pub constrain_tokens: Vec<String>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub sets: usize,
    pub seed: u64,
    pub source_split: String,
    pub set_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub objective: Objective,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub split: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            input: None,
            format: None,
            min_tokens: 5,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            seed: 1,
            ratios: SplitRatios::default(),
            stratify: true,
        }
    }
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            task: Task::ZeroShotBinary,
            definition: DefinitionVariant::Custom,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            profile: "gpt4".into(),
            endpoint: None,
            constrain_tokens: Vec::new(),
            max_in_flight: None,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            sets: 10,
            seed: 1,
            source_split: "train".into(),
            set_index: 0,
        }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            objective: Objective::F1Positive,
            split: "validation".into(),
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            split: "test".into(),
        }
    }
}

const MODELS: [&str; 3] = ["gpt35", "gpt4", "llama2"];
const DEFINITIONS: [(&str, DefinitionVariant); 3] = [
    ("custom", DefinitionVariant::Custom),
    ("lorem-ipsum", DefinitionVariant::LoremIpsum),
    ("none", DefinitionVariant::None),
];

impl RunConfig {
    /// Loads a TOML file. A relative `corpus.input` is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|message| Error::Config {
            path: path.to_path_buf(),
            message,
        })?;
        if let (Some(input), Some(dir)) = (&cfg.corpus.input, path.parent()) {
            if input.is_relative() {
                cfg.corpus.input = Some(dir.join(input));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Names of the built-in experiment presets, e.g. `zs-binary-custom-gpt4`.
    pub fn preset_names() -> Vec<String> {
        let mut out = Vec::new();
        for kind in ["zs-binary", "zs-prob"] {
            for (def, _) in DEFINITIONS {
                for model in MODELS {
                    out.push(format!("{kind}-{def}-{model}"));
                }
            }
        }
        for model in MODELS {
            out.push(format!("fs-binary-{model}"));
        }
        out
    }

    pub fn preset(name: &str) -> Option<Self> {
        let model = MODELS.into_iter().find(|m| name.ends_with(&format!("-{m}")))?;
        let stem = &name[..name.len() - model.len() - 1];
        let (task, definition) = if stem == "fs-binary" {
            (Task::FewShotBinary, DefinitionVariant::None)
        } else {
            let (task, def) = if let Some(d) = stem.strip_prefix("zs-binary-") {
                (Task::ZeroShotBinary, d)
            } else {
                (Task::ZeroShotProbabilistic, stem.strip_prefix("zs-prob-")?)
            };
            (task, DEFINITIONS.iter().find(|(n, _)| *n == def)?.1)
        };
        let mut cfg = RunConfig {
            name: Some(name.to_string()),
            ..RunConfig::default()
        };
        cfg.prompt = PromptSection { task, definition };
        cfg.model.profile = model.to_string();
        Some(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        let names = RunConfig::preset_names();
        assert_eq!(names.len(), 21);
        for name in names {
            let cfg = RunConfig::preset(&name).unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        let c = RunConfig::preset("zs-binary-custom-gpt4").unwrap();
        assert_eq!(c.prompt.task, Task::ZeroShotBinary);
        assert_eq!(c.prompt.definition, DefinitionVariant::Custom);
        assert_eq!(c.model.profile, "gpt4");
        assert_eq!(RunConfig::preset("fs-binary-llama2").unwrap().prompt.task, Task::FewShotBinary);
        assert!(RunConfig::preset("zs-binary-fancy-gpt4").is_none());
    }

    #[test]
    fn checked_in_presets_match() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
        for name in RunConfig::preset_names() {
            let loaded = RunConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
            assert_eq!(loaded, RunConfig::preset(&name).unwrap(), "{name}");
        }
    }

    #[test]
    fn partial_and_unknown_keys() {
        let c = RunConfig::from_toml("[split]\nseed = 7\n").unwrap();
        assert_eq!(c.split.seed, 7);
        assert!(c.split.stratify);
        assert!(RunConfig::from_toml("[split]\nsede = 7\n").is_err());
    }
}
