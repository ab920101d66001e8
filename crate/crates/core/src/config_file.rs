//! `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Keys are
//! `<section>.<field>` with section `trainer`, `weights`, `model` or `data`
//! and a field of [`TrainerConfig`], [`LossWeights`], [`ModelConfig`] or
//! [`SynthSpec`]. Values are JSON literals (`1e-4`, `true`, `[0.5, 0.8]`,
//! `["stripes", "dots"]`); a bare word is read as a string.
//!
//! ```text
//! # desk run
//! trainer.total_steps = 3000
//! trainer.learning_rate = 1e-4
//! weights.lambda_sym = 0.3
//! model.image_size = 64
//! data.n_items = 200
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Result, UstError};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::trainer::TrainerConfig;

pub const SECTIONS: [&str; 4] = ["trainer", "weights", "model", "data"];

/// Parsed assignments in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String, Value)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| UstError::Config(format!("line {}: {m}: `{}`", lineno + 1, raw.trim()));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (section, field) = key.trim().split_once('.').ok_or_else(|| err("key needs a section prefix"))?;
            if !SECTIONS.contains(&section) {
                return Err(err("unknown section"));
            }
            let value = value.trim();
            if value.is_empty() {
                return Err(err("missing value"));
            }
            let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            entries.push((section.to_string(), field.trim().to_string(), value));
        }
        Ok(ConfigFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UstError::io(path, e))?;
        Self::parse(&text)
    }

    fn apply<T: Serialize + DeserializeOwned>(&self, section: &str, base: &T) -> Result<T> {
        let mut obj: Map<String, Value> = match serde_json::to_value(base)? {
            Value::Object(m) => m,
            _ => unreachable!("configuration types serialize to objects"),
        };
        for (_, field, value) in self.entries.iter().filter(|e| e.0 == section) {
            match obj.get_mut(field) {
                Some(slot) => *slot = value.clone(),
                None => return Err(UstError::Config(format!("unknown key `{section}.{field}`"))),
            }
        }
        serde_json::from_value(Value::Object(obj)).map_err(|e| UstError::Config(format!("section `{section}`: {e}")))
    }

    pub fn trainer(&self, base: &TrainerConfig) -> Result<TrainerConfig> {
        let mut t = self.apply("trainer", base)?;
        t.weights = self.apply("weights", &t.weights)?;
        if self.entries.iter().any(|e| e.0 == "trainer" && e.1 == "weights") {
            return Err(UstError::Config("set loss weights with `weights.<name>` keys".into()));
        }
        Ok(t)
    }

    pub fn weights(&self, base: &LossWeights) -> Result<LossWeights> {
        self.apply("weights", base)
    }

    pub fn model(&self, base: &ModelConfig) -> Result<ModelConfig> {
        self.apply("model", base)
    }

    pub fn data(&self, base: &SynthSpec) -> Result<SynthSpec> {
        self.apply("data", base)
    }

    /// Reject unknown keys of every section at once.
    pub fn check(&self) -> Result<()> {
        self.trainer(&TrainerConfig::default())?;
        self.model(&ModelConfig::default())?;
        self.data(&SynthSpec::default())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_comments() {
        let f = ConfigFile::parse(
            "# comment\ntrainer.total_steps = 7 # trailing\nweights.lambda_sym=0.5\nmodel.use_fit_in = false\ndata.scale_range = [0.6, 0.7]\ndata.texture_families = [\"dots\"]\n",
        )
        .unwrap();
        let t = f.trainer(&TrainerConfig::default()).unwrap();
        assert_eq!(t.total_steps, 7);
        assert_eq!(t.weights.lambda_sym, 0.5);
        assert!(!f.model(&ModelConfig::default()).unwrap().use_fit_in);
        let d = f.data(&SynthSpec::default()).unwrap();
        assert_eq!(d.scale_range, (0.6, 0.7));
        assert_eq!(d.texture_families.len(), 1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ConfigFile::parse("trainer.nope = 1").unwrap().check().is_err());
        assert!(ConfigFile::parse("other.x = 1").is_err());
        assert!(ConfigFile::parse("just words").is_err());
        assert!(ConfigFile::parse("trainer.total_steps = many").unwrap().check().is_err());
    }
}
