//! Experiment configuration: profile defaults, then the JSON file, then flag
//! overrides, in that order of precedence.

use std::fs;
use std::path::{Path, PathBuf};

use mvcl_core::dataio::synthetic::SyntheticShiftSpec;
use mvcl_core::dataio::Split;
use mvcl_core::training::{AblationGrid, Profile, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fail::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Xor,
    Shift,
}

impl Preset {
    pub fn spec(self, seed: u64) -> SyntheticShiftSpec {
        match self {
            Preset::Xor => SyntheticShiftSpec::xor(seed),
            Preset::Shift => SyntheticShiftSpec::shift(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A generated dataset used in place of files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `source` for pre-training and `target` otherwise.
    #[serde(default)]
    pub domain: Option<Domain>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `meta.json` and `data.jsonl`.
    pub dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Checkpoint to start from; `"none"` or absent means random initialization.
    pub checkpoint: Option<String>,
    pub grid: AblationGrid,
    pub eval_split: Split,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Full)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            train: TrainConfig::profile(profile),
            data: DataConfig::default(),
            checkpoint: None,
            grid: AblationGrid::default(),
            eval_split: Split::Test,
        }
    }

    pub fn checkpoint_path(&self) -> Option<&Path> {
        match self.checkpoint.as_deref() {
            None | Some("none") => None,
            Some(p) => Some(Path::new(p)),
        }
    }
}

/// One `key=value` override; the value is parsed as JSON when it can be,
/// otherwise taken as a string.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Failure::validation(format!("--set {text}: expected key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self {
            key: key.trim().to_string(),
            value,
        })
    }

    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Self {
            key: key.to_string(),
            value: value.into(),
        }
    }
}

/// Everything needed to reproduce how a config was obtained.
#[derive(Debug, Serialize)]
pub struct Resolved {
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<Override>,
    pub config: ExperimentConfig,
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(tree: &mut Value, ov: &Override) -> Result<(), Failure> {
    let mut node = tree;
    let parts: Vec<&str> = ov.key.split('.').collect();
    // Keys under a section created here are checked when the tree is parsed.
    let mut fresh = false;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::validation(format!("--set {}: '{}' is not a section", ov.key, parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !fresh && !obj.contains_key(*part) {
                return Err(Failure::validation(format!("--set {}: unknown key", ov.key)));
            }
            obj.insert(part.to_string(), ov.value.clone());
            return Ok(());
        }
        // Optional sections such as data.synthetic start out null.
        if fresh {
            obj.entry(part.to_string()).or_insert(Value::Null);
        }
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| Failure::validation(format!("--set {}: unknown key", ov.key)))?;
        if child.is_null() {
            *child = Value::Object(Default::default());
            fresh = true;
        }
        node = child;
    }
    Ok(())
}

/// Applies overrides to a bare JSON tree, e.g. a generator spec.
pub fn apply_overrides(tree: &mut Value, overrides: &[Override]) -> Result<(), Failure> {
    overrides.iter().try_for_each(|ov| set_path(tree, ov))
}

/// Prefixes `msg` with the override or file line that most likely caused it.
fn anchor(msg: &str, file: Option<(&Path, &str)>, overrides: &[Override]) -> String {
    let mentions = |key: &str| {
        msg.split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .any(|w| !w.is_empty() && w == key)
    };
    for ov in overrides.iter().rev() {
        let leaf = ov.key.rsplit('.').next().unwrap_or(&ov.key);
        if mentions(leaf) {
            return format!("--set {}={}: {msg}", ov.key, ov.value);
        }
    }
    if let Some((path, text)) = file {
        for (i, line) in text.lines().enumerate() {
            let keys = line.split('"').skip(1).step_by(2);
            if keys.into_iter().any(mentions) {
                return format!("{}:{}: {msg}", path.display(), i + 1);
            }
        }
    }
    msg.to_string()
}

/// Builds the experiment config for `profile` from an optional JSON file and
/// overrides applied in order.
pub fn resolve(file: Option<&Path>, profile: Option<Profile>, overrides: Vec<Override>) -> Result<Resolved, Failure> {
    let text = match file {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::validation(format!("{}: cannot read config: {e}", p.display())))?,
        ),
        None => None,
    };
    let file_value: Option<Value> = match (&text, file) {
        (Some(t), Some(p)) => {
            // A typed parse first, so unknown keys and bad types report a line.
            if let Err(e) = serde_json::from_str::<ExperimentConfig>(t) {
                return Err(Failure::validation(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column())));
            }
            Some(serde_json::from_str(t).expect("validated above"))
        }
        _ => None,
    };
    let file_profile = file_value
        .as_ref()
        .and_then(|v| v.get("profile"))
        .and_then(|p| serde_json::from_value::<Profile>(p.clone()).ok());
    let profile = profile.or(file_profile).unwrap_or(Profile::Full);

    let mut tree = serde_json::to_value(ExperimentConfig::for_profile(profile)).expect("config serializes");
    if let Some(v) = file_value {
        merge(&mut tree, v);
    }
    tree["profile"] = serde_json::to_value(profile).expect("profile serializes");
    for ov in &overrides {
        set_path(&mut tree, ov)?;
    }
    let located = text.as_deref().zip(file).map(|(t, p)| (p, t));
    let config: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| Failure::validation(anchor(&e.to_string(), located, &overrides)))?;
    let checks = config
        .train
        .validate()
        .and_then(|_| config.grid.validate());
    if let Err(e) = checks {
        return Err(Failure::validation(anchor(&e.to_string(), located, &overrides)));
    }
    Ok(Resolved {
        config_file: file.map(Path::to_path_buf),
        overrides,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn precedence_is_profile_then_file_then_flags() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{\n  \"train\": {{\n    \"lr\": 0.01,\n    \"lambda\": 0.5\n  }}\n}}").unwrap();
        let r = resolve(Some(f.path()), Some(Profile::Desk), vec![Override::parse("train.lambda=0").unwrap()]).unwrap();
        assert_eq!(r.config.train.lr, 0.01);
        assert_eq!(r.config.train.lambda, 0.0);
        assert_eq!(r.config.train.model.hidden, 32);
    }

    #[test]
    fn validation_errors_point_at_a_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{\n  \"train\": {{\n    \"lr\": -1\n  }}\n}}").unwrap();
        let err = resolve(Some(f.path()), None, vec![]).unwrap_err();
        assert!(err.message.ends_with("lr must be positive, got -1"), "{}", err.message);
        assert!(err.message.contains(":3: "), "{}", err.message);

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{\n  \"train\": {{\n    \"bogus\": 1\n  }}\n}}").unwrap();
        let err = resolve(Some(f.path()), None, vec![]).unwrap_err();
        assert!(err.message.contains(":3:"), "{}", err.message);
    }

    #[test]
    fn overrides_reject_unknown_keys_and_anchor_errors() {
        assert!(resolve(None, None, vec![Override::parse("train.nope=1").unwrap()]).is_err());
        let err = resolve(None, None, vec![Override::parse("train.tau=0").unwrap()]).unwrap_err();
        assert!(err.message.starts_with("--set train.tau=0: "), "{}", err.message);
        let r = resolve(None, None, vec![Override::parse("data.synthetic.preset=xor").unwrap()]).unwrap();
        assert_eq!(r.config.data.synthetic.unwrap().preset, Preset::Xor);
    }
}
