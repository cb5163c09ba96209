//! Config files and `--set path=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads a TOML or JSON file (by extension) into `T`; absent means defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    Ok(parsed)
}

/// Applies `a.b.c=value` assignments. Values are read as JSON when they
/// parse as JSON and as plain strings otherwise.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(
    cfg: T,
    assignments: &[String],
) -> Result<T> {
    if assignments.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for assignment in assignments {
        let Some((path, raw)) = assignment.split_once('=') else {
            bail!("override `{assignment}` is not of the form path=value");
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, path, value).with_context(|| format!("applying `{assignment}`"))?;
    }
    serde_json::from_value(tree).context("config after overrides")
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("`{}` is not a table", keys[..i].join("."));
        };
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        node = map
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    bail!("empty override path")
}

#[cfg(test)]
mod tests {
    use super::*;
    use warmup_core::harness::RunConfig;
    use warmup_core::ScheduleSpec;

    #[test]
    fn nested_override() {
        let cfg = apply_overrides(
            RunConfig::default(),
            &["train.steps=17".into(), "network.width=8".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 17);
        assert_eq!(cfg.network.width, 8);
    }

    #[test]
    fn tagged_enum_override() {
        let cfg = apply_overrides(
            RunConfig::default(),
            &[r#"train.schedule={"kind":"linear_warmup","init_lr":0.0,"target_lr":0.5,"warmup_steps":8}"#.into()],
        )
        .unwrap();
        assert_eq!(cfg.train.schedule, ScheduleSpec::linear_warmup(0.5, 8));
    }

    #[test]
    fn bad_assignment() {
        assert!(apply_overrides(RunConfig::default(), &["train.steps".into()]).is_err());
        assert!(apply_overrides(RunConfig::default(), &["train.steps=\"many\"".into()]).is_err());
    }
}
