//! TOML configuration files with `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Reads `path` (or starts empty), applies `overrides` in order, and
/// deserializes. Missing keys take their defaults.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Sets `a.b.c=value`. The value is parsed as a TOML literal when possible
/// and kept as a string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in {spec:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{p} in {key} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::harness::{RunConfig, StrategySpec};

    #[test]
    fn overrides_on_defaults() {
        let cfg: RunConfig = load_config(
            None,
            &[
                "env=cartpole_sparse".into(),
                "strategy.kind=ent".into(),
                "strategy.alpha=-0.5".into(),
                "sac.hidden=[32, 32]".into(),
                "episodes = 12".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.env, EnvKind::CartpoleSparse);
        assert_eq!(cfg.strategy, StrategySpec::Ent { alpha: -0.5 });
        assert_eq!(cfg.sac.hidden, vec![32, 32]);
        assert_eq!(cfg.episodes, 12);
        assert_eq!(cfg.n_samples, 256);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(
            &p,
            "seed = 4\n[strategy]\nkind = \"ent_arcsine\"\nlo = -2.0\nhi = 2.0\n",
        )
        .unwrap();
        let cfg: RunConfig = load_config(Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.strategy, StrategySpec::EntArcsine { lo: -2.0, hi: 2.0 });
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let cfg = RunConfig {
            max_batches: Some(3),
            ..RunConfig::default()
        };
        write_toml(&p, &cfg).unwrap();
        assert_eq!(load_config::<RunConfig>(Some(&p), &[]).unwrap(), cfg);
    }

    #[test]
    fn bad_inputs() {
        assert!(load_config::<RunConfig>(None, &["nokey".into()]).is_err());
        assert!(load_config::<RunConfig>(None, &["typo_field=1".into()]).is_err());
        assert!(load_config::<RunConfig>(None, &["env=cheetah".into()]).is_err());
        assert!(load_config::<RunConfig>(None, &["seed=1".into(), "seed.x=2".into()]).is_err());
        assert!(matches!(
            load_config::<RunConfig>(Some(Path::new("/nonexistent/c.toml")), &[]),
            Err(Error::Io { .. })
        ));
    }
}
