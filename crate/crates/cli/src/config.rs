//! Config files and flag overrides. Flags win over file values, which win
//! over built-in defaults.

use std::path::Path;

use anyhow::Result;
use dnetreg::{Family, FitOptions};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::{usage, FitFlags};

/// Parses a JSON config, or the default when no file is given. The raw JSON
/// is returned too so callers can tell which keys were set explicitly.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Value)> {
    let Some(path) = path else {
        return Ok((T::default(), Value::Null));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let raw: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let parsed = serde_json::from_value(raw.clone()).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok((parsed, raw))
}

pub fn has_key(raw: &Value, pointer: &str) -> bool {
    raw.pointer(pointer).is_some()
}

pub fn family(s: &str) -> Result<Family> {
    s.parse().map_err(|e| usage(format!("{e}")))
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Fit options from `--config` and the shared fit flags.
pub fn fit_options(flags: &FitFlags) -> Result<FitOptions> {
    let (mut opts, _): (FitOptions, _) = load(flags.config.as_deref())?;
    set(&mut opts.basis_dim, flags.basis_dim);
    set(&mut opts.degree, flags.degree);
    set(&mut opts.max_outer_iters, flags.max_outer_iters);
    set(&mut opts.outer_tol, flags.outer_tol);
    set(&mut opts.seed, flags.seed);
    Ok(opts)
}

/// The family flag if given, otherwise the dataset's own.
pub fn family_or(flag: Option<&str>, data_family: Family) -> Result<Family> {
    flag.map_or(Ok(data_family), family)
}

/// Stochastic commands refuse to run without an explicit seed.
pub fn require_seed(flag: Option<u64>, in_file: bool, command: &str) -> Result<()> {
    if flag.is_none() && !in_file {
        return Err(usage(format!("{command} needs --seed (or a seed in its config file)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        std::fs::write(&path, r#"{"basis_dim": 6, "degree": 2}"#).unwrap();
        let flags = FitFlags {
            config: Some(path),
            family: None,
            basis_dim: Some(9),
            degree: None,
            max_outer_iters: None,
            outer_tol: None,
            seed: None,
        };
        let opts = fit_options(&flags).unwrap();
        assert_eq!(opts.basis_dim, 9);
        assert_eq!(opts.degree, 2);
        assert_eq!(opts.max_outer_iters, FitOptions::default().max_outer_iters);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = load::<FitOptions>(Some(&path)).unwrap_err();
        assert!(err.is::<crate::UsageError>());
    }

    #[test]
    fn seed_required_unless_in_file() {
        assert!(require_seed(None, false, "x").unwrap_err().is::<crate::UsageError>());
        assert!(require_seed(None, true, "x").is_ok());
        assert!(require_seed(Some(1), false, "x").is_ok());
    }
}
