//! Builds a [`ProviderSet`] from a provider configuration file.
//!
//! Config shape: `{"providers": [{"name": "...", "kind": "...", "params": {...}}]}`.
//! The entry named `default` (or the first entry) serves AI calls with no
//! explicit model; every entry is also addressable by its name as a model
//! name, so `proxy` / `oracle` cascades map onto config entries directly.
//!
//! Kinds:
//!   scripted    params: {"path": "fixture.json"} — path relative to the config file
//!   synthetic   params: {"truth": {"key": bool, ...}, "p_correct": 0.85, "seed": 7}
//!   consistent  params: {"pairs": [["row text", "label"], ...]}
//!   http        params: {"endpoint": "...", "api_key_env": "SEMQL_API_KEY"} (feature `http`)

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use semql::exec::ProviderSet;
use semql::models::{
    load_provider_config, AccuracyProfile, ConsistentProvider, ModelRequest, ModelResponse,
    Provider, ProviderConfig, ProviderError, ProviderStats, ScriptedProvider,
    SyntheticBooleanProvider,
};

use crate::CliError;

/// Default provider when no config file is given: cheap-only queries work,
/// any AI call fails fatally (and the CLI exits with the provider code).
struct NoProvider;

impl Provider for NoProvider {
    fn invoke(&self, _req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        Err(ProviderError::fatal(
            "no provider configured; pass --providers FILE",
        ))
    }

    fn stats(&self) -> ProviderStats {
        ProviderStats::default()
    }
}

fn param_str(params: &serde_json::Value, key: &str) -> Result<String, String> {
    params
        .get(key)
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| format!("missing string param '{key}'"))
}

fn build_provider(
    cfg: &ProviderConfig,
    config_dir: &Path,
) -> Result<Arc<dyn Provider>, String> {
    match cfg.kind.as_str() {
        "scripted" => {
            let rel = param_str(&cfg.params, "path")?;
            let path = if Path::new(&rel).is_absolute() {
                rel.into()
            } else {
                config_dir.join(rel)
            };
            let p = ScriptedProvider::from_path(&path).map_err(|e| e.to_string())?;
            Ok(Arc::new(p))
        }
        "synthetic" => {
            let truth: BTreeMap<String, bool> = match cfg.params.get("truth") {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| format!("bad 'truth' map: {e}"))?,
                None => BTreeMap::new(),
            };
            let p_correct = cfg
                .params
                .get("p_correct")
                .and_then(|v| v.as_f64())
                .unwrap_or(1.0);
            let seed = cfg.params.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
            let profile = if p_correct >= 1.0 {
                AccuracyProfile::oracle()
            } else {
                AccuracyProfile::proxy(p_correct)
            };
            Ok(Arc::new(SyntheticBooleanProvider::new(truth, profile, seed)))
        }
        "consistent" => {
            let pairs: Vec<(String, String)> = match cfg.params.get("pairs") {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| format!("bad 'pairs' list: {e}"))?,
                None => return Err("missing 'pairs' param".into()),
            };
            Ok(Arc::new(ConsistentProvider::new(pairs)))
        }
        #[cfg(feature = "http")]
        "http" => {
            let endpoint = param_str(&cfg.params, "endpoint")?;
            let key_env = cfg
                .params
                .get("api_key_env")
                .and_then(|v| v.as_str());
            Ok(Arc::new(semql::models::http::HttpProvider::new(
                &endpoint, key_env,
            )))
        }
        #[cfg(not(feature = "http"))]
        "http" => Err("provider kind 'http' requires the 'http' build feature".into()),
        other => Err(format!("unknown provider kind '{other}'")),
    }
}

pub fn build_provider_set(config_path: Option<&Path>) -> Result<ProviderSet, CliError> {
    let Some(path) = config_path else {
        return Ok(ProviderSet::single(Arc::new(NoProvider)));
    };
    let file = load_provider_config(path)
        .map_err(|e| CliError::Sql(format!("provider config {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    build_set_from_entries(&file.providers, dir)
}

/// Builds a set from already-parsed entries (used by bench scenarios that
/// embed their providers inline).
pub fn build_set_from_entries(
    entries: &[ProviderConfig],
    dir: &Path,
) -> Result<ProviderSet, CliError> {
    if entries.is_empty() {
        return Err(CliError::Sql("provider list is empty".into()));
    }
    let mut built: Vec<(String, Arc<dyn Provider>)> = Vec::new();
    for cfg in entries {
        let provider = build_provider(cfg, dir)
            .map_err(|e| CliError::Sql(format!("provider '{}': {e}", cfg.name)))?;
        built.push((cfg.name.clone(), provider));
    }
    let default_idx = built
        .iter()
        .position(|(name, _)| name == "default")
        .unwrap_or(0);
    let mut set = ProviderSet::single(built[default_idx].1.clone());
    for (name, provider) in &built {
        set = set.with_model(name, provider.clone());
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use semql::models::TaskKind;

    #[test]
    fn missing_config_yields_failing_default() {
        let set = build_provider_set(None).unwrap();
        let req = ModelRequest::new(TaskKind::FilterBool, "default", "anything");
        let err = set.get("default").invoke(&req).unwrap_err();
        assert!(!err.retryable);
    }

    #[test]
    fn config_entries_become_named_models() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("providers.json");
        std::fs::write(
            &path,
            r#"{"providers": [
                {"name": "default", "kind": "consistent",
                 "params": {"pairs": [["row one", "alpha"]]}},
                {"name": "oracle", "kind": "synthetic",
                 "params": {"truth": {"row one": true}, "seed": 3}}
            ]}"#,
        )
        .unwrap();
        let set = build_provider_set(Some(&path)).unwrap();
        let req = ModelRequest::new(TaskKind::FilterBool, "oracle", "row one please");
        let resp = set.get("oracle").invoke(&req).unwrap();
        assert_eq!(resp.bool_value, Some(true));
        assert_eq!(resp.confidence, Some(1.0));
        let req = ModelRequest::new(TaskKind::FilterBool, "default", "row one alpha");
        assert_eq!(set.get("default").invoke(&req).unwrap().bool_value, Some(true));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("providers.json");
        std::fs::write(
            &path,
            r#"{"providers": [{"name": "x", "kind": "quantum", "params": {}}]}"#,
        )
        .unwrap();
        assert!(build_provider_set(Some(&path)).is_err());
    }
}
