use std::path::{Path, PathBuf};

use clap::ValueEnum;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7749";
pub const CONFIG_ENV: &str = "MEMGRAIN_CONFIG";
pub const URL_ENV: &str = "MEMGRAIN_URL";
pub const OUTPUT_ENV: &str = "MEMGRAIN_OUTPUT";
pub const NAMESPACE_ENV: &str = "MEMGRAIN_NAMESPACE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Table,
    Json,
}

impl std::str::FromStr for Output {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Output as ValueEnum>::from_str(s, true).map_err(|_| format!("output must be `table` or `json`, got `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub server_url: String,
    pub token: Option<String>,
    pub output: Output,
    pub namespace: Option<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig { server_url: DEFAULT_SERVER.into(), token: None, output: Output::Table, namespace: None }
    }
}

/// Values that may come from any layer; `None` leaves the lower layer alone.
#[derive(Debug, Default, Clone)]
pub struct Layer {
    pub server_url: Option<String>,
    pub token: Option<String>,
    pub output: Option<Output>,
    pub namespace: Option<String>,
}

impl CliConfig {
    pub fn apply(&mut self, layer: Layer) {
        if let Some(v) = layer.server_url {
            self.server_url = v;
        }
        if layer.token.is_some() {
            self.token = layer.token;
        }
        if let Some(v) = layer.output {
            self.output = v;
        }
        if layer.namespace.is_some() {
            self.namespace = layer.namespace;
        }
    }

    /// Defaults, then the config file, then env, then `flags`.
    pub fn resolve(env: &dyn Fn(&str) -> Option<String>, flags: Layer) -> Result<CliConfig, String> {
        let mut cfg = CliConfig::default();
        if let Some(path) = config_path(env) {
            if path.exists() {
                cfg.apply(file_layer(&path)?);
            }
        }
        cfg.apply(env_layer(env)?);
        cfg.apply(flags);
        Ok(cfg)
    }
}

fn config_path(env: &dyn Fn(&str) -> Option<String>) -> Option<PathBuf> {
    env(CONFIG_ENV).map(PathBuf::from).or_else(|| env("HOME").map(|h| Path::new(&h).join(".memgrain.toml")))
}

/// Reads `key = value` pairs: `server_url`, `token`, `output`, `namespace`.
pub fn file_layer(path: &Path) -> Result<Layer, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let mut layer = Layer::default();
    for (key, value) in table {
        let s = value.as_str().ok_or_else(|| format!("{}: `{key}` must be a string", path.display()))?.to_string();
        match key.as_str() {
            "server_url" => layer.server_url = Some(s),
            "token" => layer.token = Some(s),
            "output" => layer.output = Some(s.parse()?),
            "namespace" => layer.namespace = Some(s),
            _ => return Err(format!("{}: unknown key `{key}`", path.display())),
        }
    }
    Ok(layer)
}

fn env_layer(env: &dyn Fn(&str) -> Option<String>) -> Result<Layer, String> {
    let var = |k: &str| env(k).filter(|v| !v.is_empty());
    Ok(Layer {
        server_url: var(URL_ENV),
        token: var(memgrain_service::TOKEN_ENV),
        output: var(OUTPUT_ENV).map(|o| o.parse()).transpose()?,
        namespace: var(NAMESPACE_ENV),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(&file, "server_url = \"http://file:1\"\nnamespace = \"from-file\"\noutput = \"json\"\n").unwrap();
        let vars: HashMap<&str, String> = [
            (CONFIG_ENV, file.display().to_string()),
            (URL_ENV, "http://env:2".to_string()),
            (memgrain_service::TOKEN_ENV, "tok".to_string()),
        ]
        .into();
        let env = |k: &str| vars.get(k).cloned();
        let cfg = CliConfig::resolve(&env, Layer::default()).unwrap();
        assert_eq!(cfg.server_url, "http://env:2");
        assert_eq!(cfg.namespace.as_deref(), Some("from-file"));
        assert_eq!(cfg.output, Output::Json);
        assert_eq!(cfg.token.as_deref(), Some("tok"));
        let flags = Layer { server_url: Some("http://flag:3".into()), output: Some(Output::Table), ..Layer::default() };
        let cfg = CliConfig::resolve(&env, flags).unwrap();
        assert_eq!((cfg.server_url.as_str(), cfg.output), ("http://flag:3", Output::Table));
    }

    #[test]
    fn bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(&file, "colour = \"red\"\n").unwrap();
        assert!(file_layer(&file).unwrap_err().contains("unknown key `colour`"));
        std::fs::write(&file, "output = \"yaml\"\n").unwrap();
        assert!(file_layer(&file).is_err());
    }

    #[test]
    fn missing_file_means_defaults() {
        let env = |k: &str| (k == CONFIG_ENV).then(|| "/nonexistent/memgrain.toml".to_string());
        assert_eq!(CliConfig::resolve(&env, Layer::default()).unwrap(), CliConfig::default());
    }
}
