use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::object::TransmissionStrategy;

/// Fixed placement, or `Auto` to let the decision engine choose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StrategyChoice {
    #[default]
    Auto,
    Local,
    Remote(TransmissionStrategy),
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => StrategyChoice::Auto,
            "local" => StrategyChoice::Local,
            "eager" => StrategyChoice::Remote(TransmissionStrategy::Eager),
            "lazy" => StrategyChoice::Remote(TransmissionStrategy::Lazy),
            "pipelined" => StrategyChoice::Remote(TransmissionStrategy::Pipelined),
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy {other:?} (auto, local, eager, lazy, pipelined)"
                )))
            }
        })
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyChoice::Auto => f.write_str("auto"),
            StrategyChoice::Local => f.write_str("local"),
            StrategyChoice::Remote(s) => f.write_str(s.name()),
        }
    }
}

/// Client run configuration.
///
/// Read from a TOML file whose keys are all optional:
///
/// ```toml
/// server = "127.0.0.1:7070"     # host:port of the offload server
/// cache_enabled = true          # elide objects the server already caches
/// static_roots = ["detector"]   # named statics always shipped with a task
/// timeout = 10.0                # base remote timeout in seconds
/// strategy = "auto"             # auto | local | eager | lazy | pipelined
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub server: Option<String>,
    pub cache_enabled: bool,
    pub static_roots: Vec<String>,
    pub timeout: f64,
    pub strategy: StrategyChoice,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            server: None,
            cache_enabled: false,
            static_roots: Vec::new(),
            timeout: 10.0,
            strategy: StrategyChoice::Auto,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    server: Option<String>,
    cache_enabled: Option<bool>,
    static_roots: Option<Vec<String>>,
    timeout: Option<f64>,
    strategy: Option<String>,
}

impl ClientConfig {
    pub fn from_toml_str(text: &str) -> Result<ClientConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let d = ClientConfig::default();
        let timeout = raw.timeout.unwrap_or(d.timeout);
        if !(timeout > 0.0) {
            return Err(Error::Config(format!("timeout must be positive, got {timeout}")));
        }
        Ok(ClientConfig {
            server: raw.server,
            cache_enabled: raw.cache_enabled.unwrap_or(d.cache_enabled),
            static_roots: raw.static_roots.unwrap_or_default(),
            timeout,
            strategy: match raw.strategy {
                Some(s) => s.parse()?,
                None => d.strategy,
            },
        })
    }

    pub fn load(path: &Path) -> Result<ClientConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let c = ClientConfig::from_toml_str(
            "server = \"10.0.0.2:7070\"\ncache_enabled = true\nstatic_roots = [\"a\", \"b\"]\ntimeout = 3.5\nstrategy = \"lazy\"\n",
        )
        .unwrap();
        assert_eq!(c.server.as_deref(), Some("10.0.0.2:7070"));
        assert!(c.cache_enabled);
        assert_eq!(c.static_roots, vec!["a", "b"]);
        assert_eq!(c.timeout, 3.5);
        assert_eq!(c.strategy, StrategyChoice::Remote(TransmissionStrategy::Lazy));
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ClientConfig::from_toml_str("").unwrap(), ClientConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ClientConfig::from_toml_str("strategy = \"fast\"").is_err());
        assert!(ClientConfig::from_toml_str("timeout = 0").is_err());
        assert!(ClientConfig::from_toml_str("colour = 1").is_err());
    }
}
