use std::path::Path;

use fpauth::experiment::ExperimentSpec;
use fpauth::mapping::{Feature, MappingConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// On-disk configuration. Every table is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Shorthand for the enabled features at their default radices.
    pub features: Option<Vec<Feature>>,
    pub experiment: ExperimentSpec,
    pub service: ServiceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub addr: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            addr: "127.0.0.1:7878".into(),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            features: None,
            experiment: ExperimentSpec::default(),
            service: ServiceSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, String> {
        let mut config: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        if config.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            ));
        }
        if let Some(features) = &config.features {
            config.experiment.mapping =
                MappingConfig::with_features(config.experiment.auth.total_num, features)
                    .map_err(|e| e.to_string())?;
        }
        config.experiment.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::parse("version = 1").unwrap(), Config::default());
    }

    #[test]
    fn partial_tables_and_feature_shorthand() {
        let c = Config::parse(
            r#"
            version = 1
            features = ["RtcFre", "Sram"]
            [experiment]
            count = 4
            trials = 200
            [experiment.auth]
            accept_num = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.experiment.count, 4);
        assert_eq!(c.experiment.auth.accept_num, 2);
        assert_eq!(c.experiment.auth.used_num, 5);
        assert_eq!(c.experiment.mapping.enabled_specs.len(), 2);
    }

    #[test]
    fn rejects_bad_versions_and_keys() {
        assert!(Config::parse("version = 2").is_err());
        assert!(Config::parse("version = 1\ncolour = 3").is_err());
        assert!(Config::parse("version = 1\n[experiment.auth]\naccept_num = 9").is_err());
    }
}
