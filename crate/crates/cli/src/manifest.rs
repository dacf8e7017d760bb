use std::time::{SystemTime, UNIX_EPOCH};

use lttd_core::federated::{parse_topology, Topology};
use lttd_core::RunConfig;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("LTTD_VERSION");

/// Everything needed to rerun a training job. The topology is embedded so
/// the manifest stays valid when the original file moves or changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub seed: u64,
    pub topology: String,
    pub topology_text: String,
    pub config: RunConfig,
    /// `config` in the config file format.
    pub config_text: String,
}

impl RunManifest {
    pub fn new(config: &RunConfig, topology: &Topology) -> Self {
        let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            version: VERSION.to_string(),
            started_at,
            seed: config.train.seed,
            topology: topology.name.clone(),
            topology_text: topology.to_text(),
            config: config.clone(),
            config_text: config.to_text(),
        }
    }

    pub fn topology(&self) -> anyhow::Result<Topology> {
        Ok(parse_topology(&self.topology_text, &self.topology)?)
    }

    /// The config, checked against its text form.
    pub fn resolved_config(&self) -> anyhow::Result<RunConfig> {
        let parsed = RunConfig::parse(&self.config_text)?;
        anyhow::ensure!(parsed == self.config, "manifest config and config_text disagree");
        Ok(parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_json_and_config_text() {
        let cfg = RunConfig::default();
        let topo = Topology::ring(4).unwrap();
        let m = RunManifest::new(&cfg, &topo);
        let json = serde_json::to_string_pretty(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolved_config().unwrap(), cfg);
        assert_eq!(back.topology().unwrap(), topo);
    }
}
