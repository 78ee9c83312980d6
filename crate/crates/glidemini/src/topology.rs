//! Declarative 3-node topology: one JSON document describes the ce,
//! factory, and frontend services (hostnames under a fictitious domain,
//! ports, and per-service knobs) plus the secret directory and run mode.
//! Workload files describe job batches for simulation and smoke tests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ce::{CeService, NodeDescriptor, DEFAULT_CE_CYCLE_MS, DEFAULT_STARTUP_DELAY_MS};
use crate::factory::{FactoryService, DEFAULT_FACTORY_CYCLE_MS};
use crate::frontend::{
    FrontendService, KnownEntry, RequestPolicy, DEFAULT_FRONTEND_CYCLE_MS, DEFAULT_TOKEN_TTL_MS,
};
use crate::glidein::{
    GlideinParams, DEFAULT_IDLE_TIMEOUT_MS, DEFAULT_MAX_LIFETIME_MS, DEFAULT_POLL_PERIOD_MS,
};
use crate::mailbox::DEFAULT_REQUEST_TTL_MS;
use crate::model::{secs_to_ms, EntryDescriptor, ResourceSpec, TimeMs};
use crate::pool::{PoolState, DEFAULT_AD_LIFETIME_MS, DEFAULT_NEGOTIATION_PERIOD_MS};

pub const DEFAULT_DOMAIN: &str = "glideinwms.org";

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid topology:\n{}", violations.join("\n"))]
    Validation { violations: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sim,
    Procs,
}

// --- raw file shapes -------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    domain: Option<String>,
    mode: Mode,
    secret_dir: Option<String>,
    seed: Option<u64>,
    services: RawServices,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServices {
    ce: RawService<RawCeConfig>,
    factory: RawService<RawFactoryConfig>,
    frontend: RawService<RawFrontendConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawService<C> {
    hostname: String,
    port: u16,
    config: C,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCeConfig {
    #[serde(default = "default_ce_cycle_s")]
    cycle_period_s: f64,
    #[serde(default = "default_startup_delay_s")]
    startup_delay_s: f64,
    #[serde(default)]
    validation_failure_prob: f64,
    nodes: Vec<RawNode>,
    #[serde(default)]
    glidein: RawGlideinConfig,
    /// Token audience; defaults to the CE hostname.
    audience: Option<String>,
}

fn default_ce_cycle_s() -> f64 {
    DEFAULT_CE_CYCLE_MS as f64 / 1000.0
}
fn default_startup_delay_s() -> f64 {
    DEFAULT_STARTUP_DELAY_MS as f64 / 1000.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    node_id: String,
    actual: ResourceSpec,
    /// Defaults to `actual`; advertising more is the fake-resources option.
    advertised: Option<ResourceSpec>,
}

#[derive(Debug, Deserialize)]
struct RawGlideinConfig {
    #[serde(default = "default_lifetime_s")]
    max_lifetime_s: f64,
    #[serde(default = "default_idle_timeout_s")]
    idle_timeout_s: f64,
    #[serde(default = "default_poll_period_s")]
    poll_period_s: f64,
}

impl Default for RawGlideinConfig {
    fn default() -> Self {
        Self {
            max_lifetime_s: default_lifetime_s(),
            idle_timeout_s: default_idle_timeout_s(),
            poll_period_s: default_poll_period_s(),
        }
    }
}

fn default_lifetime_s() -> f64 {
    DEFAULT_MAX_LIFETIME_MS as f64 / 1000.0
}
fn default_idle_timeout_s() -> f64 {
    DEFAULT_IDLE_TIMEOUT_MS as f64 / 1000.0
}
fn default_poll_period_s() -> f64 {
    DEFAULT_POLL_PERIOD_MS as f64 / 1000.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFactoryConfig {
    #[serde(default = "default_factory_cycle_s")]
    cycle_period_s: f64,
    #[serde(default = "default_request_ttl_s")]
    request_ttl_s: f64,
    entries: Vec<RawEntry>,
}

fn default_factory_cycle_s() -> f64 {
    DEFAULT_FACTORY_CYCLE_MS as f64 / 1000.0
}
fn default_request_ttl_s() -> f64 {
    DEFAULT_REQUEST_TTL_MS as f64 / 1000.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    entry_id: String,
    max_pressure: u64,
    max_submit_per_cycle: u64,
    /// Defaults to just the configured frontend client.
    trusted_clients: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrontendConfig {
    client_id: String,
    #[serde(default = "default_frontend_cycle_s")]
    cycle_period_s: f64,
    max_pressure_per_entry: u64,
    #[serde(default = "default_total_max")]
    total_max_glideins: u64,
    #[serde(default = "default_total_curb")]
    total_curb_glideins: u64,
    #[serde(default = "default_expansion")]
    expansion_factor: f64,
    #[serde(default = "default_token_ttl_s")]
    token_ttl_s: f64,
    #[serde(default)]
    pool: RawPoolConfig,
}

fn default_frontend_cycle_s() -> f64 {
    DEFAULT_FRONTEND_CYCLE_MS as f64 / 1000.0
}
fn default_total_max() -> u64 {
    100
}
fn default_total_curb() -> u64 {
    50
}
fn default_expansion() -> f64 {
    1.0
}
fn default_token_ttl_s() -> f64 {
    DEFAULT_TOKEN_TTL_MS as f64 / 1000.0
}

#[derive(Debug, Deserialize)]
struct RawPoolConfig {
    #[serde(default = "default_negotiation_s")]
    negotiation_period_s: f64,
    #[serde(default = "default_ad_lifetime_s")]
    ad_lifetime_s: f64,
}

impl Default for RawPoolConfig {
    fn default() -> Self {
        Self {
            negotiation_period_s: default_negotiation_s(),
            ad_lifetime_s: default_ad_lifetime_s(),
        }
    }
}

fn default_negotiation_s() -> f64 {
    DEFAULT_NEGOTIATION_PERIOD_MS as f64 / 1000.0
}
fn default_ad_lifetime_s() -> f64 {
    DEFAULT_AD_LIFETIME_MS as f64 / 1000.0
}

// --- validated configuration ----------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ServiceEndpoint {
    pub hostname: String,
    pub port: u16,
}

impl ServiceEndpoint {
    pub fn address(&self) -> String {
        format!("{}:{}", self.hostname, self.port)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CeSettings {
    pub endpoint: ServiceEndpoint,
    pub audience: String,
    pub cycle_period_ms: TimeMs,
    pub startup_delay_ms: TimeMs,
    pub validation_failure_prob: f64,
    pub nodes: Vec<NodeDescriptor>,
    pub glidein_params: GlideinParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorySettings {
    pub endpoint: ServiceEndpoint,
    pub cycle_period_ms: TimeMs,
    pub request_ttl_ms: TimeMs,
    pub entries: Vec<EntryDescriptor>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontendSettings {
    pub endpoint: ServiceEndpoint,
    pub client_id: String,
    pub cycle_period_ms: TimeMs,
    pub token_ttl_ms: TimeMs,
    pub policy: RequestPolicy,
    pub negotiation_period_ms: TimeMs,
    pub ad_lifetime_ms: TimeMs,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopologyConfig {
    pub domain: String,
    pub mode: Mode,
    pub secret_dir: PathBuf,
    pub seed: Option<u64>,
    pub ce: CeSettings,
    pub factory: FactorySettings,
    pub frontend: FrontendSettings,
}

impl TopologyConfig {
    /// Digest identifying this configuration; part of every run's identity.
    pub fn digest(&self) -> String {
        use sha2::Digest;
        let bytes = crate::canonical::canonical_bytes(self);
        hex::encode(&sha2::Sha256::digest(&bytes)[..8])
    }

    /// Entries as the frontend sees them: id, what the entry's nodes
    /// advertise, and where to publish requests.
    pub fn known_entries(&self) -> Vec<KnownEntry> {
        let node_advertised =
            self.ce.nodes.first().map(|n| n.advertised).unwrap_or(ResourceSpec::zero());
        self.factory
            .entries
            .iter()
            .map(|e| KnownEntry {
                entry_id: e.entry_id.clone(),
                node_advertised,
                mailbox_addr: self.factory.endpoint.address(),
                ce_audience: e.audience.clone(),
            })
            .collect()
    }

    /// The pool's token audience: the frontend host, which doubles as the
    /// access point.
    pub fn pool_audience(&self) -> String {
        self.frontend.endpoint.hostname.clone()
    }

    pub fn build_ce(&self) -> CeService {
        CeService::new(
            &self.ce.audience,
            self.ce.nodes.clone(),
            self.ce.cycle_period_ms,
            self.ce.startup_delay_ms,
            self.ce.validation_failure_prob,
            self.ce.glidein_params,
        )
    }

    pub fn build_factory(&self) -> FactoryService {
        FactoryService::new(
            self.factory.entries.clone(),
            self.factory.cycle_period_ms,
            self.factory.request_ttl_ms,
        )
    }

    pub fn build_frontend(&self) -> FrontendService {
        FrontendService::new(
            &self.frontend.client_id,
            self.known_entries(),
            self.frontend.policy,
            self.frontend.cycle_period_ms,
            self.frontend.token_ttl_ms,
        )
    }

    pub fn build_pool(&self) -> PoolState {
        PoolState::new(
            &self.pool_audience(),
            self.frontend.negotiation_period_ms,
            self.frontend.ad_lifetime_ms,
        )
    }
}

/// Parse and validate a topology document.
pub fn parse_topology(path: &Path) -> Result<TopologyConfig, TopologyError> {
    let text = fs::read_to_string(path)
        .map_err(|source| TopologyError::Io { path: path.to_path_buf(), source })?;
    parse_topology_str(&text)
}

pub fn parse_topology_str(text: &str) -> Result<TopologyConfig, TopologyError> {
    let raw: RawTopology =
        serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
    let mut violations = Vec::new();
    let domain = raw.domain.unwrap_or_else(|| DEFAULT_DOMAIN.to_string());

    let hosts = [
        ("services.ce", &raw.services.ce.hostname, raw.services.ce.port),
        ("services.factory", &raw.services.factory.hostname, raw.services.factory.port),
        ("services.frontend", &raw.services.frontend.hostname, raw.services.frontend.port),
    ];
    let suffix = format!(".{domain}");
    for (path, hostname, _) in &hosts {
        if !hostname.ends_with(&suffix) {
            violations.push(format!(
                "{path}.hostname: {hostname:?} does not end with {suffix:?}"
            ));
        }
    }
    for i in 0..hosts.len() {
        for j in (i + 1)..hosts.len() {
            if hosts[i].1 == hosts[j].1 {
                violations.push(format!(
                    "{}.hostname and {}.hostname: duplicate hostname {:?}",
                    hosts[i].0, hosts[j].0, hosts[i].1
                ));
            }
            if hosts[i].2 == hosts[j].2 {
                violations.push(format!(
                    "{}.port and {}.port: duplicate port {}",
                    hosts[i].0, hosts[j].0, hosts[i].2
                ));
            }
        }
    }

    let ce_raw = &raw.services.ce.config;
    if ce_raw.nodes.is_empty() {
        violations.push("services.ce.config.nodes: at least one node required".into());
    }
    let mut node_ids = BTreeSet::new();
    for (i, node) in ce_raw.nodes.iter().enumerate() {
        if !node_ids.insert(node.node_id.clone()) {
            violations.push(format!(
                "services.ce.config.nodes[{i}].node_id: duplicate {:?}",
                node.node_id
            ));
        }
    }
    if !(0.0..=1.0).contains(&ce_raw.validation_failure_prob) {
        violations.push(format!(
            "services.ce.config.validation_failure_prob: {} outside [0, 1]",
            ce_raw.validation_failure_prob
        ));
    }
    for (name, value) in [
        ("services.ce.config.cycle_period_s", ce_raw.cycle_period_s),
        ("services.ce.config.startup_delay_s", ce_raw.startup_delay_s),
        ("services.factory.config.cycle_period_s", raw.services.factory.config.cycle_period_s),
        ("services.factory.config.request_ttl_s", raw.services.factory.config.request_ttl_s),
        ("services.frontend.config.cycle_period_s", raw.services.frontend.config.cycle_period_s),
        ("services.frontend.config.token_ttl_s", raw.services.frontend.config.token_ttl_s),
        (
            "services.frontend.config.pool.negotiation_period_s",
            raw.services.frontend.config.pool.negotiation_period_s,
        ),
        ("services.ce.config.glidein.poll_period_s", ce_raw.glidein.poll_period_s),
    ] {
        if value <= 0.0 {
            violations.push(format!("{name}: must be positive, got {value}"));
        }
    }

    let factory_raw = &raw.services.factory.config;
    if factory_raw.entries.is_empty() {
        violations.push("services.factory.config.entries: at least one entry required".into());
    }
    let mut entry_ids = BTreeSet::new();
    for (i, entry) in factory_raw.entries.iter().enumerate() {
        let at = format!("services.factory.config.entries[{i}]");
        if !entry_ids.insert(entry.entry_id.clone()) {
            violations.push(format!("{at}.entry_id: duplicate {:?}", entry.entry_id));
        }
        if entry.max_pressure < 1 {
            violations.push(format!("{at}.max_pressure: must be >= 1"));
        }
        if entry.max_submit_per_cycle < 1 {
            violations.push(format!("{at}.max_submit_per_cycle: must be >= 1"));
        }
    }

    let fe_raw = &raw.services.frontend.config;
    if fe_raw.total_curb_glideins > fe_raw.total_max_glideins {
        violations.push(format!(
            "services.frontend.config.total_curb_glideins: {} exceeds total_max_glideins {}",
            fe_raw.total_curb_glideins, fe_raw.total_max_glideins
        ));
    }
    if fe_raw.expansion_factor <= 0.0 {
        violations.push(format!(
            "services.frontend.config.expansion_factor: must be positive, got {}",
            fe_raw.expansion_factor
        ));
    }

    if !violations.is_empty() {
        return Err(TopologyError::Validation { violations });
    }

    let ce_endpoint = ServiceEndpoint {
        hostname: raw.services.ce.hostname.clone(),
        port: raw.services.ce.port,
    };
    let ce_audience =
        ce_raw.audience.clone().unwrap_or_else(|| raw.services.ce.hostname.clone());
    let ce = CeSettings {
        endpoint: ce_endpoint.clone(),
        audience: ce_audience.clone(),
        cycle_period_ms: secs_to_ms(ce_raw.cycle_period_s),
        startup_delay_ms: secs_to_ms(ce_raw.startup_delay_s),
        validation_failure_prob: ce_raw.validation_failure_prob,
        nodes: ce_raw
            .nodes
            .iter()
            .map(|n| NodeDescriptor {
                node_id: n.node_id.clone(),
                actual: n.actual,
                advertised: n.advertised.unwrap_or(n.actual),
                occupant: None,
            })
            .collect(),
        glidein_params: GlideinParams {
            max_lifetime_ms: secs_to_ms(ce_raw.glidein.max_lifetime_s),
            idle_timeout_ms: secs_to_ms(ce_raw.glidein.idle_timeout_s),
            poll_period_ms: secs_to_ms(ce_raw.glidein.poll_period_s),
        },
    };

    let default_trusted = vec![fe_raw.client_id.clone()];
    let factory = FactorySettings {
        endpoint: ServiceEndpoint {
            hostname: raw.services.factory.hostname.clone(),
            port: raw.services.factory.port,
        },
        cycle_period_ms: secs_to_ms(factory_raw.cycle_period_s),
        request_ttl_ms: secs_to_ms(factory_raw.request_ttl_s),
        entries: factory_raw
            .entries
            .iter()
            .map(|e| EntryDescriptor {
                entry_id: e.entry_id.clone(),
                ce_address: ce_endpoint.address(),
                audience: ce_audience.clone(),
                max_pressure: e.max_pressure,
                max_submit_per_cycle: e.max_submit_per_cycle,
                trusted_clients: e.trusted_clients.clone().unwrap_or_else(|| default_trusted.clone()),
            })
            .collect(),
    };

    let frontend = FrontendSettings {
        endpoint: ServiceEndpoint {
            hostname: raw.services.frontend.hostname.clone(),
            port: raw.services.frontend.port,
        },
        client_id: fe_raw.client_id.clone(),
        cycle_period_ms: secs_to_ms(fe_raw.cycle_period_s),
        token_ttl_ms: secs_to_ms(fe_raw.token_ttl_s),
        policy: RequestPolicy {
            max_pressure_per_entry: fe_raw.max_pressure_per_entry,
            total_max_glideins: fe_raw.total_max_glideins,
            total_curb_glideins: fe_raw.total_curb_glideins,
            expansion_factor: fe_raw.expansion_factor,
        },
        negotiation_period_ms: secs_to_ms(fe_raw.pool.negotiation_period_s),
        ad_lifetime_ms: secs_to_ms(fe_raw.pool.ad_lifetime_s),
    };

    Ok(TopologyConfig {
        domain,
        mode: raw.mode,
        secret_dir: PathBuf::from(raw.secret_dir.unwrap_or_else(|| "./secrets".to_string())),
        seed: raw.seed,
        ce,
        factory,
        frontend,
    })
}

// --- workloads -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub submit_time_s: f64,
    pub count: u64,
    pub requirements: ResourceSpec,
    pub runtime_s: f64,
    #[serde(default)]
    pub fail: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub jobs: Vec<WorkloadItem>,
}

impl WorkloadSpec {
    pub fn total_jobs(&self) -> u64 {
        self.jobs.iter().map(|item| item.count).sum()
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid workload:\n{}", violations.join("\n"))]
    Validation { violations: Vec<String> },
}

pub fn parse_workload(path: &Path) -> Result<WorkloadSpec, WorkloadError> {
    let text = fs::read_to_string(path)
        .map_err(|source| WorkloadError::Io { path: path.to_path_buf(), source })?;
    parse_workload_str(&text)
}

pub fn parse_workload_str(text: &str) -> Result<WorkloadSpec, WorkloadError> {
    let spec: WorkloadSpec =
        serde_json::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))?;
    let mut violations = Vec::new();
    for (i, item) in spec.jobs.iter().enumerate() {
        if item.submit_time_s < 0.0 {
            violations.push(format!("jobs[{i}].submit_time_s: must be >= 0"));
        }
        if item.count < 1 {
            violations.push(format!("jobs[{i}].count: must be >= 1"));
        }
        if item.runtime_s <= 0.0 {
            violations.push(format!("jobs[{i}].runtime_s: must be positive"));
        }
    }
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(WorkloadError::Validation { violations })
    }
}

/// The built-in smoke workload: ten small jobs at t=0.
pub fn smoke_workload() -> WorkloadSpec {
    WorkloadSpec {
        jobs: vec![WorkloadItem {
            submit_time_s: 0.0,
            count: 10,
            requirements: ResourceSpec::new(1, 1024, 0, 0),
            runtime_s: 10.0,
            fail: false,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "mode": "sim",
            "secret_dir": "./secrets",
            "services": {
                "ce": {
                    "hostname": "ce-1.glideinwms.org",
                    "port": 19620,
                    "config": {
                        "nodes": [
                            {"node_id": "node-0", "actual": {"cores": 8, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}},
                            {"node_id": "node-1", "actual": {"cores": 8, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}}
                        ]
                    }
                },
                "factory": {
                    "hostname": "factory-1.glideinwms.org",
                    "port": 19619,
                    "config": {
                        "entries": [
                            {"entry_id": "entry-ce-1", "max_pressure": 8, "max_submit_per_cycle": 4}
                        ]
                    }
                },
                "frontend": {
                    "hostname": "frontend-1.glideinwms.org",
                    "port": 19618,
                    "config": {
                        "client_id": "frontend-1",
                        "max_pressure_per_entry": 8
                    }
                }
            }
        })
    }

    #[test]
    fn minimal_topology_parses_with_defaults() {
        let topo = parse_topology_str(&minimal_json().to_string()).unwrap();
        assert_eq!(topo.domain, DEFAULT_DOMAIN);
        assert_eq!(topo.mode, Mode::Sim);
        assert_eq!(topo.ce.nodes.len(), 2);
        assert_eq!(topo.ce.nodes[0].advertised, topo.ce.nodes[0].actual);
        assert_eq!(topo.factory.entries[0].ce_address, "ce-1.glideinwms.org:19620");
        assert_eq!(topo.factory.entries[0].audience, "ce-1.glideinwms.org");
        assert_eq!(topo.factory.entries[0].trusted_clients, vec!["frontend-1".to_string()]);
        assert_eq!(topo.frontend.policy.total_curb_glideins, 50);
        let entries = topo.known_entries();
        assert_eq!(entries[0].node_advertised.cores, 8);
    }

    #[test]
    fn duplicate_port_names_both_services() {
        let mut doc = minimal_json();
        doc["services"]["factory"]["port"] = serde_json::json!(19620);
        let err = parse_topology_str(&doc.to_string()).unwrap_err();
        match err {
            TopologyError::Validation { violations } => {
                assert!(violations.iter().any(|v| v.contains("services.ce.port")
                    && v.contains("services.factory.port")
                    && v.contains("19620")));
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn hostname_outside_domain_is_rejected() {
        let mut doc = minimal_json();
        doc["services"]["ce"]["hostname"] = serde_json::json!("ce-1.example.com");
        let err = parse_topology_str(&doc.to_string()).unwrap_err();
        match err {
            TopologyError::Validation { violations } => {
                assert!(violations[0].contains("services.ce.hostname"));
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn missing_service_is_a_parse_error() {
        let mut doc = minimal_json();
        doc["services"].as_object_mut().unwrap().remove("frontend");
        assert!(matches!(
            parse_topology_str(&doc.to_string()),
            Err(TopologyError::Parse(_))
        ));
    }

    #[test]
    fn curb_above_max_is_rejected() {
        let mut doc = minimal_json();
        doc["services"]["frontend"]["config"]["total_curb_glideins"] = serde_json::json!(200);
        doc["services"]["frontend"]["config"]["total_max_glideins"] = serde_json::json!(100);
        let err = parse_topology_str(&doc.to_string()).unwrap_err();
        assert!(matches!(err, TopologyError::Validation { .. }));
    }

    #[test]
    fn workload_validation() {
        let spec = parse_workload_str(
            r#"{"jobs": [{"submit_time_s": 0.0, "count": 10,
                "requirements": {"cores": 1, "memory_mb": 1024, "disk_mb": 0, "gpus": 0},
                "runtime_s": 10.0}]}"#,
        )
        .unwrap();
        assert_eq!(spec.total_jobs(), 10);

        let err = parse_workload_str(
            r#"{"jobs": [{"submit_time_s": 0.0, "count": 0,
                "requirements": {"cores": 1, "memory_mb": 1024, "disk_mb": 0, "gpus": 0},
                "runtime_s": 0.0}]}"#,
        )
        .unwrap_err();
        match err {
            WorkloadError::Validation { violations } => assert_eq!(violations.len(), 2),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn smoke_workload_shape() {
        let spec = smoke_workload();
        assert_eq!(spec.total_jobs(), 10);
        assert_eq!(spec.jobs[0].requirements.cores, 1);
    }
}
