//! All sessions of one server plus the registry file that lists them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use dealer_core::engine::{SessionStatus, TraderId, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

use crate::config::{valid_id, SessionConfig};
use crate::error::ServiceError;
use crate::session::{now_ms, Session};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub log_dir: PathBuf,
    pub registry_path: PathBuf,
    /// When set, operator endpoints need it in `x-admin-token`.
    pub admin_token: Option<String>,
}

impl ServiceConfig {
    /// Registry at `<log_dir>/sessions.json`, no admin token.
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        let log_dir = log_dir.into();
        Self {
            registry_path: log_dir.join("sessions.json"),
            log_dir,
            admin_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub config: SessionConfig,
    pub created_ms: u64,
    /// Opaque token to trader id.
    #[serde(default)]
    pub tokens: BTreeMap<String, TraderId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub schema: u32,
    pub sessions: Vec<RegistryEntry>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            sessions: Vec::new(),
        }
    }
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| ServiceError::Registry(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(ServiceError::Registry(format!("{}: {e}", path.display()))),
        }
    }

    /// Write to a sibling file and rename over the old one.
    pub fn save(&self, path: &Path) -> Result<(), ServiceError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        fs::write(&tmp, text)
            .and_then(|()| fs::rename(&tmp, path))
            .map_err(|e| ServiceError::Registry(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: SessionStatus,
    pub traders: usize,
}

#[derive(Debug)]
pub struct Hub {
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    tokens: RwLock<HashMap<String, (String, TraderId)>>,
    registry: Mutex<Registry>,
    restore_failures: Vec<(String, String)>,
}

impl Hub {
    /// Open the log directory and bring back every registered session.
    /// Must run inside a Tokio runtime, since live sessions restart their
    /// timers. Sessions whose logs fail to replay are skipped and listed
    /// in [`Hub::restore_failures`].
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        fs::create_dir_all(&config.log_dir)
            .map_err(|e| ServiceError::Registry(format!("{}: {e}", config.log_dir.display())))?;
        let registry = Registry::load(&config.registry_path)?;
        let now = now_ms();
        let mut sessions = BTreeMap::new();
        let mut tokens = HashMap::new();
        let mut failures = Vec::new();
        for entry in &registry.sessions {
            let id = entry.config.id.clone().unwrap_or_default();
            match Session::restore(entry.config.clone(), &config.log_dir, now) {
                Ok(s) => {
                    for (token, trader) in &entry.tokens {
                        tokens.insert(token.clone(), (id.clone(), trader.clone()));
                    }
                    sessions.insert(id, s);
                }
                Err(e) => {
                    tracing::warn!(session = %id, error = %e, "session not restored");
                    failures.push((id, e.to_string()));
                }
            }
        }
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(sessions),
            tokens: RwLock::new(tokens),
            registry: Mutex::new(registry),
            restore_failures: failures,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn restore_failures(&self) -> &[(String, String)] {
        &self.restore_failures
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        let registry = self.registry.lock().unwrap_or_else(|p| p.into_inner());
        sessions
            .values()
            .map(|s| SessionSummary {
                id: s.id().to_owned(),
                status: s.status(),
                traders: registry
                    .sessions
                    .iter()
                    .find(|e| e.config.id.as_deref() == Some(s.id()))
                    .map_or(0, |e| e.tokens.len()),
            })
            .collect()
    }

    /// Session and trader behind a token.
    pub fn trader(&self, token: &str) -> Option<(String, TraderId)> {
        self.tokens.read().unwrap_or_else(|p| p.into_inner()).get(token).cloned()
    }

    pub fn create(&self, mut config: SessionConfig) -> Result<Arc<Session>, ServiceError> {
        config.validate()?;
        let id = config
            .id
            .get_or_insert_with(|| uuid::Uuid::new_v4().simple().to_string()[..12].to_owned())
            .clone();
        config.seed.get_or_insert_with(rand::random);
        let mut registry = self.registry.lock().unwrap_or_else(|p| p.into_inner());
        if registry.sessions.iter().any(|e| e.config.id.as_deref() == Some(id.as_str())) {
            return Err(ServiceError::DuplicateId(id));
        }
        let now = now_ms();
        let session = Session::create(config.clone(), &self.config.log_dir, now)?;
        registry.sessions.push(RegistryEntry {
            config,
            created_ms: now,
            tokens: BTreeMap::new(),
        });
        registry.save(&self.config.registry_path)?;
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, session.clone());
        Ok(session)
    }

    /// Register a trader and hand back their token.
    pub fn register(&self, session_id: &str, name: &str) -> Result<String, ServiceError> {
        if !valid_id(name) || name.len() > 32 {
            return Err(ServiceError::Validation(format!(
                "trader name `{name}` must be 1-32 characters of [A-Za-z0-9_-]"
            )));
        }
        let session = self.session(session_id)?;
        let mut registry = self.registry.lock().unwrap_or_else(|p| p.into_inner());
        session.register(name, now_ms())?;
        let token = uuid::Uuid::new_v4().simple().to_string();
        let entry = registry
            .sessions
            .iter_mut()
            .find(|e| e.config.id.as_deref() == Some(session_id))
            .expect("live sessions are registered");
        entry.tokens.insert(token.clone(), name.to_owned());
        registry.save(&self.config.registry_path)?;
        self.tokens
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(token.clone(), (session_id.to_owned(), name.to_owned()));
        Ok(token)
    }

    /// Stop every walk timer.
    pub fn shutdown(&self) {
        for s in self.sessions.read().unwrap_or_else(|p| p.into_inner()).values() {
            s.halt();
        }
    }
}
