//! Provider reachability tracking for the service's fail-fast mode.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use stitch_core::gateway::{
    ChatMessage, GatewayError, ModelProvider, ProviderKind, RemoteProvider, Rulebook, RulebookProvider,
};
use stitch_core::{Gateway, GatewayConfig, ModelTask, TaskKind};

#[derive(Debug)]
pub struct ProviderHealth {
    reachable: AtomicBool,
    /// Set once any call has reached or failed to reach the provider.
    observed: AtomicBool,
    failures: AtomicU64,
}

impl Default for ProviderHealth {
    fn default() -> Self {
        Self {
            reachable: AtomicBool::new(true),
            observed: AtomicBool::new(false),
            failures: AtomicU64::new(0),
        }
    }
}

impl ProviderHealth {
    /// Last known reachability; true before the first call.
    pub fn is_reachable(&self) -> bool {
        self.reachable.load(Ordering::SeqCst)
    }

    pub fn observed(&self) -> bool {
        self.observed.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::SeqCst)
    }
}

/// Wraps a provider and records whether its last call reached it.
pub struct TrackedProvider {
    inner: Arc<dyn ModelProvider>,
    health: Arc<ProviderHealth>,
}

impl ModelProvider for TrackedProvider {
    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    fn complete(&self, task: &ModelTask, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let out = self.inner.complete(task, messages);
        self.health.observed.store(true, Ordering::SeqCst);
        match &out {
            Err(GatewayError::ProviderUnreachable(_)) => {
                self.health.reachable.store(false, Ordering::SeqCst);
                self.health.failures.fetch_add(1, Ordering::SeqCst);
            }
            _ => self.health.reachable.store(true, Ordering::SeqCst),
        }
        out
    }
}

/// Shared gateway plus its health view.
#[derive(Clone)]
pub struct GatewayHandle {
    pub gateway: Arc<Gateway>,
    pub health: Arc<ProviderHealth>,
    provider: Arc<TrackedProvider>,
}

impl GatewayHandle {
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let provider: Arc<dyn ModelProvider> = match cfg.provider {
            ProviderKind::Deterministic => {
                let rulebook = match &cfg.rulebook_path {
                    Some(p) => Rulebook::load(p)?,
                    None => Rulebook::default(),
                };
                Arc::new(RulebookProvider::new(rulebook))
            }
            ProviderKind::Remote => Arc::new(RemoteProvider::from_config(cfg)?),
        };
        Ok(Self::from_provider(provider, cfg.max_retries))
    }

    pub fn from_provider(inner: Arc<dyn ModelProvider>, max_retries: u32) -> Self {
        let health = Arc::new(ProviderHealth::default());
        let provider = Arc::new(TrackedProvider {
            inner,
            health: health.clone(),
        });
        Self {
            gateway: Arc::new(Gateway::new(provider.clone(), max_retries)),
            health,
            provider,
        }
    }

    pub fn deterministic() -> Self {
        Self::from_provider(Arc::new(RulebookProvider::new(Rulebook::default())), 2)
    }

    /// True when the provider answered its last call; otherwise (or before
    /// any call) probes once.
    pub fn ensure_reachable(&self) -> bool {
        if self.health.observed() && self.health.is_reachable() {
            return true;
        }
        let kind = TaskKind::SnippetSummary;
        let Ok(task) = ModelTask::with(kind, kind.required_fields().into_iter().map(|f| (f, "ping"))) else {
            return false;
        };
        let _ = self.provider.complete(&task, &[ChatMessage::new("user", task.render())]);
        self.health.is_reachable()
    }
}
