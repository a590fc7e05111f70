//! Named backends selected by string key.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::domain::Backends;
use crate::error::{NaeError, Result};
use crate::toy::{analytic_pipeline, ToyFixture};

/// Weight seed of the built-in analytic pipeline.
pub const ANALYTIC_SEED: u64 = 7;

pub type BackendFactory = Arc<dyn Fn() -> Result<Backends> + Send + Sync>;

#[derive(Clone)]
pub struct Registry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Registry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// `toy` (the committed fixture) and `analytic`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("toy", toy_backends);
        r.register("analytic", || Ok(analytic_pipeline(ANALYTIC_SEED)));
        r
    }

    /// Add or replace the factory for `key`.
    pub fn register<F>(&mut self, key: &str, factory: F)
    where
        F: Fn() -> Result<Backends> + Send + Sync + 'static,
    {
        self.factories.insert(key.to_string(), Arc::new(factory));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, key: &str) -> Result<Backends> {
        let f = self.factories.get(key).ok_or_else(|| NaeError::UnknownBackend(key.to_string()))?;
        f()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// The embedded toy fixture, verified once per process.
pub fn toy_backends() -> Result<Backends> {
    static FIXTURE: OnceLock<std::result::Result<ToyFixture, String>> = OnceLock::new();
    match FIXTURE.get_or_init(|| ToyFixture::embedded().map_err(|e| e.to_string())) {
        Ok(f) => Ok(f.backends()),
        Err(e) => Err(NaeError::FixtureBuildFailed(e.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_keys() {
        let r = Registry::builtin();
        assert_eq!(r.keys().collect::<Vec<_>>(), vec!["analytic", "toy"]);
        assert!(r.build("analytic").is_ok());
        assert!(matches!(r.build("sd-v1.5"), Err(NaeError::UnknownBackend(_))));
    }
}
