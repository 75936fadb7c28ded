use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DEFAULT_REGISTRY: &str = include_str!("../../data/strategies.json");

/// Name of the catch-all label unknown strategy strings map to.
pub const CATCH_ALL: &str = "Others";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyLabel {
    pub id: usize,
    pub name: String,
}

/// Ordered list of the eight support strategies; index = label id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyRegistry {
    names: Vec<String>,
}

impl StrategyRegistry {
    pub const SIZE: usize = 8;

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() != Self::SIZE {
            return Err(Error::contract(format!(
                "strategy registry must list {} names, found {}",
                Self::SIZE,
                names.len()
            )));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != Self::SIZE {
            return Err(Error::contract("strategy registry names must be distinct"));
        }
        if !names.iter().any(|n| n == CATCH_ALL) {
            return Err(Error::contract(format!(
                "strategy registry must contain the catch-all `{CATCH_ALL}`"
            )));
        }
        Ok(Self { names })
    }

    /// Registry shipped with the crate.
    pub fn builtin() -> Self {
        let names: Vec<String> =
            serde_json::from_str(DEFAULT_REGISTRY).expect("bundled strategy registry is valid");
        Self::from_names(names).expect("bundled strategy registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> = serde_json::from_str(&raw).map_err(|e| Error::Load {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_names(names)
    }

    pub fn label(&self, id: usize) -> StrategyLabel {
        StrategyLabel {
            id,
            name: self.names[id].clone(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = StrategyLabel> + '_ {
        (0..self.names.len()).map(|i| self.label(i))
    }

    /// Exact (case-insensitive) lookup.
    pub fn lookup(&self, name: &str) -> Option<StrategyLabel> {
        let name = name.trim();
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| self.label(i))
    }

    pub fn catch_all(&self) -> StrategyLabel {
        self.lookup(CATCH_ALL).expect("registry contains catch-all")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Hex digest identifying this registry (stored with checkpoints).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_eight_distinct_labels() {
        let r = StrategyRegistry::builtin();
        assert_eq!(r.labels().count(), 8);
        assert_eq!(r.catch_all().name, "Others");
        assert_eq!(r.lookup("question").unwrap().id, 0);
    }

    #[test]
    fn rejects_wrong_size() {
        assert!(StrategyRegistry::from_names(vec!["Others".into()]).is_err());
    }
}
