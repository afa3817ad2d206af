//! Dataset schema: vocabulary sizes, dense widths, sequence window.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;

/// Shape contract between a dataset and the model.
///
/// Vocabulary sizes count the reserved out-of-vocabulary row at index 0, so
/// valid ids are `0..size`. Dense widths are the number of standardized
/// float statistics per group. `seq_len` is the behavior window `t`: longer
/// histories are truncated to the most recent `t` events, shorter ones are
/// left-padded and masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub brands: usize,
    pub positions: usize,
    pub time_buckets: usize,
    pub user_dense: usize,
    pub item_dense: usize,
    pub inter_dense: usize,
    pub seq_len: usize,
}

impl FeatureSchema {
    /// Check internal consistency; called by loaders and constructors of
    /// anything that embeds records.
    pub fn validate(&self) -> Result<(), DataError> {
        let fields = [
            ("users", self.users),
            ("items", self.items),
            ("categories", self.categories),
            ("brands", self.brands),
            ("positions", self.positions),
            ("time_buckets", self.time_buckets),
        ];
        for (name, v) in fields {
            if v < 2 {
                return Err(DataError::BadSchema {
                    path: String::new(),
                    why: format!("vocabulary `{name}` must be at least 2 (OOV row plus one id), got {v}"),
                });
            }
        }
        if self.seq_len == 0 {
            return Err(DataError::BadSchema {
                path: String::new(),
                why: "seq_len must be positive".into(),
            });
        }
        Ok(())
    }

    fn entries(&self) -> [(&'static str, usize); 10] {
        [
            ("users", self.users),
            ("items", self.items),
            ("categories", self.categories),
            ("brands", self.brands),
            ("positions", self.positions),
            ("time_buckets", self.time_buckets),
            ("user_dense", self.user_dense),
            ("item_dense", self.item_dense),
            ("inter_dense", self.inter_dense),
            ("seq_len", self.seq_len),
        ]
    }

    /// Canonical sidecar serialization: sorted `key=value` lines.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_sidecar()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |why: String| DataError::BadSchema {
            path: path.display().to_string(),
            why,
        };
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", i + 1)))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| bad(format!("key `{}`: not an integer: {:?}", k.trim(), v.trim())))?;
            map.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing key `{k}`")))
        };
        let schema = FeatureSchema {
            users: get("users")?,
            items: get("items")?,
            categories: get("categories")?,
            brands: get("brands")?,
            positions: get("positions")?,
            time_buckets: get("time_buckets")?,
            user_dense: get("user_dense")?,
            item_dense: get("item_dense")?,
            inter_dense: get("inter_dense")?,
            seq_len: get("seq_len")?,
        };
        schema.validate().map_err(|e| match e {
            DataError::BadSchema { why, .. } => bad(why),
            other => other,
        })?;
        Ok(schema)
    }

    /// Hex digest of the canonical serialization. Stored in checkpoints so
    /// a model is never silently applied to data with a different shape.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_sidecar().as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSchema {
        FeatureSchema {
            users: 100,
            items: 50,
            categories: 10,
            brands: 8,
            positions: 11,
            time_buckets: 9,
            user_dense: 4,
            item_dense: 4,
            inter_dense: 4,
            seq_len: 30,
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.txt");
        let s = sample();
        s.save(&p).unwrap();
        assert_eq!(FeatureSchema::load(&p).unwrap(), s);
    }

    #[test]
    fn hash_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.hash(), b.hash());
        b.items += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn tiny_vocab_rejected() {
        let mut s = sample();
        s.brands = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.txt");
        std::fs::write(&p, "users=10\n").unwrap();
        match FeatureSchema::load(&p) {
            Err(DataError::BadSchema { why, .. }) => assert!(why.contains("missing key")),
            other => panic!("expected BadSchema, got {other:?}"),
        }
    }
}
