use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sendi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: a model configuration header plus every parameter keyed
/// by its path. Floats round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub init_seed: u64,
    /// Hex SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, CheckpointEntry>,
}

/// Hex SHA-256 of a JSON value's compact serialization.
pub fn json_hash(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values always serialize");
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value, init_seed: u64) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (
                    store.name(id).to_string(),
                    CheckpointEntry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            init_seed,
            config_hash: json_hash(&config),
            config,
            metadata: BTreeMap::new(),
            params,
        }
    }

    fn validate_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Incompatible(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if json_hash(&self.config) != self.config_hash {
            return Err(Error::Incompatible("config hash does not match embedded config".into()));
        }
        Ok(())
    }

    /// Copies every parameter into `store`. Validates everything first so a
    /// failure leaves `store` untouched.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        self.validate_header()?;
        let mut staged = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id);
            let entry = self
                .params
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {name}")))?;
            let t = Tensor::new(entry.shape.clone(), entry.data.clone())
                .map_err(|e| Error::Incompatible(format!("{name}: {e}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            staged.push((id, t));
        }
        if self.params.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, t) in staged {
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| Error::Incompatible(format!("unreadable checkpoint: {e}")))?;
        ck.validate_header()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;
    use rand::Rng as _;

    fn store() -> ParamStore {
        let mut rng = crate::rng::seeded(1);
        let mut s = ParamStore::new();
        let data: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 1e-3 - 7.0).collect();
        s.add("enc/w", Tensor::matrix(3, 4, data).unwrap(), ParamKind::Weight)
            .unwrap();
        s.add("enc/b", Tensor::row(&[0.1, 1.0 / 3.0, -2e-300, 5e300]), ParamKind::Bias)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let ck = Checkpoint::from_store(&s, serde_json::json!({"kind": "test"}), 9);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut s2 = store();
        for id in s2.ids().collect::<Vec<_>>() {
            s2.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        back.apply_to(&mut s2).unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s2.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupted_header_is_incompatible() {
        let ck = Checkpoint::from_store(&store(), serde_json::json!({}), 0);
        let text = String::from_utf8(ck.to_bytes().unwrap()).unwrap();
        let bad = text.replace(CHECKPOINT_FORMAT, "other-format");
        assert!(matches!(
            Checkpoint::from_bytes(bad.as_bytes()),
            Err(Error::Incompatible(_))
        ));
        let mut v2 = ck.clone();
        v2.version = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&v2.to_bytes().unwrap()),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"{\"format\""),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn mismatched_shape_loads_nothing() {
        let mut ck = Checkpoint::from_store(&store(), serde_json::json!({}), 0);
        ck.params.get_mut("enc/w").unwrap().shape = vec![4, 3];
        let mut s = store();
        let before = s.get(s.lookup("enc/b").unwrap()).clone();
        ck.params.get_mut("enc/b").unwrap().data[0] = 42.0;
        assert!(ck.apply_to(&mut s).is_err());
        assert_eq!(s.get(s.lookup("enc/b").unwrap()), &before);
    }
}
