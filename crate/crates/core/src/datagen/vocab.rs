//! Object, texture, and anomaly tag lists, shipped as static data.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../assets/vocabulary.json");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub textures: Vec<String>,
    pub anomalies_by_object: BTreeMap<String, Vec<String>>,
}

impl Vocabulary {
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let v: Vocabulary = serde_json::from_str(BUILTIN).expect("builtin vocabulary parses");
            v.validate().expect("builtin vocabulary is consistent");
            v
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.textures.is_empty() {
            return Err(Error::Config("vocabulary must not be empty".into()));
        }
        for obj in &self.objects {
            match self.anomalies_by_object.get(obj) {
                Some(list) if !list.is_empty() => {}
                _ => {
                    return Err(Error::Vocabulary(format!(
                        "object '{}' has no anomaly tags",
                        obj
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn anomalies_for(&self, object: &str) -> Result<&[String]> {
        self.anomalies_by_object
            .get(object)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Vocabulary(object.to_string()))
    }

    /// Restrict to the given object tags; unknown tags are an error.
    pub fn subset(&self, objects: &[String]) -> Result<Vocabulary> {
        let mut map = BTreeMap::new();
        for obj in objects {
            let list = self
                .anomalies_by_object
                .get(obj)
                .ok_or_else(|| Error::Vocabulary(obj.clone()))?;
            map.insert(obj.clone(), list.clone());
        }
        let v = Vocabulary {
            objects: objects.to_vec(),
            textures: self.textures.clone(),
            anomalies_by_object: map,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn distinct_anomaly_count(&self) -> usize {
        let mut all: Vec<&str> = self
            .anomalies_by_object
            .values()
            .flatten()
            .map(String::as_str)
            .collect();
        all.sort();
        all.dedup();
        all.len()
    }
}
