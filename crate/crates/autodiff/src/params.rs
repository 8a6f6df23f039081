//! Named parameter collections and their gradients.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Flat, name-ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet(BTreeMap<String, Tensor>);

/// Gradient entries keyed like the [`ParameterSet`] they were taken against.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientMap(BTreeMap<String, Tensor>);

macro_rules! map_api {
    ($ty:ident) => {
        impl $ty {
            pub fn new() -> Self {
                Self::default()
            }

            pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
                self.0.insert(name.into(), t)
            }

            pub fn get(&self, name: &str) -> Option<&Tensor> {
                self.0.get(name)
            }

            pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
                self.0.get_mut(name)
            }

            pub fn contains(&self, name: &str) -> bool {
                self.0.contains_key(name)
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn names(&self) -> impl Iterator<Item = &String> {
                self.0.keys()
            }

            pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
                self.0.iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
                self.0.iter_mut()
            }

            /// Total number of scalar entries.
            pub fn numel(&self) -> usize {
                self.0.values().map(Tensor::len).sum()
            }
        }

        impl FromIterator<(String, Tensor)> for $ty {
            fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
                Self(iter.into_iter().collect())
            }
        }
    };
}

map_api!(ParameterSet);
map_api!(GradientMap);

impl ParameterSet {
    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (k, v) in other.0 {
            if self.0.contains_key(&k) {
                return Err(AdError::Contract(format!("duplicate parameter {k}")));
            }
            self.0.insert(k, v);
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a checkpoint and checks that every entry's data fills its shape.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: BTreeMap<String, Tensor> = serde_json::from_str(s)?;
        let mut out = ParameterSet::new();
        for (name, t) in raw {
            let t = Tensor::new(t.shape, t.data)
                .map_err(|e| AdError::Shape(format!("parameter {name}: {e}")))?;
            out.insert(name, t);
        }
        Ok(out)
    }

    /// Loads a checkpoint and verifies it matches `template` name-for-name
    /// and shape-for-shape.
    pub fn from_json_like(s: &str, template: &ParameterSet) -> Result<Self> {
        let loaded = Self::from_json(s)?;
        for (name, t) in template.iter() {
            match loaded.get(name) {
                None => return Err(AdError::Shape(format!("checkpoint lacks parameter {name}"))),
                Some(l) if l.shape != t.shape => {
                    return Err(AdError::Shape(format!(
                        "parameter {name}: expected shape {:?}, checkpoint has {:?}",
                        t.shape, l.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if loaded.len() != template.len() {
            let extra: Vec<_> = loaded.names().filter(|n| !template.contains(n)).collect();
            return Err(AdError::Shape(format!("unexpected parameters in checkpoint: {extra:?}")));
        }
        Ok(loaded)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = self.to_json().map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(std::io::Error::other)
    }
}

impl GradientMap {
    /// Entrywise `self + c·other` over the names both maps share; names only
    /// in `other` are inserted scaled.
    pub fn axpy(&mut self, c: f64, other: &GradientMap) {
        for (k, v) in other.iter() {
            match self.0.get_mut(k) {
                Some(t) => t.add_assign(&v.scale(c)),
                None => {
                    self.0.insert(k.clone(), v.scale(c));
                }
            }
        }
    }

    pub fn scale(&self, c: f64) -> GradientMap {
        self.0.iter().map(|(k, v)| (k.clone(), v.scale(c))).collect()
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.0.values().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        p.insert("b", Tensor::row(&[0.5, -0.5]));
        p
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = sample();
        let json = p.to_json().unwrap();
        assert!(json.contains("\"shape\""));
        assert_eq!(ParameterSet::from_json_like(&json, &p).unwrap(), p);
    }

    #[test]
    fn loading_rejects_bad_shapes() {
        let bad = r#"{"w": {"shape": [2, 2], "data": [1.0, 2.0, 3.0]}}"#;
        assert!(ParameterSet::from_json(bad).is_err());
        let mut other = sample();
        other.insert("w", Tensor::zeros(3, 2));
        let json = other.to_json().unwrap();
        assert!(ParameterSet::from_json_like(&json, &sample()).is_err());
    }

    #[test]
    fn duplicate_names_rejected_on_extend() {
        let mut p = sample();
        assert!(p.extend(sample()).is_err());
    }
}
