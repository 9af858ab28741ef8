use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered treatment labels. Index 0 is the control arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TreatmentSet {
    names: Vec<String>,
}

impl TreatmentSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Invalid("a treatment set needs a control and at least one treatment".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(',') {
                return Err(Error::Invalid(format!("bad treatment label {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate treatment {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn control(&self) -> &str {
        &self.names[0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Invalid(format!("unknown treatment {name:?}")))
    }
}

impl Default for TreatmentSet {
    fn default() -> Self {
        let names = ["none", "85%-x", "80%-x", "75%-x", "70%-x", "60%-x"];
        Self::new(names.iter().map(|s| s.to_string()).collect()).expect("default labels are valid")
    }
}

impl TryFrom<Vec<String>> for TreatmentSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<TreatmentSet> for Vec<String> {
    fn from(t: TreatmentSet) -> Self {
        t.names
    }
}
