//! Published full-scale benchmark numbers, embedded for report annotation.
//! They are never used as acceptance thresholds; desk-scale runs attach them
//! as reference columns only.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::OnceLock;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RefValue(pub f64, pub f64);

impl RefValue {
    pub fn mean(&self) -> f64 {
        self.0
    }
    pub fn std(&self) -> f64 {
        self.1
    }
    pub fn formatted(&self) -> String {
        format!("{:.2}±{:.2}", self.0, self.1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefRow {
    #[serde(alias = "method")]
    pub label: String,
    pub dice: RefValue,
    pub sens: Option<RefValue>,
    pub prec: Option<RefValue>,
    pub mae: Option<RefValue>,
    pub e_phi: Option<RefValue>,
    pub s_alpha: Option<RefValue>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceTables {
    pub description: String,
    pub comparison: Vec<RefRow>,
    pub co_supervision_levels: Vec<RefRow>,
    pub module_ablation: Vec<RefRow>,
    pub fusion_methods: Vec<RefRow>,
}

impl ReferenceTables {
    fn index(rows: &[RefRow]) -> HashMap<&str, &RefRow> {
        rows.iter().map(|r| (r.label.as_str(), r)).collect()
    }

    pub fn level_row(&self, label: &str) -> Option<&RefRow> {
        Self::index(&self.co_supervision_levels).get(label).copied()
    }

    pub fn ablation_row(&self, label: &str) -> Option<&RefRow> {
        Self::index(&self.module_ablation).get(label).copied()
    }

    pub fn fusion_row(&self, label: &str) -> Option<&RefRow> {
        Self::index(&self.fusion_methods).get(label).copied()
    }
}

static TABLES: OnceLock<ReferenceTables> = OnceLock::new();

pub fn reference_tables() -> &'static ReferenceTables {
    TABLES.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/reference_tables.json"))
            .expect("embedded reference tables parse")
    })
}
