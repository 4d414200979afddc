//! Dataset model, delimited ingestion, synthetic generation, splitting and
//! per-user capping.
//!
//! Features are stored pre-partitioned into a non-sensitive and a sensitive
//! group so the model towers and the access-tracked training paths can take
//! exactly the slice they are allowed to see.

mod ingest;
mod split;
mod synthetic;

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{
    load_delimited, log_transform, stable_hash, token_index, ColumnMap, ColumnRef,
    DelimitedOptions, DelimitedSource, Loaded, Vocabulary,
};
pub use split::{cap_examples_per_user, split_train_test, SplitMode};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticFiles, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Integer,
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub sensitive: bool,
    /// Number of token indices, including the reserved out-of-vocabulary index 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// One token per line; line `i` (0-based) maps to index `i + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<PathBuf>,
}

impl FieldSpec {
    pub fn categorical(name: &str, vocab_size: usize, sensitive: bool) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::Categorical,
            sensitive,
            vocab_size: Some(vocab_size),
            vocab_file: None,
        }
    }

    pub fn numeric(name: &str, kind: FieldKind, sensitive: bool) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind,
            sensitive,
            vocab_size: None,
            vocab_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    pub label_field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id_field: Option<String>,
    /// Integer column used as the key for chronological splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_field: Option<String>,
}

/// Input shape of one side (non-sensitive or sensitive) of the schema.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FieldGroup {
    /// Vocabulary size per categorical field, in schema order.
    pub vocab_sizes: Vec<usize>,
    /// Number of numeric fields.
    pub numeric: usize,
}

impl FieldGroup {
    pub fn is_empty(&self) -> bool {
        self.vocab_sizes.is_empty() && self.numeric == 0
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name `{}`", f.name)));
            }
            if f.kind == FieldKind::Categorical {
                match f.vocab_size {
                    Some(0) => {
                        return Err(Error::Schema(format!(
                            "field `{}`: vocab_size must be at least 1",
                            f.name
                        )))
                    }
                    None if f.vocab_file.is_none() => {
                        return Err(Error::Schema(format!(
                            "categorical field `{}` needs a vocab_size or vocab_file",
                            f.name
                        )))
                    }
                    _ => {}
                }
            }
        }
        if !self.fields.iter().any(|f| !f.sensitive) {
            return Err(Error::Schema(
                "at least one non-sensitive field is required".into(),
            ));
        }
        let mut extra = vec![self.label_field.as_str()];
        extra.extend(self.user_id_field.as_deref());
        extra.extend(self.order_field.as_deref());
        for name in extra {
            if seen.contains(name) {
                return Err(Error::Schema(format!(
                    "`{name}` is used both as a feature and as a label/id/order column"
                )));
            }
        }
        Ok(())
    }

    /// Shape of the non-sensitive (`sensitive = false`) or sensitive inputs.
    pub fn group(&self, sensitive: bool) -> FieldGroup {
        let mut g = FieldGroup::default();
        for f in self.fields.iter().filter(|f| f.sensitive == sensitive) {
            match f.kind {
                FieldKind::Categorical => g.vocab_sizes.push(f.vocab_size.unwrap_or(1)),
                FieldKind::Integer | FieldKind::Float => g.numeric += 1,
            }
        }
        g
    }
}

/// Feature values of one group, fields in schema order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub cat: Vec<u32>,
    pub num: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: Option<u64>,
    pub order_key: Option<i64>,
    pub nonsensitive: Features,
    pub sensitive: Features,
    pub label: u8,
}

fn conforms(features: &Features, group: &FieldGroup) -> bool {
    features.cat.len() == group.vocab_sizes.len()
        && features.num.len() == group.numeric
        && features
            .cat
            .iter()
            .zip(&group.vocab_sizes)
            .all(|(&idx, &v)| (idx as usize) < v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    examples: Vec<Example>,
}

impl Dataset {
    /// Builds a dataset, checking every example against the schema.
    pub fn new(schema: FeatureSchema, examples: Vec<Example>) -> Result<Self> {
        schema.validate()?;
        let ns = schema.group(false);
        let s = schema.group(true);
        for (i, e) in examples.iter().enumerate() {
            if e.label > 1 {
                return Err(Error::Schema(format!(
                    "example {i}: label {} not in {{0,1}}",
                    e.label
                )));
            }
            if !conforms(&e.nonsensitive, &ns) || !conforms(&e.sensitive, &s) {
                return Err(Error::Schema(format!(
                    "example {i} does not conform to the schema"
                )));
            }
        }
        Ok(Dataset { schema, examples })
    }

    pub(crate) fn from_parts_unchecked(schema: FeatureSchema, examples: Vec<Example>) -> Self {
        Dataset { schema, examples }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn has_user_ids(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.user_id.is_some())
    }

    /// Number of distinct users (examples without a user id are ignored).
    pub fn n_users(&self) -> usize {
        self.examples
            .iter()
            .filter_map(|e| e.user_id)
            .collect::<HashSet<_>>()
            .len()
    }

    pub(crate) fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

/// Read access to training examples, split by what each training phase is
/// allowed to see. Training code goes through this trait so that accesses can
/// be audited by wrapping a dataset.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;
    fn nonsensitive(&self, i: usize) -> &Features;
    fn sensitive(&self, i: usize) -> &Features;
    fn label(&self, i: usize) -> u8;
    fn user_id(&self, i: usize) -> Option<u64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for Dataset {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn nonsensitive(&self, i: usize) -> &Features {
        &self.examples[i].nonsensitive
    }

    fn sensitive(&self, i: usize) -> &Features {
        &self.examples[i].sensitive
    }

    fn label(&self, i: usize) -> u8 {
        self.examples[i].label
    }

    fn user_id(&self, i: usize) -> Option<u64> {
        self.examples[i].user_id
    }
}
