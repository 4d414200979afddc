//! Two-tower model: a non-sensitive tower `g`, a sensitive tower `h` and a
//! common head `f` over their concatenated outputs. The truncated model feeds
//! zeros in place of `h`'s output.
//!
//! All trainable parameters live in one flat vector with a fixed order:
//! embedding tables in schema field order, then the non-sensitive tower
//! layers, the sensitive tower layers and the common layers. Each dense layer
//! stores its weights row-major (`outputs x inputs`) followed by its bias.

mod checkpoint;
mod network;

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, FieldGroup, FieldKind};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use checkpoint::Checkpoint;
pub(crate) use network::ExampleGrad;
pub use network::{
    bce_loss, bce_loss_grad, forward_full, forward_truncated, per_example_grad, sigmoid, Workspace,
};

/// Embedding width from the vocabulary size: `max(1, floor(2 * V^0.25))`.
pub fn embed_dim(vocab_size: usize) -> usize {
    // largest d with d^4 <= 16 V, computed exactly
    let bound = 16u128 * vocab_size.max(1) as u128;
    let mut d = (2.0 * (vocab_size.max(1) as f64).powf(0.25)).floor() as u128;
    while d.pow(4) > bound {
        d -= 1;
    }
    while (d + 1).pow(4) <= bound {
        d += 1;
    }
    (d as usize).max(1)
}

fn default_embedding_init() -> f64 {
    0.05
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Same embedding width for every categorical field. When unset each field
    /// uses [`embed_dim`] of its vocabulary size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub nonsensitive_hidden: Vec<usize>,
    #[serde(default)]
    pub sensitive_hidden: Vec<usize>,
    #[serde(default)]
    pub common_hidden: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
    /// Embeddings start uniform in `[-embedding_init, embedding_init]`.
    #[serde(default = "default_embedding_init")]
    pub embedding_init: f64,
    /// Dense weights start uniform with variance `init_scale / fan_in`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: None,
            nonsensitive_hidden: vec![32],
            sensitive_hidden: vec![],
            common_hidden: vec![32, 16],
            init_seed: 0,
            embedding_init: default_embedding_init(),
            init_scale: default_init_scale(),
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self
            .nonsensitive_hidden
            .iter()
            .chain(&self.sensitive_hidden)
            .chain(&self.common_hidden)
            .any(|&h| h == 0)
        {
            return Err(Error::Config(
                "hidden layer sizes must be at least 1".into(),
            ));
        }
        if self.embedding_dim == Some(0) {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if !(self.embedding_init.is_finite() && self.embedding_init >= 0.0)
            || !(self.init_scale.is_finite() && self.init_scale >= 0.0)
        {
            return Err(Error::Config("init scales must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub offset: usize,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.vocab * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, idx: u32) -> Range<usize> {
        let start = self.offset + idx as usize * self.dim;
        start..start + self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
    /// Position of this layer in parameter order, used in numeric errors.
    pub index: usize,
}

impl Dense {
    pub fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    pub embeddings: Vec<Embedding>,
    pub numeric: usize,
    pub layers: Vec<Dense>,
}

impl Tower {
    pub fn input_dim(&self) -> usize {
        self.embeddings.iter().map(|e| e.dim).sum::<usize>() + self.numeric
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), |l| l.outputs)
    }

    fn ranges(&self) -> Vec<Range<usize>> {
        let mut r: Vec<_> = self
            .embeddings
            .iter()
            .map(|e| e.offset..e.offset + e.len())
            .collect();
        if let (Some(first), Some(last)) = (self.layers.first(), self.layers.last()) {
            r.push(first.offset..last.offset + last.len());
        }
        r
    }
}

/// Which parameters a gradient or optimizer covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// `w_ns`, `w_s` and `w_c`.
    Full,
    /// `w_ns` and `w_c` only.
    Truncated,
}

/// Shape and parameter layout of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub config: ModelConfig,
    pub nonsensitive: Tower,
    pub sensitive: Tower,
    /// Hidden layers followed by the scalar output layer.
    pub common: Vec<Dense>,
    pub len: usize,
    /// Start of the dense-layer region; everything before it is embeddings.
    pub dense_start: usize,
}

fn build_tower(
    group_embeddings: Vec<Embedding>,
    numeric: usize,
    hidden: &[usize],
    offset: &mut usize,
    index: &mut usize,
) -> Tower {
    let mut tower = Tower {
        embeddings: group_embeddings,
        numeric,
        layers: Vec::new(),
    };
    let mut inputs = tower.input_dim();
    for &h in hidden {
        let d = Dense {
            offset: *offset,
            inputs,
            outputs: h,
            index: *index,
        };
        *offset += d.len();
        *index += 1;
        inputs = h;
        tower.layers.push(d);
    }
    tower
}

impl Layout {
    pub fn new(schema: &FeatureSchema, config: &ModelConfig) -> Result<Arc<Layout>> {
        schema.validate()?;
        config.validate()?;
        let mut offset = 0;
        let mut ns_emb = Vec::new();
        let mut s_emb = Vec::new();
        for f in schema
            .fields
            .iter()
            .filter(|f| f.kind == FieldKind::Categorical)
        {
            let vocab = f.vocab_size.unwrap_or(1);
            let dim = config.embedding_dim.unwrap_or_else(|| embed_dim(vocab));
            let e = Embedding { offset, vocab, dim };
            offset += e.len();
            if f.sensitive { &mut s_emb } else { &mut ns_emb }.push(e);
        }
        let dense_start = offset;
        let ns_group: FieldGroup = schema.group(false);
        let s_group: FieldGroup = schema.group(true);
        let mut index = 0;
        let nonsensitive = build_tower(
            ns_emb,
            ns_group.numeric,
            &config.nonsensitive_hidden,
            &mut offset,
            &mut index,
        );
        // no sensitive inputs means no sensitive tower at all (d_s = 0)
        let s_hidden: &[usize] = if s_group.is_empty() {
            &[]
        } else {
            &config.sensitive_hidden
        };
        let sensitive = build_tower(s_emb, s_group.numeric, s_hidden, &mut offset, &mut index);

        let mut common = Vec::new();
        let mut inputs = nonsensitive.output_dim() + sensitive.output_dim();
        for &h in config.common_hidden.iter().chain(&[1]) {
            let d = Dense {
                offset,
                inputs,
                outputs: h,
                index,
            };
            offset += d.len();
            index += 1;
            inputs = h;
            common.push(d);
        }
        Ok(Arc::new(Layout {
            config: config.clone(),
            nonsensitive,
            sensitive,
            common,
            len: offset,
            dense_start,
        }))
    }

    pub fn d_nonsensitive(&self) -> usize {
        self.nonsensitive.output_dim()
    }

    pub fn d_sensitive(&self) -> usize {
        self.sensitive.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.len
    }

    /// Parameter ranges of `w_ns`.
    pub fn nonsensitive_ranges(&self) -> Vec<Range<usize>> {
        self.nonsensitive.ranges()
    }

    /// Parameter ranges of `w_s`.
    pub fn sensitive_ranges(&self) -> Vec<Range<usize>> {
        self.sensitive.ranges()
    }

    /// Parameter ranges of `w_c`.
    pub fn common_ranges(&self) -> Vec<Range<usize>> {
        match (self.common.first(), self.common.last()) {
            (Some(a), Some(b)) => vec![a.offset..b.offset + b.len()],
            _ => vec![],
        }
    }

    /// Sorted, merged ranges covered by `scope`.
    pub fn scope_ranges(&self, scope: Scope) -> Vec<Range<usize>> {
        let mut r = self.nonsensitive_ranges();
        r.extend(self.common_ranges());
        if scope == Scope::Full {
            r.extend(self.sensitive_ranges());
        }
        r.retain(|x| !x.is_empty());
        r.sort_by_key(|x| x.start);
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(r.len());
        for x in r {
            match merged.last_mut() {
                Some(last) if last.end == x.start => last.end = x.end,
                _ => merged.push(x),
            }
        }
        merged
    }

    pub fn scope_len(&self, scope: Scope) -> usize {
        self.scope_ranges(scope).iter().map(|r| r.len()).sum()
    }
}

/// Trainable weights together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Shape {
                expected: layout.len,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        Ok(ModelParams { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len];
        ModelParams { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Copies out the coordinates belonging to `ranges`.
    pub fn gather(&self, ranges: &[Range<usize>]) -> Vec<f64> {
        ranges
            .iter()
            .flat_map(|r| self.values[r.clone()].iter().copied())
            .collect()
    }
}

/// Deterministic initialization: embeddings uniform in
/// `[-embedding_init, embedding_init]`, dense weights uniform with variance
/// `init_scale / fan_in`, biases zero.
pub fn init_params(layout: &Arc<Layout>) -> ModelParams {
    let cfg = &layout.config;
    let mut rng = stream_rng(cfg.init_seed, Stream::Init, 0);
    let mut values = vec![0.0; layout.len];
    let a = cfg.embedding_init;
    for e in layout
        .nonsensitive
        .embeddings
        .iter()
        .chain(&layout.sensitive.embeddings)
    {
        for v in &mut values[e.offset..e.offset + e.len()] {
            *v = if a > 0.0 {
                rng.random_range(-a..=a)
            } else {
                0.0
            };
        }
    }
    let layers = layout
        .nonsensitive
        .layers
        .iter()
        .chain(&layout.sensitive.layers)
        .chain(&layout.common);
    for d in layers {
        let limit = (3.0 * cfg.init_scale / d.inputs.max(1) as f64).sqrt();
        for v in &mut values[d.offset..d.bias_offset()] {
            *v = if limit > 0.0 {
                rng.random_range(-limit..=limit)
            } else {
                0.0
            };
        }
    }
    ModelParams {
        layout: Arc::clone(layout),
        values,
    }
}

/// A gradient restricted to a scope, in the scope's coordinate order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub scope: Scope,
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(layout: &Layout, scope: Scope) -> Self {
        GradVector {
            scope,
            values: vec![0.0; layout.scope_len(scope)],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Restricts a full-length vector to `scope`.
    pub fn from_full(layout: &Layout, scope: Scope, full: &[f64]) -> Self {
        let values = layout
            .scope_ranges(scope)
            .into_iter()
            .flat_map(|r| full[r].iter().copied())
            .collect();
        GradVector { scope, values }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::data::{Example, Features, FieldSpec};

    /// 2 non-sensitive categorical + 1 numeric, 1 sensitive categorical + 1 numeric.
    pub fn schema() -> FeatureSchema {
        FeatureSchema {
            fields: vec![
                FieldSpec::categorical("a", 5, false),
                FieldSpec::categorical("s", 4, true),
                FieldSpec::numeric("x", FieldKind::Float, false),
                FieldSpec::categorical("b", 3, false),
                FieldSpec::numeric("sx", FieldKind::Float, true),
            ],
            label_field: "y".into(),
            user_id_field: None,
            order_field: None,
        }
    }

    pub fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            embedding_dim: Some(2),
            nonsensitive_hidden: vec![4],
            sensitive_hidden: vec![3],
            common_hidden: vec![5],
            init_seed: seed,
            embedding_init: 0.5,
            init_scale: 2.0,
        }
    }

    pub fn random_example<R: Rng>(rng: &mut R) -> Example {
        Example {
            user_id: None,
            order_key: None,
            nonsensitive: Features {
                cat: vec![rng.random_range(0..5), rng.random_range(0..3)],
                num: vec![rng.random_range(-1.0..1.0)],
            },
            sensitive: Features {
                cat: vec![rng.random_range(0..4)],
                num: vec![rng.random_range(-1.0..1.0)],
            },
            label: rng.random_range(0..2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn embed_dim_heuristic() {
        assert_eq!(embed_dim(1), 2);
        assert_eq!(embed_dim(16), 4);
        assert_eq!(embed_dim(10_000), 20);
        assert_eq!(embed_dim(15), 3);
        for v in 1..5000usize {
            let d = embed_dim(v) as u128;
            assert!(d.pow(4) <= 16 * v as u128 && (d + 1).pow(4) > 16 * v as u128);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let layout = Layout::new(&schema(), &tiny_config(0)).unwrap();
        let mut seen = vec![0u8; layout.len];
        for r in layout
            .nonsensitive_ranges()
            .into_iter()
            .chain(layout.sensitive_ranges())
            .chain(layout.common_ranges())
        {
            for i in r {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(layout.scope_len(Scope::Full), layout.len);
        assert_eq!(
            layout.scope_len(Scope::Truncated),
            layout.len
                - layout
                    .sensitive_ranges()
                    .iter()
                    .map(|r| r.len())
                    .sum::<usize>()
        );
    }

    #[test]
    fn layout_follows_field_order() {
        let layout = Layout::new(&schema(), &tiny_config(0)).unwrap();
        // fields a (ns), s (s), b (ns): tables at 0, 10, 18
        assert_eq!(layout.nonsensitive.embeddings[0].offset, 0);
        assert_eq!(layout.sensitive.embeddings[0].offset, 10);
        assert_eq!(layout.nonsensitive.embeddings[1].offset, 18);
        assert_eq!(layout.dense_start, 24);
        assert_eq!(layout.nonsensitive.input_dim(), 5);
        assert_eq!(layout.common[0].inputs, 4 + 3);
    }

    #[test]
    fn no_sensitive_fields_gives_empty_tower() {
        let mut s = schema();
        s.fields.retain(|f| !f.sensitive);
        let layout = Layout::new(&s, &tiny_config(0)).unwrap();
        assert_eq!(layout.d_sensitive(), 0);
        assert!(layout.sensitive_ranges().is_empty());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let layout = Layout::new(&schema(), &tiny_config(3)).unwrap();
        let a = init_params(&layout);
        assert_eq!(a, init_params(&layout));
        for d in layout
            .nonsensitive
            .layers
            .iter()
            .chain(&layout.sensitive.layers)
            .chain(&layout.common)
        {
            assert!(a.values()[d.bias_offset()..d.offset + d.len()]
                .iter()
                .all(|&b| b == 0.0));
        }
        let other = Layout::new(&schema(), &tiny_config(4)).unwrap();
        assert_ne!(a.values(), init_params(&other).values());
    }

    #[test]
    fn fan_in_rule_std() {
        let mut s = schema();
        s.fields = vec![crate::data::FieldSpec::categorical("a", 2, false)];
        let cfg = ModelConfig {
            embedding_dim: Some(100),
            nonsensitive_hidden: vec![200],
            sensitive_hidden: vec![],
            common_hidden: vec![],
            init_seed: 9,
            embedding_init: 0.05,
            init_scale: 1.0,
        };
        let layout = Layout::new(&s, &cfg).unwrap();
        let p = init_params(&layout);
        let d = &layout.nonsensitive.layers[0];
        assert_eq!(d.inputs, 100);
        let w = &p.values()[d.offset..d.bias_offset()];
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (1.0f64 / 100.0).sqrt();
        assert!(
            (std / target - 1.0).abs() < 0.2,
            "std {std} target {target}"
        );
        let emb = &p.values()[..layout.dense_start];
        assert!(emb.iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn zero_hidden_size_rejected() {
        let mut cfg = tiny_config(0);
        cfg.common_hidden = vec![0];
        assert!(Layout::new(&schema(), &cfg).is_err());
    }
}
