use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use super::{ColumnMap, Dataset, DelimitedSource, Example, FeatureSchema, Features, FieldSpec};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

fn default_base_logit() -> f64 {
    -1.0
}

fn default_user_skew() -> f64 {
    1.1
}

fn default_token_skew() -> f64 {
    1.0
}

/// Parameters of the synthetic click/conversion-style generator.
///
/// Labels are drawn from a logistic model whose logit is a sum of hidden
/// per-token weights, scaled separately for the non-sensitive and sensitive
/// fields, then flipped with probability `label_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub n_users: usize,
    pub nonsensitive_vocab: Vec<usize>,
    pub sensitive_vocab: Vec<usize>,
    pub nonsensitive_signal_weight: f64,
    pub sensitive_signal_weight: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_base_logit")]
    pub base_logit: f64,
    /// Zipf exponent of the examples-per-user distribution.
    #[serde(default = "default_user_skew")]
    pub user_skew: f64,
    /// Zipf exponent of token frequencies within a field (0 = uniform).
    #[serde(default = "default_token_skew")]
    pub token_skew: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_users == 0 || self.n_users > self.n_examples {
            return bad(format!(
                "need 1 <= n_users <= n_examples, got {} users for {} examples",
                self.n_users, self.n_examples
            ));
        }
        if self.nonsensitive_vocab.is_empty() {
            return bad("at least one non-sensitive field is required".into());
        }
        if let Some(v) = self
            .nonsensitive_vocab
            .iter()
            .chain(&self.sensitive_vocab)
            .find(|&&v| v < 2)
        {
            return bad(format!("vocab sizes must be at least 2, got {v}"));
        }
        for (name, w) in [
            (
                "nonsensitive_signal_weight",
                self.nonsensitive_signal_weight,
            ),
            ("sensitive_signal_weight", self.sensitive_signal_weight),
            ("user_skew", self.user_skew),
            ("token_skew", self.token_skew),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if !self.base_logit.is_finite() {
            return bad("base_logit must be finite".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!(
                "label_noise must lie in [0, 0.5), got {}",
                self.label_noise
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut fields: Vec<FieldSpec> = self
            .nonsensitive_vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| FieldSpec::categorical(&format!("ns{i}"), v, false))
            .collect();
        fields.extend(
            self.sensitive_vocab
                .iter()
                .enumerate()
                .map(|(i, &v)| FieldSpec::categorical(&format!("s{i}"), v, true)),
        );
        FeatureSchema {
            fields,
            label_field: "label".into(),
            user_id_field: Some("user_id".into()),
            order_field: Some("ts".into()),
        }
    }
}

struct TokenSampler {
    zipf: Option<Zipf<f64>>,
    n: usize,
}

impl TokenSampler {
    fn new(vocab: usize, skew: f64) -> Self {
        let n = vocab - 1;
        let zipf = (skew > 0.0).then(|| Zipf::new(n as f64, skew).expect("n >= 1, skew > 0"));
        TokenSampler { zipf, n }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match &self.zipf {
            Some(z) => z.sample(rng) as u32,
            None => rng.random_range(1..=self.n) as u32,
        }
    }
}

fn hidden_weights<R: Rng>(vocab: &[usize], rng: &mut R) -> Vec<Vec<f64>> {
    vocab
        .iter()
        .map(|&v| {
            let mut w: Vec<f64> = (0..v).map(|_| rng.sample(StandardNormal)).collect();
            w[0] = 0.0;
            w
        })
        .collect()
}

/// Generates a dataset from `spec`. Bit-reproducible for a fixed seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Data, 0);

    let w_ns = hidden_weights(&spec.nonsensitive_vocab, &mut rng);
    let w_s = hidden_weights(&spec.sensitive_vocab, &mut rng);
    let scale_ns = spec.nonsensitive_signal_weight / (w_ns.len() as f64).sqrt();
    let scale_s = if w_s.is_empty() {
        0.0
    } else {
        spec.sensitive_signal_weight / (w_s.len() as f64).sqrt()
    };

    let mut users: Vec<u64> = (0..spec.n_users as u64).collect();
    if spec.n_examples > spec.n_users {
        let zipf = Zipf::new(spec.n_users as f64, spec.user_skew.max(1e-9))
            .map_err(|e| Error::Config(format!("user distribution: {e}")))?;
        users.extend((spec.n_users..spec.n_examples).map(|_| zipf.sample(&mut rng) as u64 - 1));
    }
    users.shuffle(&mut rng);

    let ns_samplers: Vec<_> = spec
        .nonsensitive_vocab
        .iter()
        .map(|&v| TokenSampler::new(v, spec.token_skew))
        .collect();
    let s_samplers: Vec<_> = spec
        .sensitive_vocab
        .iter()
        .map(|&v| TokenSampler::new(v, spec.token_skew))
        .collect();

    let mut examples = Vec::with_capacity(spec.n_examples);
    for (i, &user) in users.iter().enumerate() {
        let ns: Vec<u32> = ns_samplers.iter().map(|t| t.sample(&mut rng)).collect();
        let s: Vec<u32> = s_samplers.iter().map(|t| t.sample(&mut rng)).collect();
        let signal_ns: f64 = ns.iter().zip(&w_ns).map(|(&t, w)| w[t as usize]).sum();
        let signal_s: f64 = s.iter().zip(&w_s).map(|(&t, w)| w[t as usize]).sum();
        let logit = spec.base_logit + scale_ns * signal_ns + scale_s * signal_s;
        let p = 1.0 / (1.0 + (-logit).exp());
        let mut label = u8::from(rng.random::<f64>() < p);
        if rng.random::<f64>() < spec.label_noise {
            label ^= 1;
        }
        examples.push(Example {
            user_id: Some(user),
            order_key: Some(i as i64),
            nonsensitive: Features {
                cat: ns,
                num: vec![],
            },
            sensitive: Features {
                cat: s,
                num: vec![],
            },
            label,
        });
    }
    Dataset::new(spec.schema(), examples)
}

/// Paths written by [`write_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub vocab: Vec<PathBuf>,
}

fn token(field: &str, idx: u32) -> String {
    if idx == 0 {
        String::new()
    } else {
        format!("{field}_{idx}")
    }
}

/// Writes an all-categorical dataset as `data.csv` plus one vocabulary file
/// per field and a `schema.toml` describing how to load it back.
pub fn write_synthetic(dataset: &Dataset, dir: &Path) -> Result<SyntheticFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = dataset.schema();
    let ns_fields: Vec<&FieldSpec> = schema.fields.iter().filter(|f| !f.sensitive).collect();
    let s_fields: Vec<&FieldSpec> = schema.fields.iter().filter(|f| f.sensitive).collect();
    if ns_fields
        .iter()
        .chain(&s_fields)
        .any(|f| f.kind != super::FieldKind::Categorical)
    {
        return Err(Error::Schema(
            "write_synthetic supports categorical fields only".into(),
        ));
    }

    let mut out_schema = schema.clone();
    let mut vocab_paths = Vec::new();
    for f in &mut out_schema.fields {
        let v = f.vocab_size.unwrap_or(1);
        let rel = PathBuf::from(format!("vocab_{}.txt", f.name));
        let mut body = String::new();
        for idx in 1..v as u32 {
            writeln!(body, "{}", token(&f.name, idx)).expect("write to String");
        }
        let p = dir.join(&rel);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        vocab_paths.push(p);
        f.vocab_file = Some(rel);
    }

    let mut header: Vec<String> = ns_fields
        .iter()
        .chain(&s_fields)
        .map(|f| f.name.clone())
        .collect();
    header.push(schema.label_field.clone());
    header.extend(schema.user_id_field.clone());
    header.extend(schema.order_field.clone());

    let data_path = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&data_path).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_record(&header)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for e in dataset.examples() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.extend(
            ns_fields
                .iter()
                .zip(&e.nonsensitive.cat)
                .map(|(f, &t)| token(&f.name, t)),
        );
        row.extend(
            s_fields
                .iter()
                .zip(&e.sensitive.cat)
                .map(|(f, &t)| token(&f.name, t)),
        );
        row.push(e.label.to_string());
        if schema.user_id_field.is_some() {
            row.push(e.user_id.map(|u| u.to_string()).unwrap_or_default());
        }
        if schema.order_field.is_some() {
            row.push(e.order_key.map(|k| k.to_string()).unwrap_or_default());
        }
        w.write_record(&row)
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;

    let source = DelimitedSource {
        path: PathBuf::from("data.csv"),
        delimiter: ',',
        has_header: true,
        schema: out_schema,
        columns: ColumnMap::new(),
    };
    let schema_path = dir.join("schema.toml");
    let text = toml::to_string_pretty(&source).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&schema_path, text).map_err(|e| Error::io(&schema_path, e))?;

    Ok(SyntheticFiles {
        data: data_path,
        schema: schema_path,
        vocab: vocab_paths,
    })
}
