use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, FeatureSchema, Features, FieldKind, FieldSpec};
use crate::error::{Error, Result};

/// A column addressed by header name or by 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

/// Schema field / label / user-id / order name to input column. Names absent
/// from the map are looked up in the header under their own name.
pub type ColumnMap = BTreeMap<String, ColumnRef>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelimitedOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for DelimitedOptions {
    fn default() -> Self {
        DelimitedOptions {
            delimiter: b',',
            has_header: true,
        }
    }
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

/// A delimited file together with everything needed to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelimitedSource {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    pub schema: FeatureSchema,
    #[serde(default)]
    pub columns: ColumnMap,
}

impl DelimitedSource {
    /// Makes relative data and vocabulary paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.path.is_relative() {
            self.path = base.join(&self.path);
        }
        for f in &mut self.schema.fields {
            if let Some(v) = &f.vocab_file {
                if v.is_relative() {
                    f.vocab_file = Some(base.join(v));
                }
            }
        }
    }

    pub fn options(&self) -> Result<DelimitedOptions> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Config(format!(
                "delimiter {:?} must be a single ASCII character",
                self.delimiter
            )));
        }
        Ok(DelimitedOptions {
            delimiter: self.delimiter as u8,
            has_header: self.has_header,
        })
    }

    pub fn load(&self) -> Result<Loaded> {
        load_delimited(&self.path, &self.schema, &self.columns, self.options()?)
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Rows skipped because they could not be parsed.
    pub skipped_rows: usize,
}

/// `x -> ln(1 + max(x, 0))`, the transform applied to integer fields.
pub fn log_transform(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// 64-bit FNV-1a. Stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Token-to-index table read from a vocabulary file.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = HashMap::new();
        for (i, t) in tokens.into_iter().enumerate() {
            index.entry(t.into()).or_insert(i as u32 + 1);
        }
        Vocabulary { index }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }

    /// Indices in use are `1..=len`.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }
}

/// Maps a token into `[0, vocab_size)`. Index 0 is the shared bucket for
/// unseen and empty tokens.
pub fn token_index(token: &str, vocab_size: usize, vocab: Option<&Vocabulary>) -> u32 {
    if token.is_empty() {
        return 0;
    }
    match vocab {
        Some(v) => v
            .get(token)
            .filter(|&i| (i as usize) < vocab_size)
            .unwrap_or(0),
        None if vocab_size <= 1 => 0,
        None => 1 + (stable_hash(token.as_bytes()) % (vocab_size as u64 - 1)) as u32,
    }
}

enum Slot {
    Cat {
        sensitive: bool,
        vocab_size: usize,
        vocab: Option<Vocabulary>,
    },
    Num {
        sensitive: bool,
        integer: bool,
    },
}

struct Plan {
    fields: Vec<(usize, Slot)>,
    label: usize,
    user: Option<usize>,
    order: Option<usize>,
    width: usize,
}

fn resolve_column(name: &str, columns: &ColumnMap, header: Option<&[String]>) -> Result<usize> {
    let target = columns.get(name);
    match (target, header) {
        (Some(ColumnRef::Index(i)), _) => Ok(*i),
        (Some(ColumnRef::Name(col)), Some(h)) => h.iter().position(|c| c == col).ok_or_else(|| {
            Error::Schema(format!(
                "column `{col}` (for field `{name}`) not found in header"
            ))
        }),
        (Some(ColumnRef::Name(col)), None) => Err(Error::Schema(format!(
            "column `{col}` (for field `{name}`) is referenced by name but the file has no header"
        ))),
        (None, Some(h)) => h
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header"))),
        (None, None) => Err(Error::Schema(format!(
            "column `{name}` is not mapped and the file has no header"
        ))),
    }
}

fn build_plan(
    schema: &FeatureSchema,
    columns: &ColumnMap,
    header: Option<&[String]>,
) -> Result<Plan> {
    let mut fields = Vec::with_capacity(schema.fields.len());
    for f in &schema.fields {
        let col = resolve_column(&f.name, columns, header)?;
        fields.push((col, slot_for(f)?));
    }
    let label = resolve_column(&schema.label_field, columns, header)?;
    let user = schema
        .user_id_field
        .as_deref()
        .map(|u| resolve_column(u, columns, header))
        .transpose()?;
    let order = schema
        .order_field
        .as_deref()
        .map(|o| resolve_column(o, columns, header))
        .transpose()?;
    let width = fields
        .iter()
        .map(|(c, _)| *c)
        .chain([label])
        .chain(user)
        .chain(order)
        .max()
        .unwrap_or(0)
        + 1;
    if let Some(h) = header {
        if width > h.len() {
            return Err(Error::Schema(format!(
                "column index {} out of range for a header with {} columns",
                width - 1,
                h.len()
            )));
        }
    }
    Ok(Plan {
        fields,
        label,
        user,
        order,
        width,
    })
}

fn slot_for(f: &FieldSpec) -> Result<Slot> {
    Ok(match f.kind {
        FieldKind::Categorical => {
            let vocab = f.vocab_file.as_deref().map(Vocabulary::read).transpose()?;
            let vocab_size = match (f.vocab_size, &vocab) {
                (Some(v), _) => v,
                (None, Some(voc)) => voc.len() + 1,
                (None, None) => {
                    return Err(Error::Schema(format!(
                        "categorical field `{}` needs a vocab_size or vocab_file",
                        f.name
                    )))
                }
            };
            Slot::Cat {
                sensitive: f.sensitive,
                vocab_size,
                vocab,
            }
        }
        FieldKind::Integer => Slot::Num {
            sensitive: f.sensitive,
            integer: true,
        },
        FieldKind::Float => Slot::Num {
            sensitive: f.sensitive,
            integer: false,
        },
    })
}

/// Decimal user ids are used as-is; anything else is hashed.
fn user_key(raw: &str) -> u64 {
    raw.parse::<u64>()
        .unwrap_or_else(|_| stable_hash(raw.as_bytes()))
}

fn parse_label(s: &str) -> Option<u8> {
    match s {
        "0" | "0.0" | "false" => Some(0),
        "1" | "1.0" | "true" => Some(1),
        _ => None,
    }
}

fn parse_row(row: &[&str], plan: &Plan) -> Option<Example> {
    if row.len() < plan.width {
        return None;
    }
    let mut ns = Features::default();
    let mut s = Features::default();
    for (col, slot) in &plan.fields {
        let raw = row[*col];
        match slot {
            Slot::Cat {
                sensitive,
                vocab_size,
                vocab,
            } => {
                let idx = token_index(raw, *vocab_size, vocab.as_ref());
                if *sensitive { &mut s } else { &mut ns }.cat.push(idx);
            }
            Slot::Num { sensitive, integer } => {
                let v = if *integer {
                    log_transform(raw.parse::<i64>().ok()? as f64)
                } else {
                    let v: f64 = raw.parse().ok()?;
                    if !v.is_finite() {
                        return None;
                    }
                    v
                };
                if *sensitive { &mut s } else { &mut ns }.num.push(v);
            }
        }
    }
    let label = parse_label(row[plan.label])?;
    let user_id = match plan.user {
        Some(c) if row[c].is_empty() => return None,
        Some(c) => Some(user_key(row[c])),
        None => None,
    };
    let order_key = match plan.order {
        Some(c) => Some(row[c].parse::<i64>().ok()?),
        None => None,
    };
    Some(Example {
        user_id,
        order_key,
        nonsensitive: ns,
        sensitive: s,
        label,
    })
}

/// Reads a delimited file into a dataset. Categorical tokens are looked up in
/// the field's vocabulary file when one is given and hashed otherwise; integer
/// fields go through [`log_transform`]. Rows that fail to parse are skipped
/// and counted.
pub fn load_delimited(
    path: &Path,
    schema: &FeatureSchema,
    columns: &ColumnMap,
    options: DelimitedOptions,
) -> Result<Loaded> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));

    let header = if options.has_header {
        let h = reader.byte_headers().map_err(|e| csv_error(path, e))?;
        Some(
            h.iter()
                .map(|c| String::from_utf8_lossy(c).into_owned())
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let plan = build_plan(schema, columns, header.as_deref())?;

    let mut examples = Vec::new();
    let mut skipped = 0;
    let mut record = csv::ByteRecord::new();
    loop {
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(csv_error(path, e)),
            Err(_) => {
                skipped += 1;
                continue;
            }
        }
        let fields: Option<Vec<&str>> =
            record.iter().map(|b| std::str::from_utf8(b).ok()).collect();
        match fields.and_then(|row| parse_row(&row, &plan)) {
            Some(e) => examples.push(e),
            None => skipped += 1,
        }
    }

    let mut schema = schema.clone();
    for ((_, slot), f) in plan.fields.iter().zip(&mut schema.fields) {
        if let Slot::Cat { vocab_size, .. } = slot {
            f.vocab_size = Some(*vocab_size);
        }
    }
    Ok(Loaded {
        dataset: Dataset::from_parts_unchecked(schema, examples),
        skipped_rows: skipped,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExampleSource;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn criteo_like() -> FeatureSchema {
        FeatureSchema {
            fields: vec![
                FieldSpec::categorical("campaign", 1000, false),
                FieldSpec::categorical("cat1", 64, true),
            ],
            label_field: "label".into(),
            user_id_field: None,
            order_field: None,
        }
    }

    #[test]
    fn maps_row_to_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "campaign,cat1,label\ncamp7,3,1\n");
        let loaded =
            load_delimited(&p, &criteo_like(), &ColumnMap::new(), Default::default()).unwrap();
        let ds = loaded.dataset;
        assert_eq!(loaded.skipped_rows, 0);
        assert_eq!(ds.len(), 1);
        assert_eq!(
            ds.nonsensitive(0).cat,
            vec![token_index("camp7", 1000, None)]
        );
        assert_eq!(ds.sensitive(0).cat, vec![token_index("3", 64, None)]);
        assert_eq!(ds.label(0), 1);
    }

    #[test]
    fn log_transform_points() {
        assert_eq!(log_transform(0.0), 0.0);
        assert_eq!(log_transform(-5.0), 0.0);
        assert!((log_transform(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integer_fields_are_log_transformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "n;campaign;label\n0;a;0\n-5;b;1\n9;c;1\n");
        let schema = FeatureSchema {
            fields: vec![
                FieldSpec::categorical("campaign", 10, false),
                FieldSpec::numeric("n", FieldKind::Integer, false),
            ],
            label_field: "label".into(),
            user_id_field: None,
            order_field: None,
        };
        let opts = DelimitedOptions {
            delimiter: b';',
            has_header: true,
        };
        let ds = load_delimited(&p, &schema, &ColumnMap::new(), opts)
            .unwrap()
            .dataset;
        let nums: Vec<f64> = (0..3).map(|i| ds.nonsensitive(i).num[0]).collect();
        assert_eq!(nums, vec![0.0, 0.0, 10f64.ln()]);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.csv",
            "campaign,cat1,label\na,b,1\nshort\na,b,7\nc,d,0\n",
        );
        let loaded =
            load_delimited(&p, &criteo_like(), &ColumnMap::new(), Default::default()).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        assert_eq!(loaded.skipped_rows, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "campaign,label\na,1\n");
        let err =
            load_delimited(&p, &criteo_like(), &ColumnMap::new(), Default::default()).unwrap_err();
        assert!(
            matches!(&err, Error::Schema(m) if m.contains("cat1")),
            "{err}"
        );
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_delimited(
            Path::new("/nonexistent/x.csv"),
            &criteo_like(),
            &ColumnMap::new(),
            Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn positional_columns_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "1\tx\ty\n");
        let mut cols = ColumnMap::new();
        cols.insert("label".into(), ColumnRef::Index(0));
        cols.insert("campaign".into(), ColumnRef::Index(2));
        cols.insert("cat1".into(), ColumnRef::Index(1));
        let opts = DelimitedOptions {
            delimiter: b'\t',
            has_header: false,
        };
        let ds = load_delimited(&p, &criteo_like(), &cols, opts)
            .unwrap()
            .dataset;
        assert_eq!(ds.nonsensitive(0).cat, vec![token_index("y", 1000, None)]);
        assert_eq!(ds.label(0), 1);
    }

    #[test]
    fn vocabulary_lookup_reserves_zero() {
        let voc = Vocabulary::from_tokens(["red", "green"]);
        assert_eq!(token_index("red", 3, Some(&voc)), 1);
        assert_eq!(token_index("green", 3, Some(&voc)), 2);
        assert_eq!(token_index("blue", 3, Some(&voc)), 0);
        assert_eq!(token_index("", 3, None), 0);
        assert_eq!(token_index("anything", 1, None), 0);
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_rows_never_panic(rows in proptest::collection::vec(
            proptest::collection::vec("[a-z0-9 .\\-]{0,6}", 0..5), 0..30)) {
            let dir = tempfile::tempdir().unwrap();
            let mut body = String::from("campaign,cat1,label\n");
            for r in &rows {
                body.push_str(&r.join(","));
                body.push('\n');
            }
            let p = write(&dir, "f.csv", &body);
            if let Ok(loaded) =
                load_delimited(&p, &criteo_like(), &ColumnMap::new(), Default::default())
            {
                proptest::prop_assert!(loaded.dataset.len() + loaded.skipped_rows <= rows.len());
                for ex in loaded.dataset.examples() {
                    proptest::prop_assert!(ex.label <= 1);
                    proptest::prop_assert!(ex.nonsensitive.cat[0] < 1000 && ex.sensitive.cat[0] < 64);
                }
            }
        }
    }
}
