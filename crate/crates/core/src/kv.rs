//! Flat key-value text format used to archive worlds, episodes and weights.
//!
//! ```text
//! halluc-kv 1 world
//! feature_dim = 32
//! class_mean.0 = 0.25 -1.5 ...
//! ```
//!
//! Floats are written in shortest round-trip form, so a parse of a written
//! document reproduces every value bit for bit.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "halluc-kv";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvDocument {
    kind: String,
    entries: Vec<(String, String)>,
}

/// Types that serialize to a [`KvDocument`].
pub trait KvCodec: Sized {
    const KIND: &'static str;
    fn write_kv(&self, doc: &mut KvDocument);
    fn read_kv(doc: &KvDocument) -> Result<Self>;

    fn to_kv_string(&self) -> String {
        let mut doc = KvDocument::new(Self::KIND);
        self.write_kv(&mut doc);
        doc.render()
    }

    fn from_kv_str(text: &str) -> Result<Self> {
        let doc = KvDocument::parse(text)?;
        if doc.kind != Self::KIND {
            return Err(Error::Parse(format!(
                "expected a '{}' document, found '{}'",
                Self::KIND,
                doc.kind
            )));
        }
        Self::read_kv(&doc)
    }
}

impl KvDocument {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_floats(&mut self, key: impl Into<String>, values: &[f64]) {
        let mut s = String::with_capacity(values.len() * 20);
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v:?}").expect("writing to a String");
        }
        self.entries.push((key.into(), s));
    }

    pub fn push_matrix(&mut self, key: &str, m: &Matrix) {
        self.push(format!("{key}.rows"), m.rows());
        self.push(format!("{key}.cols"), m.cols());
        self.push_floats(format!("{key}.data"), m.as_slice());
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("missing key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("bad value '{raw}' for key '{key}'")))
    }

    pub fn get_floats(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get_str(key)?;
        raw.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad float '{t}' in key '{key}'")))
            })
            .collect()
    }

    pub fn get_matrix(&self, key: &str) -> Result<Matrix> {
        let rows = self.get(&format!("{key}.rows"))?;
        let cols = self.get(&format!("{key}.cols"))?;
        let data = self.get_floats(&format!("{key}.data"))?;
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Parse(format!("{key}: {e}")))
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", self.kind);
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty document".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::Parse(format!("missing '{MAGIC}' header")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported format version {version}")));
        }
        let kind = parts
            .next()
            .ok_or_else(|| Error::Parse("missing document kind".into()))?
            .to_string();
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", lineno + 2)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { kind, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn floats_roundtrip_bitwise(values in proptest::collection::vec(-1e300f64..1e300, 0..40)) {
            let mut doc = KvDocument::new("probe");
            doc.push_floats("v", &values);
            let back = KvDocument::parse(&doc.render()).unwrap();
            let got = back.get_floats("v").unwrap();
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_is_validated() {
        assert!(KvDocument::parse("nope 1 x\n").is_err());
        assert!(KvDocument::parse("halluc-kv 9 x\n").is_err());
        assert!(KvDocument::parse("halluc-kv 1 x\nbroken line\n").is_err());
        let doc = KvDocument::parse("halluc-kv 1 x\n# comment\na = 3\n").unwrap();
        assert_eq!(doc.get::<usize>("a").unwrap(), 3);
        assert!(doc.get::<usize>("b").is_err());
    }
}
