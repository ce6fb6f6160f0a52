//! `UMB1` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   "UMB1"                     magic
//! 4   u32                        container version (1)
//! 8   u32                        section count n
//! 12  n × { [u8; 4] tag, u64 offset, u64 length }
//! ..  section payloads, in table order
//! ```
//!
//! Numeric payloads are packed little-endian `f64`. The `META` section is
//! UTF-8 text with one `key=value` pair per line.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMB1";
pub const VERSION: u32 = 1;
const ENTRY_LEN: usize = 4 + 8 + 8;

pub type Tag = [u8; 4];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<(Tag, Vec<u8>)>,
}

fn tag_str(tag: &Tag) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    pub fn push_f64s(&mut self, tag: Tag, values: &[f64]) {
        self.push(tag, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn push_meta(&mut self, meta: &Metadata) {
        self.push(*b"META", meta.to_text().into_bytes());
    }

    pub fn tags(&self) -> impl Iterator<Item = &Tag> {
        self.sections.iter().map(|(t, _)| t)
    }

    pub fn section(&self, tag: &Tag) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Format(format!("missing section {}", tag_str(tag))))
    }

    pub fn f64s(&self, tag: &Tag) -> Result<Vec<f64>> {
        let bytes = self.section(tag)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "section {} length {} is not a multiple of 8",
                tag_str(tag),
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    /// Reads a numeric section and checks its element count.
    pub fn f64s_exact(&self, tag: &Tag, len: usize) -> Result<Vec<f64>> {
        let v = self.f64s(tag)?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "section {} holds {} values, expected {len}",
                tag_str(tag),
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn meta(&self) -> Result<Metadata> {
        let text = std::str::from_utf8(self.section(b"META")?)
            .map_err(|_| Error::Format("META section is not UTF-8".into()))?;
        Metadata::parse(text)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = 12 + ENTRY_LEN * self.sections.len();
        let mut out =
            Vec::with_capacity(header + self.sections.iter().map(|(_, p)| p.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, payload) in &self.sections {
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a UMB1 container".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let count = u32_at(8) as usize;
        let table_end = count
            .checked_mul(ENTRY_LEN)
            .and_then(|n| n.checked_add(12))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| Error::Format("truncated section table".into()))?;
        let mut sections = Vec::with_capacity(count);
        for k in 0..count {
            let e = 12 + k * ENTRY_LEN;
            let tag: Tag = bytes[e..e + 4].try_into().expect("4 bytes");
            let offset =
                u64::from_le_bytes(bytes[e + 4..e + 12].try_into().expect("8 bytes")) as usize;
            let len =
                u64::from_le_bytes(bytes[e + 12..e + 20].try_into().expect("8 bytes")) as usize;
            let end = offset
                .checked_add(len)
                .filter(|&end| offset >= table_end && end <= bytes.len())
                .ok_or_else(|| Error::Format(format!("section {} out of bounds", tag_str(&tag))))?;
            sections.push((tag, bytes[offset..end].to_vec()));
        }
        Ok(Container { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ordered `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata(Vec<(String, String)>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata key `{key}` is malformed")))
    }

    fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad metadata line `{l}`")))
            })
            .collect::<Result<_>>()
            .map(Metadata)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.push_f64s(*b"DATA", &[1.5]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"UMB1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(&bytes[12..16], b"DATA");
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 32);
        assert_eq!(&bytes[32..40], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"PNG\0....").is_err());
        let mut c = Container::new();
        c.push_f64s(*b"DATA", &[1.0, 2.0]);
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(c.section(b"NOPE").is_err());
        assert!(c.f64s_exact(b"DATA", 3).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let meta = Metadata::new().with("kind", "svm").with("seed", 42);
        let mut c = Container::new();
        c.push_meta(&meta);
        let back = Container::from_bytes(&c.to_bytes())
            .unwrap()
            .meta()
            .unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.parse_value::<u64>("seed").unwrap(), 42);
        assert!(back.parse_value::<u64>("kind").is_err());
    }

    proptest! {
        #[test]
        fn sections_survive_round_trip(values in prop::collection::vec(any::<f64>(), 0..50), raw in prop::collection::vec(any::<u8>(), 0..40)) {
            let mut c = Container::new();
            c.push_f64s(*b"VALS", &values);
            c.push(*b"RAW_", raw.clone());
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            let got = back.f64s(b"VALS").unwrap();
            prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.section(b"RAW_").unwrap(), raw.as_slice());
        }
    }
}
