//! Versioned binary container for datasets, models and adversarial batches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GEOATTK\0" | u32 version | str kind
//! u32 n | n × (str key, str value)           text metadata
//! u32 n | n × (str key, u64 value)           integer metadata
//! u32 n | n × (str key, f64 value)           float metadata
//! u32 n | n × (str name, u32 rank, rank × u64 dim, prod(dims) × f64)
//! u32 n | n × (str name, u64 len, len × u64)
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Floats are stored
//! as raw IEEE-754 bits, so a read-back is bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use geoattack_core::zoo::{Arch, AutoencoderPair, Classifier, Split, ToyDataset};
use geoattack_core::DenseArray;

pub const MAGIC: &[u8; 8] = b"GEOATTK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0} (expected {VERSION})")]
    Version(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("expected a {expected} container, found {found}")]
    Kind { expected: &'static str, found: String },
    #[error("missing entry {0}")]
    Missing(String),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub kind: String,
    pub text: BTreeMap<String, String>,
    pub ints: BTreeMap<String, u64>,
    pub floats: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, DenseArray>,
    pub arrays: BTreeMap<String, Vec<u64>>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_len(&mut out, self.text.len());
        for (k, v) in &self.text {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_len(&mut out, self.ints.len());
        for (k, v) in &self.ints {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_len(&mut out, self.floats.len());
        for (k, v) in &self.floats {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        put_len(&mut out, self.tensors.len());
        for (k, t) in &self.tensors {
            put_str(&mut out, k);
            put_len(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        put_len(&mut out, self.arrays.len());
        for (k, a) in &self.arrays {
            put_str(&mut out, k);
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let mut c = Container::new(&r.string("kind")?);
        for _ in 0..r.u32("text count")? {
            let k = r.string("text key")?;
            c.text.insert(k, r.string("text value")?);
        }
        for _ in 0..r.u32("int count")? {
            let k = r.string("int key")?;
            c.ints.insert(k, r.u64("int value")?);
        }
        for _ in 0..r.u32("float count")? {
            let k = r.string("float key")?;
            c.floats.insert(k, f64::from_bits(r.u64("float value")?));
        }
        for _ in 0..r.u32("tensor count")? {
            let k = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("tensor dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or(FormatError::Truncated("tensor data"))?;
            let data = (0..len)
                .map(|_| r.u64("tensor data").map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let t = DenseArray::new(shape, data).map_err(|e| FormatError::Invalid(format!("tensor {k}: {e}")))?;
            c.tensors.insert(k, t);
        }
        for _ in 0..r.u32("array count")? {
            let k = r.string("array name")?;
            let len = r.u64("array length")? as usize;
            if len > r.remaining() / 8 {
                return Err(FormatError::Truncated("array data"));
            }
            let a = (0..len).map(|_| r.u64("array data")).collect::<Result<Vec<_>>>()?;
            c.arrays.insert(k, a);
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_kind(&self, expected: &'static str) -> Result<()> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(FormatError::Kind {
                expected,
                found: self.kind.clone(),
            })
        }
    }

    fn int(&self, key: &str) -> Result<u64> {
        self.ints.get(key).copied().ok_or_else(|| FormatError::Missing(key.into()))
    }

    fn float(&self, key: &str) -> Result<f64> {
        self.floats.get(key).copied().ok_or_else(|| FormatError::Missing(key.into()))
    }

    fn tensor(&self, key: &str) -> Result<&DenseArray> {
        self.tensors.get(key).ok_or_else(|| FormatError::Missing(key.into()))
    }

    fn array(&self, key: &str) -> Result<&Vec<u64>> {
        self.arrays.get(key).ok_or_else(|| FormatError::Missing(key.into()))
    }

    /// Tensors named `{prefix}.000`, `{prefix}.001`, … in order.
    fn numbered(&self, prefix: &str) -> Vec<DenseArray> {
        (0..)
            .map_while(|i| self.tensors.get(&format!("{prefix}.{i:03}")).cloned())
            .collect()
    }

    fn put_numbered(&mut self, prefix: &str, params: &[DenseArray]) {
        for (i, p) in params.iter().enumerate() {
            self.tensors.insert(format!("{prefix}.{i:03}"), p.clone());
        }
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_len(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| FormatError::Invalid(format!("{what} is not UTF-8")))
    }
}

// ---- typed encodings ------------------------------------------------------

pub fn dataset_to_container(d: &ToyDataset) -> Container {
    let mut c = Container::new("dataset");
    c.ints.insert("classes".into(), d.classes as u64);
    c.ints.insert("size".into(), d.size as u64);
    c.ints.insert("seed".into(), d.seed);
    c.tensors.insert("images".into(), d.images.clone());
    c.arrays.insert("labels".into(), d.labels.iter().map(|&y| y as u64).collect());
    c.arrays.insert(
        "splits".into(),
        d.splits.iter().map(|s| u64::from(*s == Split::Test)).collect(),
    );
    c
}

pub fn dataset_from_container(c: &Container) -> Result<ToyDataset> {
    c.expect_kind("dataset")?;
    let d = ToyDataset {
        images: c.tensor("images")?.clone(),
        labels: c.array("labels")?.iter().map(|&y| y as usize).collect(),
        splits: c
            .array("splits")?
            .iter()
            .map(|&s| if s == 1 { Split::Test } else { Split::Train })
            .collect(),
        classes: c.int("classes")? as usize,
        size: c.int("size")? as usize,
        seed: c.int("seed")?,
    };
    d.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(d)
}

pub fn classifier_to_container(m: &Classifier) -> Container {
    let mut c = Container::new("classifier");
    c.text.insert("arch".into(), m.arch.tag().into());
    c.ints.insert("size".into(), m.size as u64);
    c.ints.insert("classes".into(), m.classes as u64);
    c.ints.insert("seed".into(), m.seed);
    c.ints.insert("epochs".into(), m.epochs as u64);
    c.floats.insert("accuracy".into(), m.accuracy);
    c.put_numbered("param", &m.params);
    c
}

pub fn classifier_from_container(c: &Container) -> Result<Classifier> {
    c.expect_kind("classifier")?;
    let tag = c.text.get("arch").ok_or_else(|| FormatError::Missing("arch".into()))?;
    let arch = Arch::from_tag(tag).ok_or_else(|| FormatError::Invalid(format!("unknown architecture {tag}")))?;
    let mut m = Classifier::from_params(
        arch,
        c.int("size")? as usize,
        c.int("classes")? as usize,
        c.numbered("param"),
    )
    .map_err(|e| FormatError::Invalid(e.to_string()))?;
    m.seed = c.int("seed")?;
    m.epochs = c.int("epochs")? as usize;
    m.accuracy = c.float("accuracy")?;
    Ok(m)
}

pub fn autoencoder_to_container(a: &AutoencoderPair) -> Container {
    let mut c = Container::new("autoencoder");
    c.ints.insert("size".into(), a.size as u64);
    c.ints.insert("seed".into(), a.seed);
    c.ints.insert("epochs".into(), a.epochs as u64);
    c.floats.insert("reconstruction_error".into(), a.reconstruction_error);
    c.put_numbered("encoder", &a.encoder);
    c.put_numbered("decoder", &a.decoder);
    c
}

pub fn autoencoder_from_container(c: &Container) -> Result<AutoencoderPair> {
    c.expect_kind("autoencoder")?;
    let mut a = AutoencoderPair::from_params(c.int("size")? as usize, c.numbered("encoder"), c.numbered("decoder"))
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    a.seed = c.int("seed")?;
    a.epochs = c.int("epochs")? as usize;
    a.reconstruction_error = c.float("reconstruction_error")?;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut c = Container::new("test");
        c.text.insert("a".into(), "b".into());
        c.ints.insert("n".into(), 7);
        c.floats.insert("x".into(), -0.1);
        c.floats.insert("z".into(), -0.0);
        c.tensors.insert("t".into(), DenseArray::new(vec![2, 3], vec![1.0, 2.5, -3.0, 0.1, 1e-300, 4.0]).unwrap());
        c.arrays.insert("v".into(), vec![1, u64::MAX]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.floats["z"].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Container::new("k").to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(FormatError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Container::from_bytes(&v2), Err(FormatError::Version(2))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
