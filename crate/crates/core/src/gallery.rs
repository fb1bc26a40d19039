//! The searchable face collection.
//!
//! Records are stored column-wise: ids, a packed `N × A` attribute block and a
//! packed `N × F` feature block, so the retrieval scan walks contiguous memory.
//!
//! Packed file layout (little-endian):
//!
//! ```text
//! "GGAL" | version u32 | N u64 | A u32 | F u32
//! then N times: id_len u32 | id UTF-8 | A bytes (0x00 = -1, 0x01 = +1) | F × f32
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback_sim::AttributeVector;
use crate::rng::SeedStream;

pub const PACKED_MAGIC: &[u8; 4] = b"GGAL";
pub const PACKED_VERSION: u32 = 1;
pub const DEFAULT_FEATURE_DIM: usize = 256;

/// One record as it appears in a JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub id: String,
    pub attributes: AttributeVector,
    pub features: Vec<f32>,
}

/// Borrowed view of one stored record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordRef<'a> {
    pub index: usize,
    pub id: &'a str,
    pub attributes: &'a [i8],
    pub features: &'a [f32],
}

impl RecordRef<'_> {
    pub fn to_record(&self) -> GalleryRecord {
        GalleryRecord {
            id: self.id.to_owned(),
            attributes: AttributeVector::new(self.attributes.to_vec())
                .expect("stored attributes are ±1"),
            features: self.features.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gallery {
    attrs: usize,
    feat_dim: usize,
    ids: Vec<String>,
    attributes: Vec<i8>,
    features: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for Gallery {
    fn eq(&self, other: &Self) -> bool {
        self.attrs == other.attrs
            && self.feat_dim == other.feat_dim
            && self.ids == other.ids
            && self.attributes == other.attributes
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Gallery {
    pub fn new(attrs: usize, feat_dim: usize) -> Self {
        Self {
            attrs,
            feat_dim,
            ..Self::default()
        }
    }

    pub fn from_records(
        attrs: usize,
        feat_dim: usize,
        records: impl IntoIterator<Item = GalleryRecord>,
    ) -> Result<Self> {
        let mut g = Self::new(attrs, feat_dim);
        for (i, r) in records.into_iter().enumerate() {
            g.push_checked(&r.id, &r.attributes, &r.features, i + 1)?;
        }
        Ok(g)
    }

    pub fn push(&mut self, record: GalleryRecord) -> Result<()> {
        let line = self.len() + 1;
        self.push_checked(&record.id, &record.attributes, &record.features, line)
    }

    fn push_checked(&mut self, id: &str, attributes: &[i8], features: &[f32], line: usize) -> Result<()> {
        if attributes.len() != self.attrs {
            return Err(Error::Schema {
                line,
                message: format!(
                    "expected {} attributes, found {}",
                    self.attrs,
                    attributes.len()
                ),
            });
        }
        if attributes.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::Schema {
                line,
                message: "attributes must be ±1".into(),
            });
        }
        if features.len() != self.feat_dim {
            return Err(Error::Schema {
                line,
                message: format!(
                    "expected {} features, found {}",
                    self.feat_dim,
                    features.len()
                ),
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::Schema {
                line,
                message: "features must be finite".into(),
            });
        }
        if self.index.contains_key(id) {
            return Err(Error::Integrity {
                line,
                message: format!("duplicate id {id:?}"),
            });
        }
        self.index.insert(id.to_owned(), self.ids.len());
        self.ids.push(id.to_owned());
        self.attributes.extend_from_slice(attributes);
        self.features.extend_from_slice(features);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn attrs(&self) -> usize {
        self.attrs
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row-major `N × F` feature block.
    pub fn feature_matrix(&self) -> &[f32] {
        &self.features
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn attributes(&self, i: usize) -> &[i8] {
        &self.attributes[i * self.attrs..(i + 1) * self.attrs]
    }

    pub fn record(&self, i: usize) -> RecordRef<'_> {
        RecordRef {
            index: i,
            id: &self.ids[i],
            attributes: self.attributes(i),
            features: self.features(i),
        }
    }

    pub fn get(&self, i: usize) -> Result<RecordRef<'_>> {
        if i < self.len() {
            Ok(self.record(i))
        } else {
            Err(Error::Index {
                index: i,
                len: self.len(),
            })
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = RecordRef<'_>> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Records `range` as a new gallery, preserving order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Gallery {
        let mut g = Gallery::new(self.attrs, self.feat_dim);
        for i in range {
            let r = self.record(i);
            g.index.insert(r.id.to_owned(), g.ids.len());
            g.ids.push(r.id.to_owned());
            g.attributes.extend_from_slice(r.attributes);
            g.features.extend_from_slice(r.features);
        }
        g
    }

    /// Scale every feature vector to unit L2 norm (zero vectors are kept).
    pub fn l2_normalize(&mut self) {
        let f = self.feat_dim;
        if f == 0 {
            return;
        }
        for row in self.features.chunks_mut(f) {
            let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row {
                    *x = (f64::from(*x) / norm) as f32;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub l2_normalize: bool,
}

pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Gallery> {
    ingest_jsonl_with(path, IngestOptions::default())
}

pub fn ingest_jsonl_with(path: impl AsRef<Path>, options: IngestOptions) -> Result<Gallery> {
    let reader = BufReader::new(File::open(path)?);
    read_jsonl(reader, options)
}

pub fn read_jsonl(reader: impl BufRead, options: IngestOptions) -> Result<Gallery> {
    let mut gallery: Option<Gallery> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Raw {
            id: String,
            attributes: Vec<i64>,
            features: Vec<f32>,
        }
        let raw: Raw = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.attributes.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::Schema {
                line: lineno,
                message: "attributes must be ±1".into(),
            });
        }
        let attributes: Vec<i8> = raw.attributes.iter().map(|&v| v as i8).collect();
        let g = gallery.get_or_insert_with(|| Gallery::new(attributes.len(), raw.features.len()));
        g.push_checked(&raw.id, &attributes, &raw.features, lineno)?;
    }
    let mut g = gallery.unwrap_or_default();
    if options.l2_normalize {
        g.l2_normalize();
    }
    Ok(g)
}

pub fn write_jsonl(g: &Gallery, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in g.iter() {
        serde_json::to_writer(&mut w, &r.to_record()).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_packed(g: &Gallery, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_packed(g, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_packed(g: &Gallery, w: &mut impl Write) -> Result<()> {
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&PACKED_VERSION.to_le_bytes())?;
    w.write_all(&(g.len() as u64).to_le_bytes())?;
    w.write_all(&(g.attrs as u32).to_le_bytes())?;
    w.write_all(&(g.feat_dim as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(g.attrs + 4 * g.feat_dim);
    for r in g.iter() {
        let id = r.id.as_bytes();
        let id_len = u32::try_from(id.len())
            .map_err(|_| Error::Format(format!("id of {} bytes is too long", id.len())))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        buf.clear();
        buf.extend(r.attributes.iter().map(|&v| u8::from(v > 0)));
        for x in r.features {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<Gallery> {
    read_packed(&mut BufReader::new(File::open(path)?))
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corruption(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_packed(r: &mut impl Read) -> Result<Gallery> {
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(r, &mut magic, "magic")?;
    if &magic != PACKED_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or_corrupt(r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != PACKED_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    read_exact_or_corrupt(r, &mut b8, "record count")?;
    let n = u64::from_le_bytes(b8);
    read_exact_or_corrupt(r, &mut b4, "attribute count")?;
    let attrs = u32::from_le_bytes(b4) as usize;
    read_exact_or_corrupt(r, &mut b4, "feature dimension")?;
    let feat_dim = u32::from_le_bytes(b4) as usize;

    let mut g = Gallery::new(attrs, feat_dim);
    let mut attr_bytes = vec![0u8; attrs];
    let mut feat_bytes = vec![0u8; 4 * feat_dim];
    let mut features = vec![0f32; feat_dim];
    let mut attributes = vec![0i8; attrs];
    for i in 0..n {
        let what = format!("record {i}");
        read_exact_or_corrupt(r, &mut b4, &what)?;
        let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
        read_exact_or_corrupt(r, &mut id, &what)?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::Corruption(format!("record {i} id is not UTF-8")))?;
        read_exact_or_corrupt(r, &mut attr_bytes, &what)?;
        for (dst, &b) in attributes.iter_mut().zip(&attr_bytes) {
            *dst = match b {
                0 => -1,
                1 => 1,
                other => {
                    return Err(Error::Corruption(format!(
                        "record {i} has attribute byte {other:#04x}"
                    )))
                }
            };
        }
        read_exact_or_corrupt(r, &mut feat_bytes, &what)?;
        for (dst, chunk) in features.iter_mut().zip(feat_bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        }
        g.push_checked(&id, &attributes, &features, i as usize + 1)
            .map_err(|e| Error::Corruption(e.to_string()))?;
    }
    Ok(g)
}

/// Load a gallery, choosing the reader from the file extension
/// (`.jsonl`/`.json` are JSON lines, anything else is packed).
pub fn load_any(path: impl AsRef<Path>) -> Result<Gallery> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => ingest_jsonl(path),
        _ => load_packed(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub attrs: usize,
    pub feat_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// The `F × A` mixing matrix the synthetic generator derives from `seed`.
pub fn mixing_matrix(attrs: usize, feat_dim: usize, seed: u64) -> Vec<f64> {
    let scale = 1.0 / (attrs as f64).sqrt();
    let mut rng = SeedStream::new(seed).rng_for("synthetic/mixing");
    (0..feat_dim * attrs)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Random faces whose features are a noisy nonlinear image of their attributes:
/// `features = tanh(M · attributes + ε)`.
pub fn gen_synthetic(spec: SyntheticSpec) -> Result<Gallery> {
    let SyntheticSpec {
        n,
        attrs,
        feat_dim,
        noise,
        seed,
    } = spec;
    if n == 0 || attrs == 0 || feat_dim == 0 {
        return Err(Error::Config(
            "synthetic gallery dimensions must be at least 1".into(),
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and ≥ 0, got {noise}")));
    }
    let mixing = mixing_matrix(attrs, feat_dim, seed);
    let root = SeedStream::new(seed);
    let mut attr_rng = root.rng_for("synthetic/attributes");
    let mut noise_rng = root.rng_for("synthetic/noise");
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let width = n.to_string().len().max(6);

    let mut g = Gallery::new(attrs, feat_dim);
    let mut features = vec![0f32; feat_dim];
    for i in 0..n {
        let attributes: Vec<i8> = (0..attrs)
            .map(|_| if attr_rng.random::<bool>() { 1 } else { -1 })
            .collect();
        for (k, out) in features.iter_mut().enumerate() {
            let row = &mixing[k * attrs..(k + 1) * attrs];
            let dot: f64 = row.iter().zip(&attributes).map(|(m, &a)| m * f64::from(a)).sum();
            let eps = if noise > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
            *out = (dot + eps).tanh() as f32;
        }
        g.push_checked(&format!("syn-{i:0width$}"), &attributes, &features, i + 1)?;
    }
    Ok(g)
}

/// Number of records in the leading (training) part of a split.
pub fn split_point(n: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    // Tolerate representation error so that k/n * n lands on k.
    let exact = train_fraction * n as f64;
    Ok(((exact * (1.0 + 1e-12)).floor() as usize).min(n))
}

/// Prefix split into (train, test), preserving stored order.
pub fn split(g: &Gallery, train_fraction: f64) -> Result<(Gallery, Gallery)> {
    let cut = split_point(g.len(), train_fraction)?;
    Ok((g.slice(0..cut), g.slice(cut..g.len())))
}
