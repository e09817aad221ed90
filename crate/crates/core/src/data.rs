//! Feature datasets, the FCF1 file format, splitting, batching, and a
//! synthetic domain-shifted generator.
//!
//! # FCF1 layout
//!
//! All integers and reals are little-endian.
//!
//! | field              | type                                   |
//! |--------------------|----------------------------------------|
//! | magic              | `b"FCF1"`                              |
//! | version            | u32 (= 1)                              |
//! | d                  | u32                                    |
//! | C                  | u32                                    |
//! | N                  | u64                                    |
//! | domain name        | u16 length + UTF-8 bytes               |
//! | class names        | C × (u16 length + UTF-8 bytes)         |
//! | class text features| C × d × f32, row-major                 |
//! | records            | N × (u32 label, d × f32)               |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Matrix};

pub const FCF1_MAGIC: [u8; 4] = *b"FCF1";
pub const FCF1_VERSION: u32 = 1;

/// Frozen features of one domain: per-sample image features with labels,
/// plus one text feature per class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub domain_name: String,
    pub class_names: Vec<String>,
    /// `C × d`
    pub class_text_features: Matrix,
    /// `N × d`
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureDataset {
    pub fn new(
        domain_name: impl Into<String>,
        class_names: Vec<String>,
        class_text_features: Matrix,
        features: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = FeatureDataset {
            domain_name: domain_name.into(),
            class_names,
            class_text_features,
            features,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if self.class_text_features.rows() != c {
            return Err(Error::Validation(format!(
                "{} class names but {} text feature rows",
                c,
                self.class_text_features.rows()
            )));
        }
        // A dataset with no samples still fixes d through its text table.
        if self.features.rows() > 0 && self.features.cols() != self.class_text_features.cols() {
            return Err(Error::Validation(format!(
                "image features have width {}, text features {}",
                self.features.cols(),
                self.class_text_features.cols()
            )));
        }
        if self.labels.len() != self.features.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.features.rows()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {bad} >= class count {c}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.class_text_features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features and labels of the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_fcf1_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let d = self.dim();
        let mut out = Vec::new();
        out.extend_from_slice(&FCF1_MAGIC);
        out.extend_from_slice(&FCF1_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(d, "d")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.num_classes(), "C")?.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        put_str(&mut out, &self.domain_name)?;
        for name in &self.class_names {
            put_str(&mut out, name)?;
        }
        put_reals(&mut out, self.class_text_features.data())?;
        for (row, &label) in self.features.row_iter().zip(&self.labels) {
            out.extend_from_slice(&(label as u32).to_le_bytes());
            put_reals(&mut out, row)?;
        }
        Ok(out)
    }

    pub fn from_fcf1_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { buf: bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != FCF1_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version_at = cur.pos;
        let version = cur.u32("version")?;
        if version != FCF1_VERSION {
            return Err(Error::format(version_at, format!("unsupported version {version}")));
        }
        let d = cur.u32("d")? as usize;
        let c = cur.u32("C")? as usize;
        let n_at = cur.pos;
        let n = cur.u64("N")?;
        let domain_name = cur.string("domain name")?;
        let mut class_names = Vec::with_capacity(c.min(1 << 16));
        for _ in 0..c {
            class_names.push(cur.string("class name")?);
        }

        // Declared sizes must account for every remaining byte.
        let record = 4u64 + 4 * d as u64;
        let expected = (c as u64)
            .checked_mul(d as u64)
            .and_then(|cd| cd.checked_mul(4))
            .and_then(|t| n.checked_mul(record).and_then(|r| r.checked_add(t)));
        let remaining = (bytes.len() - cur.pos as usize) as u64;
        match expected {
            Some(e) if e == remaining => {}
            Some(e) => {
                return Err(Error::format(
                    n_at,
                    format!("declared sizes need {e} payload bytes, file has {remaining}"),
                ))
            }
            None => return Err(Error::format(n_at, "declared sizes overflow")),
        }

        let text = cur.reals(c * d, "class text features")?;
        let class_text_features = Matrix::new(c, d, text)
            .map_err(|e| Error::format(cur.pos, format!("class text features: {e}")))?;
        let n = n as usize;
        let mut labels = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * d);
        for i in 0..n {
            let at = cur.pos;
            let label = cur.u32("label")? as usize;
            if label >= c {
                return Err(Error::Validation(format!(
                    "record {i} (byte {at}) has label {label} but only {c} classes"
                )));
            }
            labels.push(label);
            feats.extend(cur.reals(d, "features")?);
        }
        let features = Matrix::new(n, d, feats)
            .map_err(|e| Error::format(cur.pos, format!("features: {e}")))?;
        FeatureDataset::new(domain_name, class_names, class_text_features, features, labels)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} = {v} does not fit in u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Validation(format!("string of {} bytes is too long", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_reals(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for &v in values {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Validation(format!("{v} is not representable as f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        let end = start.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.pos, format!("truncated while reading {what}"))
        })?;
        self.pos = end as u64;
        Ok(&self.buf[start..end])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at, format!("{what} is not valid UTF-8")))
    }

    fn reals(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_feature_file(ds: &FeatureDataset, path: &Path) -> Result<()> {
    write_atomic(path, &ds.to_fcf1_bytes()?)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureDataset> {
    FeatureDataset::from_fcf1_bytes(&fs::read(path)?)
}

/// Header fields of an FCF1 file, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub dim: usize,
    pub num_classes: usize,
    pub num_samples: u64,
    pub domain_name: String,
    pub class_names: Vec<String>,
}

/// Reads and fully validates a file, returning its header.
pub fn inspect_feature_file(path: &Path) -> Result<FeatureFileHeader> {
    let ds = read_feature_file(path)?;
    Ok(FeatureFileHeader {
        version: FCF1_VERSION,
        dim: ds.dim(),
        num_classes: ds.num_classes(),
        num_samples: ds.len() as u64,
        domain_name: ds.domain_name,
        class_names: ds.class_names,
    })
}

/// Index partition of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then ⌊0.6n⌋ train, ⌊0.2n⌋ validation, remainder test.
pub fn split_60_20_20(n: usize, seed: u64) -> Result<SplitDataset> {
    if n < 5 {
        return Err(Error::param(format!("need at least 5 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 6 / 10;
    let n_valid = n * 2 / 10;
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(SplitDataset {
        train: idx,
        valid,
        test,
    })
}

/// Shuffles `indices` and cuts consecutive batches. A trailing batch of one
/// sample is dropped because the contrastive loss is degenerate there.
pub fn make_batches<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mixes a base seed with a stream tag (splitmix64 finaliser), giving
/// independent seeds per client and per purpose.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-coordinate noise on the "style" half of the coordinates.
pub const SYNTH_STYLE_NOISE: f64 = 0.8;
/// Per-coordinate noise on the remaining coordinates.
pub const SYNTH_CONTENT_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub shift: f64,
    pub seed: u64,
}

/// Generates a suite of domains sharing one class-text table.
///
/// Class text vectors are random orthonormal. A random half of the
/// coordinates is designated as style coordinates: each domain adds its own
/// offset of norm `shift` inside that subspace to every class mean, and
/// sample noise there is larger than on the other coordinates. Samples are
/// L2-normalised and rounded to `f32` precision so that the in-memory suite
/// equals what an FCF1 file stores.
pub fn generate_synthetic_suite(spec: &SynthSpec) -> Result<Vec<FeatureDataset>> {
    let SynthSpec {
        n_domains,
        n_per_domain,
        dim: d,
        n_classes: c,
        shift,
        seed,
    } = *spec;
    if n_domains < 2 {
        return Err(Error::param("need at least 2 domains"));
    }
    if c < 2 || d < c {
        return Err(Error::param(format!("need 2 <= classes <= dim, got C={c}, d={d}")));
    }
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::param(format!("shift must be non-negative, got {shift}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
    while basis.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = l2_norm(&v);
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let class_text: Vec<f64> = basis.iter().flatten().map(|&v| round_f32(v)).collect();
    let class_text = Matrix::new(c, d, class_text)?;

    let mut coords: Vec<usize> = (0..d).collect();
    coords.shuffle(&mut rng);
    let mut is_style = vec![false; d];
    for &j in &coords[..d / 2] {
        is_style[j] = true;
    }
    let noise: Vec<f64> = is_style
        .iter()
        .map(|&s| if s { SYNTH_STYLE_NOISE } else { SYNTH_CONTENT_NOISE })
        .collect();

    let class_names: Vec<String> = (0..c).map(|k| format!("class{k}")).collect();
    let mut suite = Vec::with_capacity(n_domains);
    for dom in 0..n_domains {
        let mut offset: Vec<f64> = is_style
            .iter()
            .map(|&s| if s { gauss(&mut rng) } else { 0.0 })
            .collect();
        let norm = l2_norm(&offset);
        if norm > 0.0 {
            offset.iter_mut().for_each(|v| *v *= shift / norm);
        }
        let mut feats = Vec::with_capacity(n_per_domain * d);
        let mut labels = Vec::with_capacity(n_per_domain);
        for i in 0..n_per_domain {
            let label = i % c;
            let mut x: Vec<f64> = (0..d)
                .map(|j| basis[label][j] + offset[j] + noise[j] * gauss(&mut rng))
                .collect();
            let norm = l2_norm(&x).max(1e-12);
            x.iter_mut().for_each(|v| *v = round_f32(*v / norm));
            feats.extend(x);
            labels.push(label);
        }
        suite.push(FeatureDataset::new(
            format!("domain{dom}"),
            class_names.clone(),
            class_text.clone(),
            Matrix::new(n_per_domain, d, feats)?,
            labels,
        )?);
    }
    Ok(suite)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
