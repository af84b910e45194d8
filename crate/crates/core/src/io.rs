//! File formats: the `TSIM` array container, 16-bit PGM and CSV curves,
//! plus container encodings of the PSF basis and the P2S regressor.
//!
//! Container layout (all integers little-endian):
//! `"TSIM"`, version `u16`, dtype tag `u8` (1 = f64), dimension count
//! `u32`, dimensions `u64` each, payload `f64` LE, metadata length `u64`,
//! metadata as UTF-8 `key=value` lines.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::psfbasis::{Activation, BasisProvenance, P2SModel, PsfBasis};

pub const MAGIC: &[u8; 4] = b"TSIM";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// An n-dimensional f64 array with ordered `key=value` metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayContainer {
    pub data: ArrayD<f64>,
    pub metadata: Vec<(String, String)>,
}

impl ArrayContainer {
    pub fn new(data: ArrayD<f64>) -> Self {
        Self { data, metadata: Vec::new() }
    }

    pub fn from_2d(a: &Array2<f64>) -> Self {
        Self::new(a.clone().into_dyn())
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format(format!("missing metadata key {key}")))
    }

    pub fn to_2d(&self) -> Result<Array2<f64>> {
        self.data.clone().into_dimensionality().map_err(|_| Error::Format(format!("expected a 2-D array, got shape {:?}", self.data.shape())))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.data.len() * 8 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.data.ndim() as u32).to_le_bytes());
        for d in self.data.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return format_err(format!("metadata entry {k:?} cannot be encoded as a key=value line"));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(4)? != MAGIC {
            return format_err("not a TSIM container");
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return format_err(format!("unsupported container version {version}"));
        }
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F64 {
            return format_err(format!("unsupported dtype tag {dtype}"));
        }
        let ndim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        if count.checked_mul(8).is_none_or(|n| n > bytes.len()) {
            return format_err("payload shorter than the dimensions require");
        }
        let payload = cur.take(count * 8)?;
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let meta_len = cur.u64()? as usize;
        let meta = std::str::from_utf8(cur.take(meta_len)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        if cur.at != bytes.len() {
            return format_err(format!("{} trailing bytes after metadata", bytes.len() - cur.at));
        }
        let metadata = meta
            .lines()
            .map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| Error::Format(format!("bad metadata line {l:?}"))))
            .collect::<Result<_>>()?;
        let data = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { data, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return format_err("truncated container");
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number {t:?}")))).collect()
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} {s:?}")))
}

/// `(M + 1) x K x K` array, mean kernel first.
pub fn basis_to_container(b: &PsfBasis) -> ArrayContainer {
    let k = b.kernel_size();
    let mut data = Vec::with_capacity((b.m() + 1) * k * k);
    data.extend(b.mean.iter());
    for phi in &b.kernels {
        data.extend(phi.iter());
    }
    ArrayContainer::new(ArrayD::from_shape_vec(IxDyn(&[b.m() + 1, k, k]), data).expect("basis shape"))
        .with("kind", "psf-basis")
        .with("sigma", join(&b.sigma))
        .with("variances", join(&b.variances))
        .with("n_modes", b.provenance.n_modes)
        .with("dr0_min", format!("{:?}", b.provenance.dr0_range.0))
        .with("dr0_max", format!("{:?}", b.provenance.dr0_range.1))
        .with("samples", b.provenance.samples)
}

pub fn basis_from_container(c: &ArrayContainer) -> Result<PsfBasis> {
    if c.get("kind") != Some("psf-basis") {
        return format_err("container does not hold a PSF basis");
    }
    let shape = c.data.shape();
    if shape.len() != 3 || shape[1] != shape[2] || shape[0] == 0 {
        return format_err(format!("bad basis shape {shape:?}"));
    }
    let k = shape[1];
    let slab = |i: usize| Array2::from_shape_fn((k, k), |(r, q)| c.data[[i, r, q]]);
    let sigma = split(c.require("sigma")?)?;
    if sigma.len() != shape[0] - 1 {
        return format_err("sigma count does not match the kernel count");
    }
    Ok(PsfBasis {
        mean: slab(0),
        kernels: (1..shape[0]).map(slab).collect(),
        sigma,
        variances: split(c.require("variances")?)?,
        provenance: BasisProvenance {
            n_modes: parse(c.require("n_modes")?, "mode count")?,
            dr0_range: (parse(c.require("dr0_min")?, "D/r0")?, parse(c.require("dr0_max")?, "D/r0")?),
            samples: parse(c.require("samples")?, "sample count")?,
        },
    })
}

/// Parameters as a 1-D array; shape and scaling in the metadata.
pub fn p2s_to_container(m: &P2SModel) -> ArrayContainer {
    let widths: Vec<String> = m.widths().iter().map(|w| w.to_string()).collect();
    ArrayContainer::new(ArrayD::from_shape_vec(IxDyn(&[m.parameters().len()]), m.parameters()).expect("parameter vector"))
        .with("kind", "p2s-model")
        .with("widths", widths.join(","))
        .with("activation", match m.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
        .with("input_scale", join(&m.input_scale))
        .with("output_scale", format!("{:?}", m.output_scale))
        .with("validation_error", format!("{:?}", m.validation_error))
}

pub fn p2s_from_container(c: &ArrayContainer) -> Result<P2SModel> {
    if c.get("kind") != Some("p2s-model") {
        return format_err("container does not hold a P2S model");
    }
    let widths: Vec<usize> = c.require("widths")?.split(',').map(|w| parse(w, "width")).collect::<Result<_>>()?;
    let activation = match c.require("activation")? {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        other => return format_err(format!("unknown activation {other}")),
    };
    let params: Vec<f64> = c.data.iter().copied().collect();
    P2SModel::from_parameters(
        &widths,
        &params,
        activation,
        split(c.require("input_scale")?)?,
        parse(c.require("output_scale")?, "output scale")?,
        parse(c.require("validation_error")?, "validation error")?,
    )
}

/// Binary 16-bit PGM (big-endian samples), mapping `[lo, hi]` linearly to
/// `0..=65535` with clamping. `None` uses the image's own range.
pub fn write_pgm16(path: &Path, image: &Array2<f64>, range: Option<(f64, f64)>) -> Result<()> {
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = image.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in image.iter() {
        let q = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Samples and maximum value of a binary PGM (`P5`), 8 or 16 bit.
pub fn read_pgm(path: &Path) -> Result<(Array2<u16>, u16)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return format_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    if fields[0] != "P5" {
        return format_err("not a binary PGM");
    }
    let w: usize = parse(&fields[1], "width")?;
    let h: usize = parse(&fields[2], "height")?;
    let maxval: u16 = parse(&fields[3], "maximum value")?;
    if maxval == 0 {
        return format_err("PGM maximum value must be positive");
    }
    let width = if maxval < 256 { 1 } else { 2 };
    if bytes.len() != at + w * h * width {
        return format_err("PGM payload size mismatch");
    }
    let data = if width == 1 {
        bytes[at..].iter().map(|&b| b as u16).collect()
    } else {
        bytes[at..].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok((Array2::from_shape_vec((h, w), data).map_err(|e| Error::Format(e.to_string()))?, maxval))
}

/// A PGM scaled to `[0, 1]` by its maximum value.
pub fn read_pgm_unit(path: &Path) -> Result<Array2<f64>> {
    let (raw, maxval) = read_pgm(path)?;
    Ok(raw.mapv(|v| v as f64 / maxval as f64))
}

/// CSV with a header row; numbers use `.` decimals and round-trip.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return format_err(format!("row has {} fields, header has {}", r.len(), header.len()));
        }
        s.push_str(&r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Hex SHA-256 of a canonical configuration text.
pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn container_round_trip_is_bitwise() {
        let a = arr2(&[[1.0, -0.0, f64::MIN_POSITIVE], [1e300, std::f64::consts::PI, -2.5]]);
        let c = ArrayContainer::from_2d(&a).with("seed", 7).with("note", "a=b");
        let back = ArrayContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get("note"), Some("a=b"));
        let b = back.to_2d().unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn container_rejects_damage() {
        let c = ArrayContainer::from_2d(&arr2(&[[1.0, 2.0]]));
        let bytes = c.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(ArrayContainer::from_bytes(&bad), Err(Error::Format(_))));
        assert!(ArrayContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(ArrayContainer::from_bytes(&long).is_err());
        assert!(ArrayContainer::from_bytes(b"PNG!").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = arr2(&[[0.0, 0.5], [1.0, 2.0]]);
        write_pgm16(&p, &img, Some((0.0, 1.0))).unwrap();
        let (back, maxval) = read_pgm(&p).unwrap();
        assert_eq!(maxval, 65535);
        assert_eq!(back, arr2(&[[0u16, 32768], [65535, 65535]]));
        let q = dir.path().join("b.pgm");
        std::fs::write(&q, b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm_unit(&q).unwrap(), arr2(&[[0.0, 1.0]]));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, &["f", "otf"], &[vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "f,otf\n0.0,1.0\n0.5,0.25\n");
        assert!(write_csv(&p, &["f"], &[vec![1.0, 2.0]]).is_err());
    }
}
