//! GFD raster-sequence container.
//!
//! ```text
//! GFD1
//! shape=T,H,W
//! dtype=f32le
//! var=...
//! units=...
//! lat0=... lon0=... dlat=... dlon=...   (one key per line)
//! t0=YYYY-MM-DD
//! dt_days=N
//!
//! <T*H*W little-endian f32, C order, NaN = missing>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::field::{FieldMeta, GappyField, GeoRef, TimeAxis};

pub const GFD_MAGIC: &str = "GFD1";

pub fn encode_gfd(field: &GappyField) -> Vec<u8> {
    let (t, h, w) = field.dims();
    let m = &field.meta;
    let mut out = Vec::with_capacity(256 + t * h * w * 4);
    let header = format!(
        "{GFD_MAGIC}\nshape={t},{h},{w}\ndtype=f32le\nvar={}\nunits={}\nlat0={}\nlon0={}\ndlat={}\ndlon={}\nt0={}\ndt_days={}\n\n",
        m.var_name,
        m.units,
        m.geo.lat0,
        m.geo.lon0,
        m.geo.dlat,
        m.geo.dlon,
        m.time.t0.format("%Y-%m-%d"),
        m.time.dt_days
    );
    out.extend_from_slice(header.as_bytes());
    for (&v, &ok) in field.values().iter().zip(field.valid().iter()) {
        let x = if ok { v as f32 } else { f32::NAN };
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn write_gfd(field: &GappyField, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_gfd(field))?;
    Ok(())
}

/// Splits a `MAGIC\nkey=value...\n\n<payload>` container into its header
/// map and payload bytes.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &'static str,
    path: &Path,
) -> Result<(BTreeMap<String, String>, &'a [u8])> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| {
            if !bytes.starts_with(magic.as_bytes()) {
                Error::BadMagic {
                    path: path.to_path_buf(),
                    expected: magic,
                    found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
                }
            } else {
                Error::MalformedHeader("missing blank line after header".into())
            }
        })?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let first = lines.next().unwrap_or_default();
    if first != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: first.chars().take(16).collect(),
        });
    }
    let mut map = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("line without `=`: {line}")))?;
        map.insert(k.trim().to_string(), v.to_string());
    }
    Ok((map, &bytes[end + 2..]))
}

pub(crate) fn require<'m>(map: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::MalformedHeader(format!("missing key `{key}`")))
}

pub(crate) fn parse_key<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    require(map, key)?
        .trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad value for `{key}`")))
}

pub(crate) fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad shape `{s}`")))
        })
        .collect()
}

pub fn decode_gfd(bytes: &[u8], path: &Path) -> Result<GappyField> {
    let (map, payload) = split_container(bytes, GFD_MAGIC, path)?;
    let shape = parse_shape(require(&map, "shape")?)?;
    let [t, h, w] = shape[..] else {
        return Err(Error::MalformedHeader(format!("shape must have 3 axes, got {shape:?}")));
    };
    if require(&map, "dtype")? != "f32le" {
        return Err(Error::MalformedHeader("dtype must be f32le".into()));
    }
    let t0 = NaiveDate::parse_from_str(require(&map, "t0")?, "%Y-%m-%d")
        .map_err(|e| Error::MalformedHeader(format!("bad t0: {e}")))?;
    let meta = FieldMeta {
        geo: GeoRef {
            lat0: parse_key(&map, "lat0")?,
            lon0: parse_key(&map, "lon0")?,
            dlat: parse_key(&map, "dlat")?,
            dlon: parse_key(&map, "dlon")?,
        },
        time: TimeAxis {
            t0,
            dt_days: parse_key(&map, "dt_days")?,
        },
        var_name: require(&map, "var")?.to_string(),
        units: require(&map, "units")?.to_string(),
    };
    let n = t * h * w;
    if payload.len() != n * 4 {
        return Err(Error::ShapeMismatch(format!(
            "payload holds {} bytes, shape {t}x{h}x{w} needs {}",
            payload.len(),
            n * 4
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array3::from_shape_vec((t, h, w), vals).expect("length checked");
    GappyField::from_values(values, meta)
}

pub fn read_gfd(path: impl AsRef<Path>) -> Result<GappyField> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_gfd(&bytes, path)
}

/// Writes a boolean cube as a GFD with a 0/1 payload.
pub fn write_mask_gfd(mask: &Array3<bool>, meta: &FieldMeta, path: impl AsRef<Path>) -> Result<()> {
    let values = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let field = GappyField::from_values(values, meta.clone())?;
    write_gfd(&field, path)
}
