//! Feature file formats.
//!
//! CSV: header `id,label,f0,...,f{m-1}`, one sample per LF-terminated line,
//! label `-1` for unlabeled rows.
//!
//! Binary (`OCFT`): magic, u32 version = 1, u32 n, u32 m, u8 has_labels,
//! n*m little-endian f32 row-major, then n little-endian i32 labels when
//! has_labels is set. Ids are the row indices.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"OCFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl FeatureFormat {
    /// `.csv` files are CSV; everything else is read as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn ingest_features(path: &Path, format: FeatureFormat) -> Result<Dataset> {
    match format {
        FeatureFormat::Csv => parse_csv(&fs::read_to_string(path)?),
        FeatureFormat::Binary => parse_binary(&fs::read(path)?),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        at: format!("line {line}"),
        message: message.into(),
    }
}

fn label_from_file(raw: i64) -> Option<i64> {
    (raw >= 0).then_some(raw)
}

pub(crate) fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(parse_err(1, "header must start with `id,label`"));
    }
    for (j, name) in cols[2..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column `f{j}`, found `{name}`")));
        }
    }
    let m = cols.len() - 2;

    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(parse_err(lineno, "row needs an id and a label"));
        }
        if fields.len() - 2 != m {
            return Err(Error::DimensionMismatch {
                line: lineno,
                expected: m,
                found: fields.len() - 2,
            });
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad id `{}`: {e}", fields[0])))?;
        let label: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad label `{}`: {e}", fields[1])))?;
        let features = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map(f64::from)
                    .map_err(|e| parse_err(lineno, format!("bad feature `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(lineno, "non-finite feature"));
        }
        records.push(Record {
            id,
            label: label_from_file(label),
            features,
        });
    }
    Dataset::new(m, records)
}

pub(crate) fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let has_labels = dataset.records.iter().any(|r| r.label.is_some());
    let n = dataset.len();
    let m = dataset.dim;
    let mut out = Vec::with_capacity(HEADER_LEN + n * m * 4 + if has_labels { n * 4 } else { 0 });
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.push(u8::from(has_labels));
    for r in &dataset.records {
        for &x in &r.features {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if has_labels {
        for r in &dataset.records {
            let label = r.label.map_or(-1, |l| l as i32);
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    out
}

pub(crate) fn parse_binary(bytes: &[u8]) -> Result<Dataset> {
    let corrupt = |offset: usize, message: &str| Error::Parse {
        at: format!("byte {offset}"),
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt(0, "bad magic, expected OCFT"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n = u32_at(8) as usize;
    let m = u32_at(12) as usize;
    let has_labels = match bytes[16] {
        0 => false,
        1 => true,
        _ => return Err(corrupt(16, "has_labels must be 0 or 1")),
    };
    let feature_bytes = n
        .checked_mul(m)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| corrupt(8, "size overflow"))?;
    let label_bytes = if has_labels { n * 4 } else { 0 };
    let expected = HEADER_LEN + feature_bytes + label_bytes;
    if bytes.len() != expected {
        return Err(corrupt(
            bytes.len().min(expected),
            &format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }

    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let labels_start = HEADER_LEN + feature_bytes;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let base = HEADER_LEN + i * m * 4;
        let features: Vec<f64> = (0..m).map(|j| f64::from(f32_at(base + j * 4))).collect();
        if features.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(base, "non-finite feature"));
        }
        let label = if has_labels {
            let off = labels_start + i * 4;
            label_from_file(i64::from(i32::from_le_bytes(
                bytes[off..off + 4].try_into().expect("4 bytes"),
            )))
        } else {
            None
        };
        records.push(Record {
            id: i as u64,
            label,
            features,
        });
    }
    Dataset::new(m, records)
}

pub(crate) fn encode_csv(dataset: &Dataset) -> String {
    let mut out = String::from("id,label");
    for j in 0..dataset.dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for r in &dataset.records {
        out.push_str(&format!("{},{}", r.id, r.label.unwrap_or(-1)));
        for &x in &r.features {
            out.push_str(&format!(",{}", x as f32));
        }
        out.push('\n');
    }
    out
}

pub fn write_binary(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_binary(dataset))?;
    Ok(())
}

pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_csv(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_single_row() {
        let ds = parse_csv("id,label,f0,f1\n0,3,0.1,0.2").unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 1);
        let r = &ds.records()[0];
        assert_eq!(r.label, Some(3));
        assert_eq!(r.features, vec![f64::from(0.1f32), f64::from(0.2f32)]);
    }

    #[test]
    fn csv_unlabeled_and_errors() {
        let ds = parse_csv("id,label,f0\n4,-1,1.5\n").unwrap();
        assert_eq!(ds.records()[0].label, None);
        assert_eq!(ds.records()[0].id, 4);

        let err = parse_csv("id,label,f0,f1\n0,1,0.1,0.2\n1,1,0.1,0.2,0.3\n").unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { line: 3, expected: 2, found: 3 }));

        let err = parse_csv("id,label,f0\n0,1,abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref at, .. } if at == "line 2"));
        assert!(parse_csv("ident,label,f0\n").is_err());
        assert!(parse_csv("id,label,f1\n").is_err());
    }

    #[test]
    fn empty_binary() {
        let ds = Dataset::new(3, vec![]).unwrap();
        let bytes = encode_binary(&ds);
        assert_eq!(bytes.len(), 17);
        let back = parse_binary(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 3);
    }

    #[test]
    fn binary_header_layout() {
        let ds = Dataset::new(
            2,
            vec![Record {
                id: 0,
                label: Some(7),
                features: vec![1.0, -2.0],
            }],
        )
        .unwrap();
        let b = encode_binary(&ds);
        assert_eq!(&b[..4], b"OCFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(b[16], 1);
        assert_eq!(f32::from_le_bytes(b[17..21].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(b[21..25].try_into().unwrap()), -2.0);
        assert_eq!(i32::from_le_bytes(b[25..29].try_into().unwrap()), 7);
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn binary_rejects_truncation_and_bad_magic() {
        let ds = Dataset::new(
            2,
            vec![Record {
                id: 0,
                label: None,
                features: vec![1.0, 2.0],
            }],
        )
        .unwrap();
        let b = encode_binary(&ds);
        assert!(parse_binary(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(parse_binary(&bad).is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(parse_binary(&v2), Err(Error::VersionMismatch { found: 2, .. })));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..6, 0usize..12).prop_flat_map(|(m, n)| {
            prop::collection::vec(
                (
                    prop::option::of(0i64..1000),
                    prop::collection::vec(-1e6f32..1e6f32, m),
                ),
                n,
            )
            .prop_map(move |rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (label, f))| Record {
                        id: i as u64,
                        label,
                        features: f.into_iter().map(f64::from).collect(),
                    })
                    .collect();
                Dataset::new(m, records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_at_f32(ds in arb_dataset()) {
            let binary = parse_binary(&encode_binary(&ds)).unwrap();
            let csv = parse_csv(&encode_csv(&ds)).unwrap();
            for back in [binary, csv] {
                prop_assert_eq!(back.dim(), ds.dim());
                prop_assert_eq!(back.len(), ds.len());
                for (a, b) in ds.records().iter().zip(back.records()) {
                    prop_assert_eq!(a.label, b.label);
                    let bits = |v: &[f64]| v.iter().map(|x| (*x as f32).to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(&a.features), bits(&b.features));
                }
            }
        }
    }
}
