//! On-disk dataset container: one tensor file per sample plus a text manifest.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! magic "ILTF" | version u32 = 1 | dtype u8 (1 = f32) | rank u8 | dims u32 × rank | payload
//! ```
//!
//! Manifest lines are `relative_path,architecture_index,origin,split` with
//! origin `G`/`R` and split `train`/`val`/`test`; `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::{ArchitectureData, Dataset, Origin, Sample, SampleKey, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

const MAGIC: &[u8; 4] = b"ILTF";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a tensor file image; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| fail(at, format!("truncated: need {n} bytes, file has {}", bytes.len())))
    };
    if take(0, 4)? != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let dtype = take(8, 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(fail(8, format!("unsupported dtype code {dtype}")));
    }
    let rank = take(9, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut at = 10;
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize);
        at += 4;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(10, format!("shape {shape:?} overflows")))?;
    let payload = take(at, count * 4)?;
    if bytes.len() != at + count * 4 {
        return Err(fail(
            at + count * 4,
            format!("{} trailing bytes after payload", bytes.len() - at - count * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(10, e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Writes every sample of `dataset` below `dir` and the manifest listing them.
pub fn write_container(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# relative_path,architecture_index,origin,split\n");
    for arch in &dataset.architectures {
        for s in arch.iter() {
            let rel = s.key.relative_path();
            write_tensor(&dir.join(&rel), &s.image)?;
            manifest.push_str(&format!(
                "{rel},{},{},{}\n",
                s.key.arch, s.key.origin, s.key.split
            ));
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

fn parse_line(line: &str, ordinal: usize) -> std::result::Result<(String, SampleKey), String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let [rel, arch, origin, split] = fields[..] else {
        return Err(format!("expected 4 comma-separated fields, got {}", fields.len()));
    };
    let arch: usize = arch
        .parse()
        .map_err(|_| format!("bad architecture index `{arch}`"))?;
    let origin: Origin = origin.parse()?;
    let split: Split = split.parse()?;
    let index = Path::new(rel)
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(ordinal);
    Ok((
        rel.to_string(),
        SampleKey {
            arch,
            origin,
            split,
            index,
        },
    ))
}

/// Reads a container written by [`write_container`] (or by hand).
pub fn read_container(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut by_arch: BTreeMap<usize, ArchitectureData> = BTreeMap::new();
    let mut geometry: Option<Vec<usize>> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (rel, key) = parse_line(line, lineno).map_err(|detail| Error::Manifest {
            path: manifest_path.clone(),
            line: lineno + 1,
            detail,
        })?;
        let image = read_tensor(&dir.join(&rel))?;
        if image.shape().len() != 3 || image.shape()[1] != image.shape()[2] {
            return Err(Error::Format {
                path: dir.join(&rel),
                offset: 10,
                detail: format!("expected a square [C, H, W] image, got {:?}", image.shape()),
            });
        }
        match &geometry {
            None => geometry = Some(image.shape().to_vec()),
            Some(g) if g != image.shape() => {
                return Err(Error::Format {
                    path: dir.join(&rel),
                    offset: 10,
                    detail: format!("shape {:?} differs from {:?}", image.shape(), g),
                })
            }
            _ => {}
        }
        let entry = by_arch.entry(key.arch).or_insert_with(|| ArchitectureData {
            arch: key.arch,
            ..Default::default()
        });
        entry.split_mut(key.split).push(Arc::new(Sample { key, image }));
    }
    let geometry = geometry.ok_or_else(|| Error::Manifest {
        path: manifest_path.clone(),
        line: 0,
        detail: "manifest lists no samples".into(),
    })?;
    let mut architectures: Vec<ArchitectureData> = by_arch.into_values().collect();
    for a in &mut architectures {
        for split in Split::ALL {
            a.split_mut(split).sort_by_key(|s| s.key);
        }
    }
    Ok(Dataset {
        image_size: geometry[1],
        channels: geometry[0],
        architectures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GeneratorConfig, SplitCounts};

    #[test]
    fn tensor_bytes_follow_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"ILTF");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..14], &[1, 0, 0, 0]);
        assert_eq!(&b[14..18], &[2, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let t = Tensor::new(vec![3, 4, 4], vec![0.5f32; 48]).unwrap();
        let b = encode_tensor(&t);
        for cut in [0, 3, 9, 13, b.len() - 1] {
            match decode_tensor(&b[..cut], Path::new("x.iltf")) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_header_fields_report_offsets() {
        let t = Tensor::vector(vec![1.0f32]);
        let mut b = encode_tensor(&t);
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b, Path::new("a")), Err(Error::Format { offset: 0, .. })));
        let mut b = encode_tensor(&t);
        b[4] = 9;
        assert!(matches!(decode_tensor(&b, Path::new("a")), Err(Error::Format { offset: 4, .. })));
        let mut b = encode_tensor(&t);
        b[8] = 2;
        assert!(matches!(decode_tensor(&b, Path::new("a")), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn container_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            image_size: 8,
            counts: SplitCounts {
                train: 3,
                val: 2,
                test: 2,
            },
            ..Default::default()
        };
        let ds = generate_dataset(&cfg, 2).unwrap();
        write_container(dir.path(), &ds).unwrap();
        let back = read_container(dir.path()).unwrap();
        assert_eq!(back.image_size, 8);
        assert_eq!(back.architectures.len(), 2);
        for (a, b) in ds.architectures.iter().zip(&back.architectures) {
            for split in Split::ALL {
                let mut want: Vec<_> = a.split(split).to_vec();
                want.sort_by_key(|s| s.key);
                assert_eq!(want.len(), b.split(split).len());
                for (x, y) in want.iter().zip(b.split(split)) {
                    assert_eq!(**x, **y);
                }
            }
        }
    }

    #[test]
    fn unknown_split_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(&dir.path().join("a.iltf"), &Tensor::zeros(&[1, 2, 2])).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            "# header\na.iltf,0,G,train\na.iltf,0,G,holdout\n",
        )
        .unwrap();
        match read_container(dir.path()) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("holdout"));
            }
            other => panic!("{other:?}"),
        }
    }
}
