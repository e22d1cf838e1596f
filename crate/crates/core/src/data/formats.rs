//! CIFAR-10 and STL-10 binary formats.
//!
//! CIFAR-10 records are one label byte followed by the R, G and B planes in
//! row-major order. STL-10 images are R, G, B planes stored column-major,
//! labels are a separate file of bytes in `1..=10`.

use std::fs;
use std::path::Path;

use super::{DatasetSource, Labels, Normalization, Pixels};
use crate::error::{Error, Result};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const STL_SIZE: usize = 96;
const STL_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StlSplit {
    Unlabeled,
    Train,
    Test,
}

impl StlSplit {
    fn prefix(self) -> &'static str {
        match self {
            StlSplit::Unlabeled => "unlabeled",
            StlSplit::Train => "train",
            StlSplit::Test => "test",
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits CIFAR-layout bytes into pixels and labels.
pub fn parse_cifar_records(bytes: &[u8], item_shape: [usize; 3], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let item: usize = item_shape.iter().product();
    let record = item + 1;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks(record).enumerate() {
        let label = usize::from(rec[0]);
        if label >= CIFAR_CLASSES {
            return Err(Error::CorruptRecord {
                index,
                detail: format!("label byte {label} > 9"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// One CIFAR-layout file with records of `item_shape`.
pub fn read_cifar_file(path: &Path, item_shape: [usize; 3], norm: Option<Normalization>) -> Result<DatasetSource> {
    let (pixels, labels) = parse_cifar_records(&read(path)?, item_shape, path)?;
    DatasetSource::from_parts(
        path.display().to_string(),
        item_shape,
        Pixels::Bytes(pixels),
        Labels::Single {
            classes: CIFAR_CLASSES,
            values: labels,
        },
        norm,
    )
}

/// The official binary batches under `dir` (`data_batch_{1..5}.bin`, `test_batch.bin`).
pub fn load_cifar10(dir: &Path, split: CifarSplit, norm: Option<Normalization>) -> Result<DatasetSource> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in split.files() {
        let path = dir.join(file);
        let (p, l) = parse_cifar_records(&read(&path)?, CIFAR_SHAPE, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let name = match split {
        CifarSplit::Train => "cifar10-train",
        CifarSplit::Test => "cifar10-test",
    };
    DatasetSource::from_parts(
        name,
        CIFAR_SHAPE,
        Pixels::Bytes(pixels),
        Labels::Single {
            classes: CIFAR_CLASSES,
            values: labels,
        },
        norm,
    )
}

/// Writes a byte-backed source in CIFAR record layout. Unlabeled items get label 0.
pub fn write_cifar_records(source: &DatasetSource, path: &Path) -> Result<()> {
    let bytes = source
        .raw_bytes()
        .ok_or_else(|| Error::Config("only byte-valued datasets can be written as records".into()))?;
    let labels: Vec<u8> = match &source.labels {
        Labels::Single { classes, values } if *classes <= CIFAR_CLASSES => values.iter().map(|&v| v as u8).collect(),
        Labels::Unlabeled => vec![0; source.len()],
        _ => return Err(Error::Label("record layout holds a single class below 10".into())),
    };
    let item = source.item_len();
    let mut out = Vec::with_capacity(source.len() * (item + 1));
    for (i, label) in labels.iter().enumerate() {
        out.push(*label);
        out.extend_from_slice(&bytes[i * item..(i + 1) * item]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn stl_images(bytes: &[u8], size: usize, path: &Path) -> Result<Vec<u8>> {
    let item = 3 * size * size;
    if bytes.is_empty() || bytes.len() % item != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a multiple of {item}-byte images", bytes.len()),
        ));
    }
    let mut out = vec![0u8; bytes.len()];
    for (src, dst) in bytes.chunks(item).zip(out.chunks_mut(item)) {
        for c in 0..3 {
            let plane = c * size * size;
            for col in 0..size {
                for row in 0..size {
                    dst[plane + row * size + col] = src[plane + col * size + row];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn read_stl(x_path: &Path, y_path: Option<&Path>, size: usize, norm: Option<Normalization>) -> Result<DatasetSource> {
    let pixels = stl_images(&read(x_path)?, size, x_path)?;
    let n = pixels.len() / (3 * size * size);
    let labels = match y_path {
        None => Labels::Unlabeled,
        Some(p) => {
            let raw = read(p)?;
            if raw.len() != n {
                return Err(Error::format(p, format!("{} labels for {n} images", raw.len())));
            }
            let values = raw
                .iter()
                .enumerate()
                .map(|(index, &b)| match b {
                    1..=10 => Ok(usize::from(b) - 1),
                    _ => Err(Error::CorruptRecord {
                        index,
                        detail: format!("label byte {b} outside 1..=10"),
                    }),
                })
                .collect::<Result<_>>()?;
            Labels::Single {
                classes: STL_CLASSES,
                values,
            }
        }
    };
    DatasetSource::from_parts(x_path.display().to_string(), [3, size, size], Pixels::Bytes(pixels), labels, norm)
}

/// STL-10 split under `dir` (`{unlabeled,train,test}_X.bin`, `{train,test}_y.bin`).
pub fn load_stl10(dir: &Path, split: StlSplit, norm: Option<Normalization>) -> Result<DatasetSource> {
    let x = dir.join(format!("{}_X.bin", split.prefix()));
    let y = dir.join(format!("{}_y.bin", split.prefix()));
    let y = (split != StlSplit::Unlabeled).then_some(y.as_path());
    let mut src = read_stl(&x, y, STL_SIZE, norm)?;
    src.name = format!("stl10-{}", split.prefix());
    Ok(src)
}

/// Writes square RGB byte images in STL layout, plus `1..=10` labels when given a path.
pub fn write_stl_images(source: &DatasetSource, x_path: &Path, y_path: Option<&Path>) -> Result<()> {
    let [c, h, w] = source.item_shape();
    if c != 3 || h != w {
        return Err(Error::Config(format!("STL layout needs square RGB images, got {:?}", source.item_shape())));
    }
    let bytes = source
        .raw_bytes()
        .ok_or_else(|| Error::Config("only byte-valued datasets can be written as records".into()))?;
    let item = source.item_len();
    let mut out = vec![0u8; bytes.len()];
    for (src, dst) in bytes.chunks(item).zip(out.chunks_mut(item)) {
        for ch in 0..3 {
            let plane = ch * h * w;
            for row in 0..h {
                for col in 0..w {
                    dst[plane + col * h + row] = src[plane + row * w + col];
                }
            }
        }
    }
    fs::write(x_path, out).map_err(|e| Error::io(x_path, e))?;
    if let Some(p) = y_path {
        let labels = match source.labels()? {
            Labels::Single { values, classes } if *classes <= STL_CLASSES => values.iter().map(|&v| v as u8 + 1).collect::<Vec<_>>(),
            _ => return Err(Error::Label("STL labels are single classes below 10".into())),
        };
        fs::write(p, labels).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
