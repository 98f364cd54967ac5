//! Dataset ingestion: MNIST IDX files and the CIFAR-10 binary format, plus
//! batch assembly with normalization and training-time augmentation
//! (pad-4 random crop, horizontal flip).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801; // 2049

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn channels(&self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            DatasetKind::Cifar10 => 3,
        }
    }

    pub fn image_hw(&self) -> (usize, usize) {
        match self {
            DatasetKind::Mnist => (28, 28),
            DatasetKind::Cifar10 => (32, 32),
        }
    }

    pub fn classes(&self) -> usize {
        10
    }

    pub fn default_mean(&self) -> Vec<f64> {
        match self {
            DatasetKind::Mnist => vec![0.1307],
            DatasetKind::Cifar10 => vec![0.4914, 0.4822, 0.4465],
        }
    }

    pub fn default_std(&self) -> Vec<f64> {
        match self {
            DatasetKind::Mnist => vec![0.3081],
            DatasetKind::Cifar10 => vec![0.2470, 0.2435, 0.2616],
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<DatasetKind> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentCfg {
    pub crop_pad4: bool,
    pub hflip: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub augment: AugmentCfg,
}

impl DatasetSource {
    pub fn new(kind: DatasetKind, dir: impl Into<PathBuf>) -> DatasetSource {
        DatasetSource {
            mean: kind.default_mean(),
            std: kind.default_std(),
            augment: AugmentCfg {
                crop_pad4: true,
                hflip: kind == DatasetKind::Cifar10,
            },
            kind,
            dir: dir.into(),
        }
    }
}

/// Raw u8 pixels in (record, channel, h, w) order plus labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, i: usize) -> &[u8] {
        let sz = self.channels * self.h * self.w;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    /// Keep only the first `n` records (desk-scale subsetting).
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            let sz = self.channels * self.h * self.w;
            self.pixels.truncate(n * sz);
            self.labels.truncate(n);
        }
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: "IDX image file shorter than its header".into(),
        });
    }
    let magic = be_u32(&buf[0..4]);
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!("bad IDX image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let count = be_u32(&buf[4..8]) as usize;
    let h = be_u32(&buf[8..12]) as usize;
    let w = be_u32(&buf[12..16]) as usize;
    if buf.len() != 16 + count * h * w {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!(
                "IDX image payload is {} bytes, expected {} for {count} records of {h}x{w}",
                buf.len() - 16,
                count * h * w
            ),
        });
    }
    Ok((buf[16..].to_vec(), count, h, w))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 8 {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: "IDX label file shorter than its header".into(),
        });
    }
    let magic = be_u32(&buf[0..4]);
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!("bad IDX label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let count = be_u32(&buf[4..8]) as usize;
    if buf.len() != 8 + count {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!("IDX label payload is {} bytes, expected {count}", buf.len() - 8),
        });
    }
    Ok(buf[8..].to_vec())
}

fn load_mnist_split(dir: &Path, prefix: &str) -> Result<Split> {
    let (pixels, count, h, w) = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if labels.len() != count {
        return Err(Error::DataFormat {
            path: dir.into(),
            reason: format!(
                "{prefix}: {count} images but {} labels",
                labels.len()
            ),
        });
    }
    Ok(Split {
        pixels,
        labels,
        channels: 1,
        h,
        w,
    })
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3x32x32 pixels

fn load_cifar_file(path: &Path, expect_records: usize) -> Result<Split> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!("file size {} is not a multiple of 3073", buf.len()),
        });
    }
    let count = buf.len() / CIFAR_RECORD;
    if count != expect_records {
        return Err(Error::DataFormat {
            path: path.into(),
            reason: format!("expected {expect_records} records, found {count}"),
        });
    }
    let mut pixels = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::DataFormat {
                path: path.into(),
                reason: format!("label byte {label} out of range 0..=9"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Split {
        pixels,
        labels,
        channels: 3,
        h: 32,
        w: 32,
    })
}

fn concat_splits(mut parts: Vec<Split>) -> Split {
    let mut first = parts.remove(0);
    for p in parts {
        first.pixels.extend(p.pixels);
        first.labels.extend(p.labels);
    }
    first
}

/// Parse the dataset bit-exactly from its on-disk source files.
pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source.kind {
        DatasetKind::Mnist => Ok(Dataset {
            train: load_mnist_split(&source.dir, "train")?,
            test: load_mnist_split(&source.dir, "t10k")?,
        }),
        DatasetKind::Cifar10 => {
            let mut parts = Vec::new();
            for i in 1..=5 {
                parts.push(load_cifar_file(
                    &source.dir.join(format!("data_batch_{i}.bin")),
                    10_000,
                )?);
            }
            let train = concat_splits(parts);
            let test = load_cifar_file(&source.dir.join("test_batch.bin"), 10_000)?;
            Ok(Dataset { train, test })
        }
    }
}

/// Assemble a normalized batch. Augmentation consumes RNG draws in a fixed
/// per-image order (crop dy, crop dx, flip) so batch contents are a pure
/// function of the seed; the test path passes `augment: None`.
pub fn make_batch(
    split: &Split,
    indices: &[usize],
    mean: &[f64],
    std: &[f64],
    augment: Option<(&AugmentCfg, &mut ChaCha8Rng)>,
) -> (Tensor4, Vec<usize>) {
    let (c, h, w) = (split.channels, split.h, split.w);
    let mut out = Tensor4::zeros(indices.len(), c, h, w);
    let mut labels = Vec::with_capacity(indices.len());
    let mut aug = augment;
    for (bi, &i) in indices.iter().enumerate() {
        labels.push(split.labels[i] as usize);
        let img = split.image(i);
        let (mut dy, mut dx, mut flip) = (0i64, 0i64, false);
        if let Some((cfg, rng)) = aug.as_mut() {
            if cfg.crop_pad4 {
                dy = rng.gen_range(-4..=4);
                dx = rng.gen_range(-4..=4);
            }
            if cfg.hflip {
                flip = rng.gen::<bool>();
            }
        }
        for ch in 0..c {
            let (m, s) = (mean[ch], std[ch]);
            let plane = out.plane_mut(bi, ch);
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let sx = if flip { (w - 1 - x) as i64 } else { x as i64 } + dx;
                    let px = if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                        0
                    } else {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    };
                    plane[y * w + x] = (px as f64 / 255.0 - m) / s;
                }
            }
        }
    }
    (out, labels)
}

/// Synthetic MNIST-format fixture: ten procedurally drawn glyph classes with
/// random shifts and noise, written as standard IDX files. Used where the
/// real archive is not available; the parser treats both identically.
pub mod synth {
    use super::*;

    fn glyph(class: usize) -> [[u8; 7]; 7] {
        // 7x7 stroke patterns, one per class, upscaled 4x at render time
        let rows: [[&str; 7]; 10] = [
            ["#####..", "#...#..", "#...#..", "#...#..", "#####..", ".......", "......."],
            ["..#....", ".##....", "..#....", "..#....", ".###...", ".......", "......."],
            ["####...", "...#...", "####...", "#......", "####...", ".......", "......."],
            ["####...", "...#...", ".###...", "...#...", "####...", ".......", "......."],
            ["#..#...", "#..#...", "####...", "...#...", "...#...", ".......", "......."],
            ["####...", "#......", "####...", "...#...", "####...", ".......", "......."],
            [".###...", "#......", "####...", "#..#...", "####...", ".......", "......."],
            ["####...", "...#...", "..#....", ".#.....", ".#.....", ".......", "......."],
            [".##....", "#..#...", ".##....", "#..#...", ".##....", ".......", "......."],
            [".###...", "#..#...", ".###...", "...#...", "..#....", ".......", "......."],
        ];
        let mut g = [[0u8; 7]; 7];
        for (y, row) in rows[class].iter().enumerate() {
            for (x, ch) in row.bytes().enumerate() {
                g[y][x] = (ch == b'#') as u8;
            }
        }
        g
    }

    fn render(class: usize, rng: &mut ChaCha8Rng) -> [u8; 28 * 28] {
        let g = glyph(class);
        let mut img = [0u8; 28 * 28];
        let dy = rng.gen_range(-2..=2);
        let dx = rng.gen_range(-2..=2);
        let bright = rng.gen_range(170..=255) as f64;
        for y in 0..28usize {
            for x in 0..28usize {
                let sy = y as i64 - dy;
                let sx = x as i64 - dx;
                let on = if (0..28).contains(&sy) && (0..28).contains(&sx) {
                    g[(sy / 4) as usize][(sx / 4) as usize]
                } else {
                    0
                };
                let noise = rng.gen_range(0..24) as f64;
                let v = if on == 1 { bright - noise } else { noise };
                img[y * 28 + x] = v as u8;
            }
        }
        img
    }

    fn write_split(dir: &Path, prefix: &str, count: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut images = Vec::with_capacity(16 + count * 784);
        images.extend_from_slice(&MNIST_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        let mut labels = Vec::with_capacity(8 + count);
        labels.extend_from_slice(&MNIST_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            let class = i % 10;
            labels.push(class as u8);
            images.extend_from_slice(&render(class, rng));
        }
        let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
        fs::write(&ipath, images).map_err(|e| Error::io(&ipath, e))?;
        let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))
    }

    pub fn write_synthetic_mnist(
        dir: impl AsRef<Path>,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<()> {
        use rand::SeedableRng;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        write_split(dir, "train", n_train, &mut rng)?;
        write_split(dir, "t10k", n_test, &mut rng)
    }
}
