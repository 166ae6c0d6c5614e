//! Dataset loading (idx and raw-f32), normalization, and the bundled toy
//! generator.
//!
//! Directory conventions: `raw-f32` datasets live in `train.snnd` /
//! `test.snnd`; idx datasets in `train-images.idx`, `train-labels.idx`,
//! `test-images.idx`, `test-labels.idx`.

use crate::config::{DataFormat, Normalize};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedSplitter};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

/// Images in `[0,1]` as `[N,C,H,W]` plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = (
            self.images.shape()[0],
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let per = h * w;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * per;
                for i in 0..per {
                    mean[ci] += self.images.data()[base + i] as f64;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= (n * per) as f64;
        }
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * per;
                for i in 0..per {
                    let d = self.images.data()[base + i] as f64 - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / (n * per) as f64).sqrt().max(1e-8))
            .collect();
        (mean, std)
    }

    /// Standardized copy using the given channel stats.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Tensor<f32> {
        let (n, c, h, w) = (
            self.images.shape()[0],
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let per = h * w;
        let mut out = self.images.clone();
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * per;
                for i in 0..per {
                    let v = out.data()[base + i] as f64;
                    out.data_mut()[base + i] = ((v - mean[ci]) / std[ci]) as f32;
                }
            }
        }
        out
    }

    /// Inputs prepared for a stage: standardized or raw per the config.
    pub fn prepared(&self, normalize: Normalize, stats: &(Vec<f64>, Vec<f64>)) -> Tensor<f32> {
        match normalize {
            Normalize::Standardize => self.standardized(&stats.0, &stats.1),
            Normalize::None => self.images.clone(),
        }
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {} out of range 0..{}", bad, classes)));
        }
        Ok(())
    }
}

/// Load the train/test pair from a directory, per the format's naming
/// convention.
pub fn load_dir(dir: &Path, format: DataFormat) -> Result<(Dataset, Dataset)> {
    match format {
        DataFormat::RawF32 => Ok((
            read_snnd(&dir.join("train.snnd"))?,
            read_snnd(&dir.join("test.snnd"))?,
        )),
        DataFormat::Idx => Ok((
            load_idx_pair(&dir.join("train-images.idx"), &dir.join("train-labels.idx"))?,
            load_idx_pair(&dir.join("test-images.idx"), &dir.join("test-labels.idx"))?,
        )),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Classic idx image file: big-endian magic `0x0000_08_03` (u8 elements,
/// 3 dims), dims `N,H,W`. Returned as `[N,1,H,W]` scaled to `[0,1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor<f32>> {
    let b = read_file(path)?;
    if b.len() < 16 {
        return Err(Error::Data(format!(
            "{}: idx header wants 16 bytes, file has {}",
            path.display(),
            b.len()
        )));
    }
    let magic = be_u32(&b, 0);
    if magic != 0x0000_0803 {
        return Err(Error::Data(format!(
            "{}: idx image magic 0x{:08x}, expected 0x00000803",
            path.display(),
            magic
        )));
    }
    let n = be_u32(&b, 4) as usize;
    let h = be_u32(&b, 8) as usize;
    let w = be_u32(&b, 12) as usize;
    let expect = 16 + n * h * w;
    if b.len() != expect {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for {}x{}x{} u8 images, got {}",
            path.display(),
            expect,
            n,
            h,
            w,
            b.len()
        )));
    }
    let data: Vec<f32> = b[16..].iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Classic idx label file: magic `0x0000_08_01`, dims `N`.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let b = read_file(path)?;
    if b.len() < 8 {
        return Err(Error::Data(format!(
            "{}: idx header wants 8 bytes, file has {}",
            path.display(),
            b.len()
        )));
    }
    let magic = be_u32(&b, 0);
    if magic != 0x0000_0801 {
        return Err(Error::Data(format!(
            "{}: idx label magic 0x{:08x}, expected 0x00000801",
            path.display(),
            magic
        )));
    }
    let n = be_u32(&b, 4) as usize;
    if b.len() != 8 + n {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for {} u8 labels, got {}",
            path.display(),
            8 + n,
            n,
            b.len()
        )));
    }
    Ok(b[8..].iter().map(|&v| v as usize).collect())
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Ok(Dataset { images, labels })
}

const SNND_MAGIC: &[u8; 4] = b"SNND";

/// Raw-f32 dataset: magic `SNND`, little-endian u32 count and `C,H,W`, then
/// `count*C*H*W` f32 samples followed by `count` u8 labels.
pub fn read_snnd(path: &Path) -> Result<Dataset> {
    let b = read_file(path)?;
    if b.len() < 20 {
        return Err(Error::Data(format!(
            "{}: SNND header wants 20 bytes, file has {}",
            path.display(),
            b.len()
        )));
    }
    if &b[0..4] != SNND_MAGIC {
        return Err(Error::Data(format!(
            "{}: magic {:?}, expected \"SNND\"",
            path.display(),
            &b[0..4]
        )));
    }
    let le = |off: usize| u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]) as usize;
    let (n, c, h, w) = (le(4), le(8), le(12), le(16));
    let expect = 20 + n * c * h * w * 4 + n;
    if b.len() != expect {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for {} samples of {}x{}x{}, got {}",
            path.display(),
            expect,
            n,
            c,
            h,
            w,
            b.len()
        )));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut off = 20;
    for _ in 0..n * c * h * w {
        data.push(f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]));
        off += 4;
    }
    let labels = b[off..].iter().map(|&v| v as usize).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels,
    })
}

pub fn write_snnd(path: &Path, ds: &Dataset) -> Result<()> {
    let (n, c, h, w) = (
        ds.images.shape()[0],
        ds.images.shape()[1],
        ds.images.shape()[2],
        ds.images.shape()[3],
    );
    if ds.labels.len() != n {
        return Err(Error::Data(format!("{} images but {} labels", n, ds.labels.len())));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(SNND_MAGIC)?;
    for v in [n, c, h, w] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in ds.images.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    for &l in &ds.labels {
        if l > u8::MAX as usize {
            return Err(Error::Data(format!("label {} does not fit in u8", l)));
        }
        f.write_all(&[l as u8])?;
    }
    Ok(())
}

/// Settings of the bundled toy generator.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 10,
            train_per_class: 150,
            test_per_class: 40,
            height: 8,
            width: 8,
            noise: 0.12,
            seed: 1234,
        }
    }
}

/// Deterministic Gaussian-blob dataset.
///
/// With six or fewer classes, each class is a single well-separated bump on
/// a ring (linearly separable). With more classes, classes come in pairs
/// that share a ring position and differ only in the intensity ratio
/// between the ring bump and a shared center bump, so part of the label
/// information lives in fine intensity structure rather than position.
/// Samples add pixel noise and clamp to `[0,1]`.
pub fn generate_toy(cfg: &ToyConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 || cfg.classes > 255 {
        return Err(Error::Config(format!("toy classes {} outside 2..=255", cfg.classes)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let per = h * w;
    let splitter = SeedSplitter::new(cfg.seed);

    // class prototypes: one dim bump per class on a ring
    let mut protos = Vec::with_capacity(cfg.classes);
    for k in 0..cfg.classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / cfg.classes as f64;
        let cy = h as f64 / 2.0 + 0.3 + (h as f64 / 3.4) * angle.sin();
        let cx = w as f64 / 2.0 + 0.3 + (w as f64 / 3.4) * angle.cos();
        let amp_class = 0.45;
        let sigma = 1.1;
        let mut proto = vec![0.0f64; per];
        for y in 0..h {
            for x in 0..w {
                let d1 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * sigma * sigma);
                proto[y * w + x] = amp_class * (-d1).exp();
            }
        }
        protos.push(proto);
    }

    let make = |per_class: usize, purpose_index: u64| -> Result<Dataset> {
        let n = per_class * cfg.classes;
        let mut rng = splitter.rng(Purpose::Data, purpose_index);
        let normal = Normal::new(0.0, cfg.noise).expect("noise");
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            let k = s % cfg.classes;
            // bright class-uninformative bump, randomly placed near the
            // image center each sample: it dominates the upper tail of the
            // activation distribution but carries no label signal
            let dy = h as f64 / 2.0 - 0.5 + rng.gen_range(-1.0..1.0);
            let dx = w as f64 / 2.0 - 0.5 + rng.gen_range(-1.0..1.0);
            let damp = rng.gen_range(0.85..1.0);
            for (i, &p) in protos[k].iter().enumerate() {
                let (y, x) = (i / w, i % w);
                let d3 = ((y as f64 - dy).powi(2) + (x as f64 - dx).powi(2)) / (2.0 * 0.9 * 0.9);
                let v = (p + damp * (-d3).exp() + normal.sample(&mut rng)).clamp(0.0, 1.0);
                data.push(v as f32);
            }
            labels.push(k);
        }
        // deterministic shuffle so classes interleave
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sdata = Vec::with_capacity(n * per);
        let mut slabels = Vec::with_capacity(n);
        for &i in &order {
            sdata.extend_from_slice(&data[i * per..(i + 1) * per]);
            slabels.push(labels[i]);
        }
        Ok(Dataset {
            images: Tensor::new(vec![n, 1, h, w], sdata)?,
            labels: slabels,
        })
    };

    Ok((make(cfg.train_per_class, 0)?, make(cfg.test_per_class, 1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snnd_roundtrip() {
        let dir = std::env::temp_dir().join(format!("snnd_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ds = Dataset {
            images: Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f32 / 12.0).collect()).unwrap(),
            labels: vec![0, 1, 2],
        };
        let p = dir.join("t.snnd");
        write_snnd(&p, &ds).unwrap();
        let back = read_snnd(&p).unwrap();
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_snnd_names_byte_counts() {
        let dir = std::env::temp_dir().join(format!("snnd_tr_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.snnd");
        let ds = Dataset {
            images: Tensor::new(vec![2, 1, 2, 2], vec![0.0; 8]).unwrap(),
            labels: vec![0, 1],
        };
        write_snnd(&p, &ds).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        let err = read_snnd(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("got"), "{}", msg);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = std::env::temp_dir().join(format!("snnd_bm_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.snnd");
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        let err = read_snnd(&p).unwrap_err();
        assert!(err.to_string().contains("SNND"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_roundtrip_small() {
        // hand-build a 10-sample 8x8 idx pair
        let dir = std::env::temp_dir().join(format!("idx_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("imgs.idx");
        let lp = dir.join("labels.idx");
        let mut ib: Vec<u8> = vec![0, 0, 8, 3];
        ib.extend_from_slice(&10u32.to_be_bytes());
        ib.extend_from_slice(&8u32.to_be_bytes());
        ib.extend_from_slice(&8u32.to_be_bytes());
        ib.extend((0..10 * 64).map(|i| (i % 256) as u8));
        std::fs::write(&ip, &ib).unwrap();
        let mut lb: Vec<u8> = vec![0, 0, 8, 1];
        lb.extend_from_slice(&10u32.to_be_bytes());
        lb.extend(0..10u8);
        std::fs::write(&lp, &lb).unwrap();

        let imgs = load_idx_images(&ip).unwrap();
        assert_eq!(imgs.shape(), &[10, 1, 8, 8]);
        assert!((imgs.data()[1] - 1.0 / 255.0).abs() < 1e-7);
        let labels = load_idx_labels(&lp).unwrap();
        assert_eq!(labels.len(), 10);

        // truncation names expected vs actual bytes
        ib.truncate(ib.len() - 5);
        std::fs::write(&ip, &ib).unwrap();
        let err = load_idx_images(&ip).unwrap_err();
        assert!(err.to_string().contains("expected"), "{}", err);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn toy_generator_is_deterministic() {
        let cfg = ToyConfig { train_per_class: 5, test_per_class: 2, ..Default::default() };
        let (a, _) = generate_toy(&cfg).unwrap();
        let (b, _) = generate_toy(&cfg).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 50);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        a.check_labels(10).unwrap();
        assert!(a.check_labels(5).is_err());
    }

    #[test]
    fn standardization_centers_channels() {
        let cfg = ToyConfig { train_per_class: 20, test_per_class: 2, ..Default::default() };
        let (train, _) = generate_toy(&cfg).unwrap();
        let stats = train.channel_stats();
        let std_imgs = train.standardized(&stats.0, &stats.1);
        let n = std_imgs.numel();
        let mean: f64 = std_imgs.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-4, "mean {}", mean);
    }
}
