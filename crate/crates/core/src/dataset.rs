//! Dataset loading: CIFAR-10 binary batches, IDX image/label pairs, and
//! directories of PPM images, all normalized to f64 CHW tensors in [0,1].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm::read_pnm;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// (id, image) pairs in order, the shape query-set building expects.
    pub fn tagged_images(&self) -> Vec<(String, Tensor)> {
        self.ids
            .iter()
            .cloned()
            .zip(self.images.iter().cloned())
            .collect()
    }

    /// Stacks a subset into a B×(image shape) batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Empty("batch of zero images".into()));
        }
        let shape = self.images[idx[0]].shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if self.images[i].shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("batch image {}", i),
                    expected: shape,
                    got: self.images[i].shape().to_vec(),
                });
            }
            data.extend_from_slice(self.images[i].data());
        }
        let mut full = vec![idx.len()];
        full.extend_from_slice(&shape);
        Tensor::new(full, data)
    }
}

fn read_be_u32(buf: &[u8], off: usize) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// IDX image + label pair (the MNIST container format): u8 images of
/// shape n×h×w with magic 0x803, u8 labels with magic 0x801.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ibuf = std::fs::read(images_path)
        .map_err(Error::Io)?;
    let lbuf = std::fs::read(labels_path)
        .map_err(Error::Io)?;
    if read_be_u32(&ibuf, 0)? != 0x0000_0803 {
        return Err(Error::Format("bad IDX image magic".into()));
    }
    if read_be_u32(&lbuf, 0)? != 0x0000_0801 {
        return Err(Error::Format("bad IDX label magic".into()));
    }
    let n = read_be_u32(&ibuf, 4)? as usize;
    let h = read_be_u32(&ibuf, 8)? as usize;
    let w = read_be_u32(&ibuf, 12)? as usize;
    if read_be_u32(&lbuf, 4)? as usize != n {
        return Err(Error::Format("IDX image/label count mismatch".into()));
    }
    let per = h * w;
    if ibuf.len() != 16 + n * per || lbuf.len() != 8 + n {
        return Err(Error::Format("IDX payload size mismatch".into()));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let raw = &ibuf[16 + i * per..16 + (i + 1) * per];
        let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![1, h, w], data)?);
        labels.push(lbuf[8 + i] as usize);
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        ids: (0..n).map(|i| format!("idx{:05}", i)).collect(),
        images,
        labels,
        num_classes,
    })
}

/// CIFAR-10 binary batches: records of 1 label byte + 3×32×32 channel-
/// planar pixel bytes.
pub fn load_cifar10_bin(paths: &[&Path]) -> Result<Dataset> {
    const REC: usize = 1 + 3 * 32 * 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for path in paths {
        let buf =
            std::fs::read(path).map_err(Error::Io)?;
        if buf.is_empty() || buf.len() % REC != 0 {
            return Err(Error::Format(format!(
                "{}: not a whole number of CIFAR-10 records",
                path.display()
            )));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (i, rec) in buf.chunks_exact(REC).enumerate() {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!("CIFAR-10 label {} out of range", label)));
            }
            let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Tensor::new(vec![3, 32, 32], data)?);
            labels.push(label);
            ids.push(format!("{}#{:05}", stem, i));
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("no CIFAR-10 batches given".into()));
    }
    Ok(Dataset {
        ids,
        images,
        labels,
        num_classes: 10,
    })
}

/// Converts a decoded PNM into a CHW tensor scaled by its maxval.
pub fn pnm_to_tensor(path: &Path) -> Result<Tensor> {
    let img = read_pnm(path)?;
    let plane = img.width * img.height;
    let scale = 1.0 / img.maxval as f64;
    let mut data = vec![0.0; img.channels * plane];
    for i in 0..plane {
        for c in 0..img.channels {
            data[c * plane + i] = img.samples[i * img.channels + c] as f64 * scale;
        }
    }
    Tensor::new(vec![img.channels, img.height, img.width], data)
}

/// Loads every .ppm/.pgm in a directory, sorted by file name for
/// reproducibility. Returns (file stem, image) pairs.
pub fn load_pnm_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PNM images in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, pnm_to_tensor(&p)?))
        })
        .collect()
}

/// Disjoint shuffled index split of `0..n` into parts of the given sizes
/// (the remainder is dropped).
pub fn split_indices(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if sizes.iter().sum::<usize>() > n {
        return Err(Error::InvalidArgument(format!(
            "split sizes sum to {} > {}",
            sizes.iter().sum::<usize>(),
            n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        let mut part = order[off..off + s].to_vec();
        part.sort_unstable();
        out.push(part);
        off += s;
    }
    Ok(out)
}

/// Seeded square crops from a CHW image (positions sampled uniformly).
pub fn random_crops(image: &Tensor, size: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                context: "random_crops".into(),
                expected: vec![3],
                got: other.to_vec(),
            })
        }
    };
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "crop {} exceeds image {}×{}",
            size, h, w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        let mut data = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    data.push(image.data()[ch * plane + y * w + x]);
                }
            }
        }
        out.push(Tensor::new(vec![c, size, size], data)?);
    }
    Ok(out)
}
