//! Data ingestion and task losses: IDX image/label parsing (raw or
//! gzip-compressed), a synthetic piecewise-constant denoising dataset, and
//! the two task losses.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    add, cross_entropy_mean, mean, scale, sub, sum_squares, total_variation, Tensor,
};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A loaded IDX dataset: images flattened and scaled to [0, 1].
#[derive(Debug)]
pub struct IdxDataset {
    /// [N, rows*cols]
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.shape()[1]
    }

    /// Copy out rows `indices` as a batch tensor plus label vector.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.feature_dim();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
            labels.push(self.labels[i] as usize);
        }
        drop(data);
        Ok((Tensor::new(vec![indices.len(), d], out)?, labels))
    }

    /// Deterministic 80/20 split by position (first 80% train).
    pub fn split_train_val(&self, train_frac: f64) -> Result<(IdxDataset, IdxDataset)> {
        let n = self.len();
        let n_train = ((n as f64) * train_frac).floor() as usize;
        let d = self.feature_dim();
        let data = self.images.data();
        let (a, b) = data.split_at(n_train * d);
        let train = IdxDataset {
            images: Tensor::new(vec![n_train, d], a.to_vec())?,
            labels: self.labels[..n_train].to_vec(),
            split: Split::Train,
        };
        let val = IdxDataset {
            images: Tensor::new(vec![n - n_train, d], b.to_vec())?,
            labels: self.labels[n_train..].to_vec(),
            split: Split::Val,
        };
        Ok((train, val))
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode of {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated header, expected at least {} bytes, got {}",
                path.display(),
                off + 4,
                bytes.len()
            ))
        })
}

/// Parse a big-endian IDX image/label pair. `limit` keeps the first N
/// examples. Files may be raw or gzip-compressed.
pub fn load_idx(
    path_images: &Path,
    path_labels: &Path,
    limit: Option<usize>,
) -> Result<IdxDataset> {
    let img = read_maybe_gzip(path_images)?;
    let magic = be_u32(&img, 0, path_images)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            path_images.display()
        )));
    }
    let count = be_u32(&img, 4, path_images)? as usize;
    let rows = be_u32(&img, 8, path_images)? as usize;
    let cols = be_u32(&img, 12, path_images)? as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for {count} images of {rows}x{cols}, got {}",
            path_images.display(),
            img.len()
        )));
    }

    let lbl = read_maybe_gzip(path_labels)?;
    let lmagic = be_u32(&lbl, 0, path_labels)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            path_labels.display()
        )));
    }
    let lcount = be_u32(&lbl, 4, path_labels)? as usize;
    if lbl.len() != 8 + lcount {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {lcount} labels, got {}",
            path_labels.display(),
            8 + lcount,
            lbl.len()
        )));
    }
    if lcount != count {
        return Err(Error::Format(format!(
            "image count {count} does not match label count {lcount}"
        )));
    }

    let n = limit.map_or(count, |l| l.min(count));
    let d = rows * cols;
    let pixels: Vec<f64> = img[16..16 + n * d].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = lbl[8..8 + n].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} out of range 0-9")));
    }
    Ok(IdxDataset {
        images: Tensor::new(vec![n, d], pixels)?,
        labels,
        split: Split::Train,
    })
}

/// Write an IDX image/label pair (fixture writer), optionally gzipped.
pub fn write_idx(
    path_images: &Path,
    path_labels: &Path,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
    gzipped: bool,
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        if im.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "image has {} pixels, expected {}",
                im.len(),
                rows * cols
            )));
        }
        img.extend_from_slice(im);
    }
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);

    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        if gzipped {
            let mut enc =
                flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            std::io::Write::write_all(&mut enc, bytes)?;
            std::fs::write(path, enc.finish()?)?;
        } else {
            std::fs::write(path, bytes)?;
        }
        Ok(())
    };
    write(path_images, &img)?;
    write(path_labels, &lbl)?;
    Ok(())
}

/// Piecewise-constant signals plus Gaussian noise.
pub struct SyntheticDenoise {
    /// [N, d]
    pub clean: Tensor,
    /// [N, d]
    pub noisy: Tensor,
    pub noise_std: f64,
}

impl SyntheticDenoise {
    pub fn len(&self) -> usize {
        self.clean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.clean.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let d = self.dim();
        let cd = self.clean.data();
        let nd = self.noisy.data();
        let mut c = Vec::with_capacity(indices.len() * d);
        let mut n = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            c.extend_from_slice(&cd[i * d..(i + 1) * d]);
            n.extend_from_slice(&nd[i * d..(i + 1) * d]);
        }
        drop(cd);
        drop(nd);
        Ok((
            Tensor::new(vec![indices.len(), d], n)?,
            Tensor::new(vec![indices.len(), d], c)?,
        ))
    }
}

/// Generate `n` signals of length `d`, each with `k` contiguous segments of
/// i.i.d. U[-1, 1] levels, plus N(0, noise_std^2) noise.
pub fn gen_synthetic_denoise<R: Rng>(
    n: usize,
    d: usize,
    segments: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<SyntheticDenoise> {
    if d < 4 {
        return Err(Error::Invalid(format!("signal length {d} must be >= 4")));
    }
    if segments < 1 || segments > d / 2 {
        return Err(Error::Invalid(format!(
            "segment count {segments} must be in 1..={}",
            d / 2
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut clean = Vec::with_capacity(n * d);
    let mut noisy = Vec::with_capacity(n * d);
    for _ in 0..n {
        // k-1 distinct interior cut points
        let mut cuts: Vec<usize> = Vec::with_capacity(segments - 1);
        while cuts.len() < segments - 1 {
            let c = 1 + rng.gen_range(0..d - 1);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.sort_unstable();
        cuts.push(d);
        let mut start = 0;
        for &end in &cuts {
            let level = rng.gen_range(-1.0..1.0);
            for _ in start..end {
                clean.push(level);
            }
            start = end;
        }
        for i in 0..d {
            let c = clean[clean.len() - d + i];
            noisy.push(c + noise_std * normal.sample(rng));
        }
    }
    Ok(SyntheticDenoise {
        clean: Tensor::new(vec![n, d], clean)?,
        noisy: Tensor::new(vec![n, d], noisy)?,
        noise_std,
    })
}

/// Mean categorical cross-entropy (log-sum-exp stabilized).
pub fn loss_task1(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy_mean(logits, labels)
}

/// Mean squared error between a prediction and a constant target.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = sub(pred, target)?;
    Ok(scale(&sum_squares(&diff), 1.0 / pred.numel() as f64))
}

/// Convex combination `(1 - gamma) * MSE(pred, clean) + gamma * TV(pred)`.
pub fn loss_task2(pred: &Tensor, clean: &Tensor, gamma: f64) -> Result<Tensor> {
    let fit = mse(pred, clean)?;
    let tv = total_variation(pred)?;
    add(&scale(&fit, 1.0 - gamma), &scale(&tv, gamma))
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape().to_vec();
    let (batch, classes) = match shape[..] {
        [b, c] => (b, c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "accuracy",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    if labels.len() != batch {
        return Err(Error::Invalid(format!(
            "accuracy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    let d = logits.data();
    let mut correct = 0usize;
    for i in 0..batch {
        let row = &d[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch as f64)
}

/// Generate a deterministic 10-class 28x28 image fixture: one blocky random
/// template per class, each sample a pixel-noise perturbation of its class
/// template. Learnable by a small MLP, shaped like the usual digit files.
pub fn gen_digit_fixture<R: Rng>(n: usize, rng: &mut R) -> (Vec<Vec<u8>>, Vec<u8>) {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    // 7x7 coarse grids upsampled 4x to 28x28 so templates have structure.
    let mut templates: Vec<Vec<u8>> = Vec::with_capacity(10);
    for _ in 0..10 {
        let coarse: Vec<u8> = (0..49)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(120..=255) } else { 0 })
            .collect();
        let mut full = vec![0u8; 784];
        for r in 0..28 {
            for c in 0..28 {
                full[r * 28 + c] = coarse[(r / 4) * 7 + c / 4];
            }
        }
        templates.push(full);
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let t = &templates[class as usize];
        let img: Vec<u8> = t
            .iter()
            .map(|&p| {
                let v = p as f64 + 110.0 * normal.sample(rng);
                v.clamp(0.0, 255.0) as u8
            })
            .collect();
        images.push(img);
        labels.push(class);
    }
    (images, labels)
}

/// Mean total variation of a tensor's rows (forward-only diagnostic).
pub fn mean_total_variation(x: &Tensor) -> Result<f64> {
    Ok(total_variation(x)?.item())
}

/// Mean per-element squared difference (forward-only diagnostic).
pub fn mean_squared_error_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mean(&crate::tensor::mul(&sub(pred, target)?, &sub(pred, target)?)?).item())
}
