//! Datasets: a seeded synthetic image task and a CSV loader.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticGaussian,
    Csv,
}

fn d_noise() -> f64 {
    1.0
}
fn d_prototype_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "d_three")]
    pub channels: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Extra noise and blur on the shift split; 0 leaves it test-distributed.
    #[serde(default)]
    pub shift_severity: f64,
    /// Pixel noise standard deviation of the synthetic task.
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    /// Scale of the class prototypes relative to the unit-variance pixel noise.
    #[serde(default = "d_prototype_scale")]
    pub prototype_scale: f64,
    /// Fraction of training labels replaced by a uniformly drawn class.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
    /// CSV source for `kind = csv`.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn d_three() -> usize {
    3
}

impl DatasetSpec {
    /// A small synthetic task sized for the tiny model preset.
    pub fn tiny(classes: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::SyntheticGaussian,
            classes,
            image_size: 8,
            channels: 3,
            train_size: 256,
            val_size: 128,
            test_size: 512,
            shift_severity: 1.0,
            noise_std: 1.0,
            prototype_scale: 1.0,
            label_noise: 0.0,
            seed,
            path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return config_err("dataset needs at least 2 classes");
        }
        if self.image_size == 0 || self.channels == 0 {
            return config_err("image_size and channels must be positive");
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return config_err("split sizes must be at least 1");
        }
        if !(self.noise_std >= 0.0) || !(self.shift_severity >= 0.0) || !(self.prototype_scale >= 0.0) {
            return config_err("noise_std, prototype_scale and shift_severity must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return config_err("label_noise must lie in [0, 1]");
        }
        if self.kind == DatasetKind::Csv && self.path.is_none() {
            return config_err("csv dataset needs `path`");
        }
        Ok(())
    }
}

/// `[N, S, S, C]` images with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Split {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Split {
            images: Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).expect("selected images"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous batches of at most `size` examples.
    pub fn batches(&self, size: usize) -> Vec<Split> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.select(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Test-like examples under blur and extra noise.
    pub shift: Option<Split>,
    /// Examples from prototypes no training class uses; labels index those unseen prototypes.
    pub ood: Option<Split>,
}

fn sample(protos: &[Tensor], labels: &[usize], noise_std: f64, rng: &mut Rng, dims: [usize; 3]) -> Tensor {
    let per = dims.iter().product::<usize>();
    let noise = rng.gaussian(&[labels.len(), per]);
    let mut data = Vec::with_capacity(labels.len() * per);
    for (i, &y) in labels.iter().enumerate() {
        data.extend(protos[y].data().iter().zip(noise.row(i)).map(|(p, z)| p + noise_std * z));
    }
    Tensor::new(vec![labels.len(), dims[0], dims[1], dims[2]], data).expect("sampled images")
}

/// 3×3 box blur per channel with edge clamping.
fn blur(images: &Tensor) -> Tensor {
    let s = images.shape();
    let (n, side, c) = (s[0], s[1], s[3]);
    let src = images.data();
    let at = |b: usize, y: usize, x: usize, ch: usize| src[((b * side + y) * side + x) * c + ch];
    Tensor::from_fn(s, |i| {
        let ch = i % c;
        let x = (i / c) % side;
        let y = (i / (c * side)) % side;
        let b = i / (c * side * side);
        debug_assert!(b < n);
        let mut acc = 0.0;
        for dy in [-1i64, 0, 1] {
            for dx in [-1i64, 0, 1] {
                let yy = (y as i64 + dy).clamp(0, side as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, side as i64 - 1) as usize;
                acc += at(b, yy, xx, ch);
            }
        }
        acc / 9.0
    })
}

/// Prototype per class from `N(0, scale²)` pixels, then pixel noise per example.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let dims = [spec.image_size, spec.image_size, spec.channels];
    let mut proto_rng = root.fork(0);
    let protos: Vec<Tensor> = (0..spec.classes).map(|_| proto_rng.gaussian(&dims).scale(spec.prototype_scale)).collect();
    let mut ood_rng = root.fork(1);
    let ood_protos: Vec<Tensor> = (0..spec.classes).map(|_| ood_rng.gaussian(&dims).scale(spec.prototype_scale)).collect();

    let make = |tag: u64, n: usize, protos: &[Tensor], label_noise: f64| {
        let mut rng = root.fork(tag);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(spec.classes)).collect();
        let images = sample(protos, &labels, spec.noise_std, &mut rng, dims);
        let mut observed = labels;
        if label_noise > 0.0 {
            let flips = rng.uniform(&[n]);
            for (y, &u) in observed.iter_mut().zip(flips.data()) {
                if u < label_noise {
                    *y = rng.index(spec.classes);
                }
            }
        }
        Split { images, labels: observed }
    };
    let train = make(10, spec.train_size, &protos, spec.label_noise);
    let val = make(11, spec.val_size, &protos, 0.0);
    let test = make(12, spec.test_size, &protos, 0.0);
    let mut shift = make(13, spec.test_size, &protos, 0.0);
    if spec.shift_severity > 0.0 {
        let alpha = (spec.shift_severity / 5.0).min(1.0);
        let blurred = blur(&shift.images);
        let mut rng = root.fork(14);
        let extra = rng.gaussian(shift.images.shape());
        let sev = spec.shift_severity * 0.5 * spec.noise_std.max(1e-3);
        shift.images = shift
            .images
            .zip_map(&blurred, |a, b| (1.0 - alpha) * a + alpha * b)?
            .zip_map(&extra, |a, z| a + sev * z)?;
    }
    let ood = make(15, spec.test_size, &ood_protos, 0.0);
    Ok(Dataset { classes: spec.classes, train, val, test, shift: Some(shift), ood: Some(ood) })
}

/// Rows of `label, pixel…` with `S·S·C` row-major pixels; the first
/// `train_size` rows train, the next `val_size` validate, the next `test_size` test.
pub fn load_csv_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let path = spec.path.as_ref().ok_or_else(|| Error::Config("csv dataset needs `path`".into()))?;
    let per = spec.image_size * spec.image_size * spec.channels;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != per + 1 {
            return Err(Error::Format(format!("row {}: expected {} columns, got {}", line + 2, per + 1, rec.len())));
        }
        let y: usize = rec[0].parse().map_err(|_| Error::Format(format!("row {}: bad label `{}`", line + 2, &rec[0])))?;
        if y >= spec.classes {
            return Err(Error::Format(format!("row {}: label {y} outside [0, {})", line + 2, spec.classes)));
        }
        labels.push(y);
        for v in rec.iter().skip(1) {
            pixels.push(v.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad pixel `{v}`", line + 2)))?);
        }
    }
    let need = spec.train_size + spec.val_size + spec.test_size;
    if labels.len() < need {
        return Err(Error::Format(format!("{} rows, splits need {need}", labels.len())));
    }
    let all = Split {
        images: Tensor::new(vec![labels.len(), spec.image_size, spec.image_size, spec.channels], pixels)?,
        labels,
    };
    let range = |a: usize, b: usize| all.select(&(a..b).collect::<Vec<_>>());
    let (t, v) = (spec.train_size, spec.train_size + spec.val_size);
    Ok(Dataset {
        classes: spec.classes,
        train: range(0, t),
        val: range(t, v),
        test: range(v, need),
        shift: None,
        ood: None,
    })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::SyntheticGaussian => make_synthetic_dataset(spec),
        DatasetKind::Csv => load_csv_dataset(spec),
    }
}
