use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Images stored sample-major in `(c, h, w)` layout, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Gathers the given samples into one tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * len..(i + 1) * len]);
        }
        let shape = Shape4::new(indices.len(), self.channels, self.height, self.width);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor4::new(shape, data).expect("gathered batch matches shape"), labels)
    }

    /// Keeps `floor(fraction * len)` samples chosen by a seeded draw,
    /// preserving their original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let keep = (fraction * self.len() as f64).floor() as usize;
        if keep == 0 {
            return Err(Error::Config(format!("fraction {fraction} of {} samples keeps nothing", self.len())));
        }
        if keep == self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), keep).into_vec();
        idx.sort_unstable();
        let (x, labels) = self.batch(&idx);
        Ok(Dataset { pixels: x.into_data(), labels, ..self.clone() })
    }

    /// `d x d` average pooling of every image.
    pub fn downsample(&self, d: usize) -> Result<Dataset> {
        if d == 0 || !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) {
            return Err(Error::Config(format!("downsample factor {d} does not divide {}x{} images", self.height, self.width)));
        }
        if d == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / d, self.width / d);
        let inv = 1.0 / (d * d) as f64;
        let mut pixels = Vec::with_capacity(self.len() * self.channels * h * w);
        for plane in self.pixels.chunks(self.height * self.width) {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for a in 0..d {
                        let row = &plane[(i * d + a) * self.width + j * d..][..d];
                        acc += row.iter().sum::<f64>();
                    }
                    pixels.push(acc * inv);
                }
            }
        }
        Ok(Dataset { height: h, width: w, pixels, ..self.clone() })
    }
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes, scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], origin: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "parse error in {origin}: length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("parse error in {origin}: record {i} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset { channels: 3, height: CIFAR_SIDE, width: CIFAR_SIDE, classes: 10, pixels, labels })
}

pub fn load_cifar10(files: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for f in files {
        let f = f.as_ref();
        let bytes = std::fs::read(f).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", f.display())))?;
        let part = parse_cifar10(&bytes, &f.display().to_string())?;
        match &mut all {
            None => all = Some(part),
            Some(d) => {
                d.pixels.extend(part.pixels);
                d.labels.extend(part.labels);
            }
        }
    }
    all.ok_or_else(|| Error::Dataset("no dataset files given".into()))
}

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Each class owns a smooth 3-channel pattern. A sample is its class pattern
/// under a random per-sample contrast and brightness, plus pixel noise, so
/// both per-image and per-batch statistics carry nuisance variation.
pub fn synthetic(spec: SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.size == 0 || spec.train == 0 {
        return Err(Error::Config(format!("degenerate synthetic dataset {spec:?}")));
    }
    let (c, s) = (3, spec.size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = std::f64::consts::TAU;
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let waves: Vec<[f64; 4]> = (0..c * 2)
                .map(|_| {
                    [
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..tau),
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            let mut p = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        let v: f64 = waves[ch * 2..ch * 2 + 2]
                            .iter()
                            .map(|[fx, fy, ph, a]| a * (tau * (fx * i as f64 + fy * j as f64) / s as f64 + ph).sin())
                            .sum();
                        p.push(v);
                    }
                }
            }
            p
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("synthetic noise: {e}")))?;
    let mut draw = |count: usize| {
        let mut pixels = Vec::with_capacity(count * c * s * s);
        let mut labels = Vec::with_capacity(count);
        for k in 0..count {
            let label = k % spec.classes;
            let contrast = rng.random_range(0.5..2.0);
            let brightness = rng.random_range(-1.0..1.0);
            pixels.extend(prototypes[label].iter().map(|v| contrast * v + brightness + noise.sample(&mut rng)));
            labels.push(label);
        }
        Dataset { channels: c, height: s, width: s, classes: spec.classes, pixels, labels }
    };
    let train = draw(spec.train);
    let test = draw(spec.test);
    Ok((train, test))
}

/// Loads the configured train and test sets with fraction and downsampling
/// applied. Fractions apply to the training set only.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let (tr, te) = synthetic(SyntheticSpec {
                classes: cfg.synthetic_classes,
                train: cfg.synthetic_train,
                test: cfg.synthetic_test,
                size: cfg.synthetic_size,
                noise: cfg.synthetic_noise,
                seed: cfg.synthetic_seed,
            })?;
            (tr, (!te.is_empty()).then_some(te))
        }
        DatasetKind::Cifar10Binary => {
            let tr = load_cifar10(&cfg.train_files)?;
            let te = if cfg.test_files.is_empty() { None } else { Some(load_cifar10(&cfg.test_files)?) };
            (tr, te)
        }
    };
    let train = train.subsample(cfg.fraction, cfg.seed)?.downsample(cfg.downsample)?;
    let test = test.map(|t| t.downsample(cfg.downsample)).transpose()?;
    Ok((train, test))
}
