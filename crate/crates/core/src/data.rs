//! In-memory image classification data, seeded splits and batching.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed::{self, tags};

/// Images stored as `f32` in `(C, H, W)` order with per-channel
/// normalisation statistics applied when batches are assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || classes < 2 {
            return Err(Error::Config("dataset needs non-empty images and at least two classes".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::dim("dataset pixels", per * labels.len(), pixels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("dataset pixels".into()));
        }
        let hw = height * width;
        let n = (labels.len() * hw).max(1) as f64;
        let mut channel_mean = vec![0.0; channels];
        let mut channel_std = vec![0.0; channels];
        for c in 0..channels {
            let vals = || (0..labels.len()).flat_map(move |i| (0..hw).map(move |j| (i * channels + c) * hw + j));
            let mean = vals().map(|k| pixels[k] as f64).sum::<f64>() / n;
            let var = vals().map(|k| (pixels[k] as f64 - mean).powi(2)).sum::<f64>() / n;
            channel_mean[c] = mean;
            channel_std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
            channel_mean,
            channel_std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Normalised `(B, C, H, W)` tensor for the given sample indices.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let per = self.sample_len();
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = &self.pixels[i * per..(i + 1) * per];
            for (k, &p) in img.iter().enumerate() {
                let c = k / hw;
                data.push((p as f64 - self.channel_mean[c]) / self.channel_std[c]);
            }
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data).expect("non-empty batch")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Which partition a batch was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A batch tagged with the partition it came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub split: Split,
}

/// Disjoint train / validation / held-out test index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    /// Holds out `test_fraction` of all samples, then splits the remainder
    /// into `train_fraction` train and the rest validation.
    pub fn new(len: usize, test_fraction: f64, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction must lie in [0, 1), got {test_fraction}")));
        }
        let all: Vec<usize> = (0..len).collect();
        let mut rng = seed::rng(seed, tags::TEST_SPLIT);
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut rng);
        let n_test = (len as f64 * test_fraction).round() as usize;
        let mut test = shuffled[..n_test].to_vec();
        let mut rest = shuffled[n_test..].to_vec();
        test.sort_unstable();
        rest.sort_unstable();
        let (train, val) = split_dataset(&rest, train_fraction, seed)?;
        Ok(Self { train, val, test })
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Train and validation indices together: the full training set.
    pub fn train_and_val(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Seeded shuffle of `indices` into `(train, val)` with `round(n·fraction)`
/// training samples. Both halves are returned in ascending order.
pub fn split_dataset(indices: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut seed::rng(seed, tags::SPLIT));
    let n_train = (indices.len() as f64 * fraction).round() as usize;
    if n_train == 0 || n_train == indices.len() {
        return Err(Error::Config(format!(
            "splitting {} samples at fraction {fraction} leaves an empty split",
            indices.len()
        )));
    }
    let mut train = shuffled[..n_train].to_vec();
    let mut val = shuffled[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Shuffled mini-batches of `indices`; the last batch may be short.
pub fn batch_indices<R: Rng>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mini-batches in index order, for evaluation.
pub fn ordered_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn make_batch(data: &Dataset, indices: Vec<usize>, split: Split) -> Batch {
    Batch {
        x: data.images(&indices),
        labels: data.labels_of(&indices),
        indices,
        split,
    }
}

/// Built-in procedurally generated tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synthetic {
    /// A coloured Gaussian blob at a random position; the colour encodes the class.
    Blobs(usize),
    /// Sinusoidal stripes with random phase; the orientation encodes the class.
    Stripes(usize),
}

pub const SYNTHETIC_SAMPLES: usize = 512;
pub const SYNTHETIC_SIDE: usize = 16;

impl Synthetic {
    /// Parses names such as `blobs2` or `stripes4`.
    pub fn parse(name: &str) -> Result<Self> {
        let (kind, digits) = name.split_at(name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len()));
        let k: usize = digits
            .parse()
            .map_err(|_| Error::Config(format!("synthetic task `{name}` needs a class count suffix")))?;
        if !(2..=16).contains(&k) {
            return Err(Error::Config(format!("synthetic task `{name}`: class count must be in 2..=16")));
        }
        match kind {
            "blobs" => Ok(Synthetic::Blobs(k)),
            "stripes" => Ok(Synthetic::Stripes(k)),
            _ => Err(Error::Config(format!("unknown synthetic task `{name}`"))),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Synthetic::Blobs(k) | Synthetic::Stripes(k) => k,
        }
    }

    /// 512 samples of shape 3×16×16, labels cycling through the classes.
    pub fn generate(self, seed: u64) -> Dataset {
        let k = self.classes();
        let side = SYNTHETIC_SIDE;
        let mut rng = seed::rng(seed, tags::SYNTHETIC);
        let mut pixels = Vec::with_capacity(SYNTHETIC_SAMPLES * 3 * side * side);
        let mut labels = Vec::with_capacity(SYNTHETIC_SAMPLES);
        for i in 0..SYNTHETIC_SAMPLES {
            let label = i % k;
            labels.push(label);
            let mut img = vec![0.0f64; 3 * side * side];
            match self {
                Synthetic::Blobs(_) => {
                    let hue = 2.0 * PI * label as f64 / k as f64;
                    let colour = [hue.cos(), (hue - 2.0 * PI / 3.0).cos(), (hue + 2.0 * PI / 3.0).cos()];
                    let cy = rng.gen_range(3.0..side as f64 - 3.0);
                    let cx = rng.gen_range(3.0..side as f64 - 3.0);
                    let radius: f64 = rng.gen_range(1.5..3.0);
                    for c in 0..3 {
                        for y in 0..side {
                            for x in 0..side {
                                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                let noise: f64 = rng.sample(StandardNormal);
                                img[(c * side + y) * side + x] =
                                    1.5 * colour[c] * (-d2 / (2.0 * radius * radius)).exp() + 0.3 * noise;
                            }
                        }
                    }
                }
                Synthetic::Stripes(_) => {
                    let theta = PI * label as f64 / k as f64;
                    let (s, co) = theta.sin_cos();
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    let freq = 2.0 * PI / 4.0;
                    for c in 0..3 {
                        let gain = rng.gen_range(0.5..1.0);
                        for y in 0..side {
                            for x in 0..side {
                                let noise: f64 = rng.sample(StandardNormal);
                                img[(c * side + y) * side + x] =
                                    gain * (freq * (x as f64 * co + y as f64 * s) + phase).sin() + 0.3 * noise;
                            }
                        }
                    }
                }
            }
            pixels.extend(img.iter().map(|&v| v as f32));
        }
        Dataset::new(3, side, side, k, pixels, labels).expect("generator produces a valid dataset")
    }
}
