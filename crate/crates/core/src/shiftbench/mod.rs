//! Synthetic stand-in for the base, aging and detector datasets.
//!
//! The base task is `K` procedural texture families on 32x32 grayscale
//! images. Two shift families act on it:
//!
//! * **aging**: a feature-level, class-preserving roughening and erosion
//!   of the motifs whose magnitude `g(D)` grows with the aging duration `D`.
//! * **detector**: a statistical-level photometric transform (blur,
//!   contrast, gamma, brightness, sensor noise) applied identically to
//!   every class.
//!
//! Every generator is a pure function of its parameters and seed.

mod dataset;
mod render;

pub use dataset::{Dataset, DatasetError, SplitTag, DATASET_MAGIC, DATASET_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Aging durations in abstract days.
pub const AGING_DURATIONS: [u32; 7] = [0, 14, 24, 36, 43, 54, 60];

/// Whole-set sizes of the aging datasets, one per entry of [`AGING_DURATIONS`].
pub const AGING_SIZES: [usize; 7] = [51, 149, 147, 132, 149, 136, 60];

pub const IMAGE_SIDE: usize = render::SIDE;

const STREAM_IMAGES: u64 = 0x1;
const STREAM_AGING: u64 = 0x2;
const STREAM_DETECTOR: u64 = 0x3;
const STREAM_SPLIT: u64 = 0x4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for item `index` of `stream` under `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream.rotate_left(32)) ^ index))
}

/// Derives a child seed, e.g. one per aging duration.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ splitmix(label))
}

/// Maps aging duration to morphing magnitude, `g(D) = severity * D / 60`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgingModel {
    pub severity: f64,
}

impl Default for AgingModel {
    fn default() -> Self {
        AgingModel { severity: 1.0 }
    }
}

impl AgingModel {
    pub fn magnitude(&self, duration: u32) -> f64 {
        self.severity * f64::from(duration) / 60.0
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(DatasetError::Usage(format!("aging severity {} outside (0, 1]", self.severity)));
        }
        Ok(())
    }

    pub fn apply(&self, d: &Dataset, duration: u32, confounded: bool, seed: u64) -> Result<Dataset, DatasetError> {
        self.validate()?;
        if !AGING_DURATIONS.contains(&duration) {
            return Err(DatasetError::Usage(format!(
                "unsupported aging duration {duration}; expected one of {AGING_DURATIONS:?}"
            )));
        }
        let g = self.magnitude(duration);
        let spec = ShiftSpec::Aging { duration, magnitude: g, confounded, seed };
        let mut images = d.images().clone();
        let per: usize = d.image_shape().iter().product();
        if g > 0.0 || confounded {
            for (i, img) in images.data_mut().chunks_mut(per).enumerate() {
                let mut rng = stream_rng(seed, STREAM_AGING, i as u64);
                render::age(img, g, &mut rng);
                if confounded {
                    render::restyle(img);
                }
            }
        }
        Ok(d.with_images(images, spec))
    }
}

/// Photometric profile of a different imaging detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    /// Additive brightness, in `[-0.5, 0.5]`.
    pub brightness_offset: f64,
    /// Contrast gain about mid-gray, in `[0.1, 4]`.
    pub contrast_gain: f64,
    /// Gamma exponent, in `[0.2, 5]`.
    pub gamma: f64,
    /// Gaussian sensor noise, in `[0, 0.5]`.
    pub noise_sigma: f64,
    /// Box-blur radius in pixels, in `0..=4`.
    pub blur_radius: usize,
    pub seed: u64,
}

impl DetectorSpec {
    pub fn identity() -> Self {
        DetectorSpec {
            brightness_offset: 0.0,
            contrast_gain: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(DatasetError::Usage(format!("detector {name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("brightness_offset", self.brightness_offset, -0.5, 0.5)?;
        check("contrast_gain", self.contrast_gain, 0.1, 4.0)?;
        check("gamma", self.gamma, 0.2, 5.0)?;
        check("noise_sigma", self.noise_sigma, 0.0, 0.5)?;
        if self.blur_radius > 4 {
            return Err(DatasetError::Usage(format!("detector blur_radius = {} outside 0..=4", self.blur_radius)));
        }
        Ok(())
    }
}

impl Default for DetectorSpec {
    /// A softer, flatter, brighter and noisier detector.
    fn default() -> Self {
        DetectorSpec {
            brightness_offset: 0.12,
            contrast_gain: 0.6,
            gamma: 1.4,
            noise_sigma: 0.06,
            blur_radius: 1,
            seed: 0x7e2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    Aging { duration: u32, magnitude: f64, confounded: bool, seed: u64 },
    Detector(DetectorSpec),
}

/// Base dataset with its 80/20 pretraining split.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSplit {
    pub train: Dataset,
    pub val: Dataset,
}

/// `n` examples of `class_count` texture families, labels balanced within one.
pub fn gen_set(class_count: usize, n: usize, seed: u64, split: SplitTag) -> Result<Dataset, DatasetError> {
    gen_range(class_count, 0..n, seed, split)
}

fn gen_range(
    class_count: usize,
    range: std::ops::Range<usize>,
    seed: u64,
    split: SplitTag,
) -> Result<Dataset, DatasetError> {
    if class_count < 2 {
        return Err(DatasetError::Usage(format!("need at least 2 classes, got {class_count}")));
    }
    let side = render::SIDE;
    let n = range.len();
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in range {
        let class = i % class_count;
        let mut rng = stream_rng(seed, STREAM_IMAGES, i as u64);
        data.extend(render::render(class, &mut rng));
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, side, side], data).expect("rendered pixels are finite");
    Dataset::new(images, labels, class_count, seed, split)
}

/// Base task with `n` examples split 80/20 into train and validation.
pub fn gen_base(class_count: usize, n: usize, seed: u64) -> Result<BaseSplit, DatasetError> {
    if n < class_count {
        return Err(DatasetError::Usage(format!("dataset size {n} is smaller than class count {class_count}")));
    }
    let n_train = (n * 4 + 2) / 5;
    Ok(BaseSplit {
        train: gen_range(class_count, 0..n_train, seed, SplitTag::Train)?,
        val: gen_range(class_count, n_train..n, seed, SplitTag::Val)?,
    })
}

/// Aging shift with the default severity. `duration = 0` without
/// confounding returns the images unchanged.
pub fn apply_aging(d: &Dataset, duration: u32, confounded: bool, seed: u64) -> Result<Dataset, DatasetError> {
    AgingModel::default().apply(d, duration, confounded, seed)
}

/// Detector shift: blur, contrast, gamma, brightness, then sensor noise,
/// clamped to `[0, 1]`. Identity stages are skipped so an identity spec is
/// bit-exact.
pub fn apply_detector(d: &Dataset, spec: &DetectorSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let mut images = d.images().clone();
    let per: usize = d.image_shape().iter().product();
    if per != render::SIDE * render::SIDE {
        return Err(DatasetError::Usage(format!("detector shift expects single-channel {0}x{0} images", render::SIDE)));
    }
    let noise = (spec.noise_sigma > 0.0).then(|| rand_distr::Normal::new(0.0, spec.noise_sigma).expect("sigma > 0"));
    for (i, img) in images.data_mut().chunks_mut(per).enumerate() {
        render::box_blur(img, spec.blur_radius);
        if spec.contrast_gain != 1.0 {
            img.iter_mut().for_each(|p| *p = ((*p - 0.5) * spec.contrast_gain + 0.5).clamp(0.0, 1.0));
        }
        if spec.gamma != 1.0 {
            img.iter_mut().for_each(|p| *p = p.powf(spec.gamma));
        }
        if spec.brightness_offset != 0.0 {
            img.iter_mut().for_each(|p| *p += spec.brightness_offset);
        }
        if let Some(noise) = &noise {
            let mut rng = stream_rng(spec.seed, STREAM_DETECTOR, i as u64);
            img.iter_mut().for_each(|p| *p += rand_distr::Distribution::sample(noise, &mut rng));
        }
        img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
    Ok(d.with_images(images, ShiftSpec::Detector(*spec)))
}

/// Class-stratified 50/50 split into `(edit_train, edit_test)`. Halves
/// differ in size by at most one; when a class has an odd count the spare
/// example alternates between halves, starting with the test half.
pub fn split_5050(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if d.len() < 2 {
        return Err(DatasetError::Usage(format!("cannot split {} examples in half", d.len())));
    }
    let mut rng = stream_rng(seed, STREAM_SPLIT, 0);
    let mut train = Vec::with_capacity(d.len() / 2 + 1);
    let mut test = Vec::with_capacity(d.len() / 2 + 1);
    let mut spare_to_test = true;
    for class in 0..d.class_count() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut half = idx.len() / 2;
        if idx.len() % 2 == 1 {
            if !spare_to_test {
                half += 1;
            }
            spare_to_test = !spare_to_test;
        }
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((d.select(&train, SplitTag::EditTrain), d.select(&test, SplitTag::EditTest)))
}
