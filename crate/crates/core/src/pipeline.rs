//! Dataset-level training: segmentation and textons feed the SVM, whose
//! prior maps then feed CNN patch sampling.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cnn::{
    balance_classes, sample_patches, train_cnn_with, Architecture, CnnModel, PatchClass, Schedule,
    TrainingPatch,
};
use crate::error::{Error, Result};
use crate::features::{build_texton_dictionary, region_features, DEFAULT_TEXTONS};
use crate::imageio::{rgb_to_lab, Mask, Raster, RgbImage};
use crate::prior::{label_regions, shadow_prior_lab, train_svm, SvmModel, SvmParams};
use crate::segmentation::{mean_shift_segment, MeanShiftParams, Segmentation};

/// An image with its ground-truth mask.
pub type Sample = (RgbImage, Mask);

#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrainConfig {
    pub params: SvmParams,
    pub textons: usize,
    pub mean_shift: MeanShiftParams,
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.textons < 2 {
            return Err(Error::InvalidArgument(format!(
                "texton count must be at least 2, got {}",
                self.textons
            )));
        }
        self.params.validate()?;
        self.mean_shift.validate()
    }
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        SvmTrainConfig {
            params: SvmParams::default(),
            textons: DEFAULT_TEXTONS,
            mean_shift: MeanShiftParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnTrainConfig {
    pub per_class: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub mean_shift: MeanShiftParams,
    pub architecture: Architecture,
}

impl CnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::InvalidArgument(
                "per-class patch count must be at least 1".into(),
            ));
        }
        self.schedule.validate()?;
        self.mean_shift.validate()
    }
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        CnnTrainConfig {
            per_class: 20,
            schedule: Schedule::default(),
            seed: 0,
            mean_shift: MeanShiftParams::default(),
            architecture: Architecture::standard(),
        }
    }
}

/// SHA-256 over every image and mask, hex encoded, first 16 bytes.
pub fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for (img, gt) in samples {
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.height() as u64).to_le_bytes());
        h.update(img.data());
        let bits: Vec<u8> = gt.data().iter().map(|&b| b as u8).collect();
        h.update(&bits);
    }
    h.finalize()[..16]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    for (img, gt) in samples {
        gt.check_size(img.width(), img.height())?;
    }
    Ok(())
}

/// Lab conversion and mean-shift segmentation of every image.
pub fn segment_all(
    samples: &[Sample],
    params: &MeanShiftParams,
) -> Result<Vec<(Raster<f64>, Segmentation)>> {
    params.validate()?;
    samples
        .par_iter()
        .map(|(img, _)| {
            let lab = rgb_to_lab(img);
            let seg = mean_shift_segment(&lab, params)?;
            Ok((lab, seg))
        })
        .collect()
}

/// Texton dictionary, region features and majority labels over the whole
/// set, then the SVM and its calibration.
pub fn train_svm_dataset(samples: &[Sample], config: &SvmTrainConfig) -> Result<SvmModel> {
    config.validate()?;
    check_samples(samples)?;
    let segmented = segment_all(samples, &config.mean_shift)?;
    let labs: Vec<Raster<f64>> = segmented.iter().map(|(lab, _)| lab.clone()).collect();
    let dictionary = build_texton_dictionary(&labs, config.textons, config.params.seed)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for ((lab, seg), (_, gt)) in segmented.iter().zip(samples) {
        features.extend(region_features(lab, seg, &dictionary)?);
        labels.extend(label_regions(seg, gt)?);
    }
    let shadow = labels.iter().filter(|l| l.shadow).count();
    log::info!(
        "svm: {} regions ({shadow} shadow) from {} images",
        labels.len(),
        samples.len()
    );
    let mut model = train_svm(&features, &labels, dictionary, &config.params)?;
    model.meta.dataset_fingerprint = dataset_fingerprint(samples);
    Ok(model)
}

fn image_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Class-balanced patches drawn from every image, using the SVM prior as
/// the fourth channel.
pub fn training_patches(
    samples: &[Sample],
    svm: &SvmModel,
    config: &CnnTrainConfig,
) -> Result<Vec<TrainingPatch>> {
    config.validate()?;
    check_samples(samples)?;
    let segmented = segment_all(samples, &config.mean_shift)?;
    let per_image = samples
        .par_iter()
        .zip(&segmented)
        .enumerate()
        .map(|(i, ((img, gt), (lab, seg)))| {
            let prior = shadow_prior_lab(svm, lab, seg)?.map;
            sample_patches(
                img,
                &prior,
                gt,
                config.per_class,
                image_seed(config.seed, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<TrainingPatch> = per_image.into_iter().flatten().collect();
    let balanced = balance_classes(all, config.seed)?;
    let counts = PatchClass::ALL.map(|c| balanced.iter().filter(|p| p.class == c).count());
    log::info!(
        "cnn: {} patches per class from {} images",
        counts[0],
        samples.len()
    );
    Ok(balanced)
}

pub fn train_cnn_dataset(
    samples: &[Sample],
    svm: &SvmModel,
    config: &CnnTrainConfig,
) -> Result<CnnModel> {
    let data = training_patches(samples, svm, config)?;
    let mut model = train_cnn_with(config.architecture, &data, &config.schedule, config.seed)?;
    model.meta.dataset_fingerprint = dataset_fingerprint(samples);
    Ok(model)
}
