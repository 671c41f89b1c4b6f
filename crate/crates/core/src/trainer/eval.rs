use crate::classifier::Classifier;
use crate::derainer::Derainer;
use crate::label::DensityLabel;
use crate::metrics::{psnr, ssim, ImageMetrics, MetricReport};
use crate::params::ParamStore;
use crate::raingen::SamplePair;
use crate::{Error, Result};

/// Where the de-rainer's label input comes from at test time.
#[derive(Clone, Copy, Debug)]
pub enum LabelSource<'a> {
    GroundTruth,
    Fixed(DensityLabel),
    Predicted { classifier: &'a Classifier, params: &'a ParamStore },
}

impl LabelSource<'_> {
    pub fn label_for(&self, pair: &SamplePair) -> Result<DensityLabel> {
        match self {
            LabelSource::GroundTruth => Ok(pair.label),
            LabelSource::Fixed(l) => Ok(*l),
            LabelSource::Predicted { classifier, params } => classifier.predict_density(params, &pair.rainy),
        }
    }
}

/// PSNR / SSIM of the clipped de-rained output against the clean image.
pub fn evaluate_derainer(model: &Derainer, params: &ParamStore, samples: &[SamplePair], labels: LabelSource) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyManifest("no evaluation pairs".into()));
    }
    let rows = samples
        .iter()
        .map(|pair| {
            let out = model.forward(params, &pair.rainy, labels.label_for(pair)?)?.image();
            Ok(ImageMetrics { id: pair.id.clone(), psnr_db: psnr(&out, &pair.clean, 1.0)?, ssim: ssim(&out, &pair.clean)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}

/// The same metrics for the untouched rainy inputs.
pub fn input_report(samples: &[SamplePair]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyManifest("no evaluation pairs".into()));
    }
    let rows = samples
        .iter()
        .map(|p| Ok(ImageMetrics { id: p.id.clone(), psnr_db: psnr(&p.rainy, &p.clean, 1.0)?, ssim: ssim(&p.rainy, &p.clean)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}

/// Fraction of samples whose predicted density matches the label.
pub fn classifier_accuracy(clf: &Classifier, params: &ParamStore, samples: &[SamplePair]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyManifest("no evaluation pairs".into()));
    }
    let mut hits = 0;
    for s in samples {
        if clf.predict_density(params, &s.rainy)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
