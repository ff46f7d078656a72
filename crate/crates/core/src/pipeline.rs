//! Running a trained model over samples and scoring it.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Evaluation, ImagePrediction};
use crate::loss::wrap_angle;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::OcclusionSample;
use crate::tensor::Tensor;

/// Network outputs for one `H x W x 3` image.
pub fn predict_image<T: Scalar>(model: &Model<T>, image: &Array3<f32>) -> Result<ImagePrediction> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::config(format!("image has {c} channels, expected 3")));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        data.extend(image.index_axis(ndarray::Axis(2), ch).iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let p = model.predict(&Tensor::new(vec![1, 3, h, w], data)?)?;
    let to_map = |t: &Tensor<T>| {
        Array2::from_shape_vec((h, w), t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()).expect("N=1, C=1 output")
    };
    Ok(ImagePrediction { edge_prob: to_map(&p.edge_prob), orientation: to_map(&p.orientation) })
}

pub fn predict_sample<T: Scalar>(model: &Model<T>, sample: &OcclusionSample) -> Result<ImagePrediction> {
    predict_image(model, &sample.image)
}

pub fn predict_samples<T: Scalar>(model: &Model<T>, samples: &[OcclusionSample]) -> Result<Vec<ImagePrediction>> {
    samples.iter().map(|s| predict_sample(model, s)).collect()
}

pub fn evaluate_model<T: Scalar>(model: &Model<T>, samples: &[OcclusionSample], cfg: &EvalConfig) -> Result<Evaluation> {
    evaluate(&predict_samples(model, samples)?, samples, cfg)
}

/// Mean |wrap(pred - gt)| of the raw orientation output over ground-truth
/// edge pixels; `None` without edge pixels.
pub fn mean_orientation_error(predictions: &[ImagePrediction], gts: &[OcclusionSample]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in predictions.iter().zip(gts) {
        for ((idx, &e), &gt) in g.edge.indexed_iter().zip(g.orientation.iter()) {
            if e {
                sum += wrap_angle(p.orientation[idx] as f64 - gt as f64).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
