//! Accuracy and prediction-agreement metrics.

use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::tensor::Tensor;

/// Predicted label per image.
pub fn predict_all(net: &Network, images: &[Tensor]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|img| Ok(argmax(net.forward_single(img)?.data())))
        .collect()
}

/// Top-1 accuracy against ground truth.
pub fn accuracy(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Empty("accuracy over zero images".into()));
    }
    let preds = predict_all(net, images)?;
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of images where both networks predict the same label.
pub fn agreement(a: &Network, b: &Network, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("agreement over zero images".into()));
    }
    let pa = predict_all(a, images)?;
    let pb = predict_all(b, images)?;
    let same = pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / images.len() as f64)
}

/// Agreement of precomputed label vectors.
pub fn label_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "label vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}
