//! Mini-batch supervised training shared by expert pretraining and evaluation.

use crate::augment::sample_params;
use crate::error::{Error, Result};
use crate::models::ModelSnapshot;
use crate::rng::Stream;
use crate::tensor::{SgdState, Tape, Tensor};

/// Chunk size for gradient-free inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// Number of optimizer steps in one epoch over `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One pass over `images` (normalized) in a fresh random order.
///
/// With `augment`, each mini-batch gets one freshly sampled augmentation.
pub fn train_epoch(
    model: &mut ModelSnapshot,
    opt: &mut SgdState,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
    augment: bool,
    stream: &mut Stream,
) -> Result<EpochStats> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::Shape(format!("{} labels for image batch {:?}", n, images.shape())));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let names = model.param_names();
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch_size) {
        let batch = images.select_rows(chunk)?;
        let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mut x = tape.constant(batch);
        if augment {
            x = sample_params(stream).apply(&mut tape, x)?;
        }
        let logits = bound.logits(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, &ys)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        tape.backward(loss)?;
        let grads = bound.take_grads(&mut tape);
        let mut params: Vec<(&str, &mut Tensor)> =
            names.iter().map(String::as_str).zip(model.params_mut().iter_mut()).collect();
        opt.step(&mut params, grads)?;
        total += value * chunk.len() as f64;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total / n as f64,
        steps,
    })
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for normalized `images`.
pub fn predict(model: &ModelSnapshot, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = INFERENCE_CHUNK.min(n - start);
        let logits = model.logits(&images.rows(start, len)?)?;
        out.extend(logits.data().chunks_exact(k).map(argmax));
        start += len;
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(model: &ModelSnapshot, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(model, images)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Embeddings of normalized `images`, computed in chunks.
pub fn embed_all(model: &ModelSnapshot, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = INFERENCE_CHUNK.min(n - start);
        parts.push(model.embed(&images.rows(start, len)?)?);
        start += len;
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}
