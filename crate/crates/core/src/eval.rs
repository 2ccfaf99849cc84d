//! Evaluation: train fresh networks on a (synthetic) training set and measure
//! test accuracy, plus two diagnostics for comparing synthetic sets.

use std::fmt::Write as _;

use crate::augment::decode_all;
use crate::data::{LabeledDataset, SyntheticSet};
use crate::error::{Error, Result};
use crate::models::{ConvNetConfig, ModelSnapshot, DEFAULT_WIDTH};
use crate::rng::Stream;
use crate::tensor::{SgdState, Tape, Tensor};
use crate::training::{accuracy, embed_all, train_epoch};

pub const CSV_HEADER: &str = "label,depth,width,epochs,repeats,mean,std,per_seed";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub depth: usize,
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub repeats: usize,
    pub augment: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            depth: 3,
            width: DEFAULT_WIDTH,
            epochs: 300,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 256,
            repeats: 5,
            augment: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 1 {
            return Err(Error::Config("evaluation needs at least one repeat".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn network(&self, num_classes: usize, channels: usize, hw: (usize, usize)) -> ConvNetConfig {
        ConvNetConfig::new(self.depth, num_classes, channels, hw).with_width(self.width)
    }
}

/// A trained network and the number of optimizer steps it took.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ModelSnapshot,
    pub steps: usize,
}

/// Trains a fresh network on normalized `images` for `config.epochs` epochs.
pub fn train_model(
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
    config: &EvalConfig,
    seed: u64,
) -> Result<Trained> {
    config.validate()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected NCHW images, got {s:?}")));
    }
    let net = config.network(num_classes, s[1], (s[2], s[3]));
    let mut model = ModelSnapshot::build(net, &mut Stream::new(seed, "eval/init"))?;
    let mut batches = Stream::new(seed, "eval/batches");
    let mut opt = SgdState::new(config.learning_rate, config.momentum, config.weight_decay)?;
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        steps += train_epoch(
            &mut model,
            &mut opt,
            images,
            labels,
            config.batch_size,
            config.augment,
            &mut batches,
        )?
        .steps;
        model.epoch_index = epoch as u32;
    }
    Ok(Trained { model, steps })
}

/// Decodes `syn` and trains a fresh network on the result.
pub fn train_on_synthetic(syn: &SyntheticSet, config: &EvalConfig, seed: u64) -> Result<ModelSnapshot> {
    let (images, labels) = decode_all(syn)?;
    Ok(train_model(&images, &labels, syn.num_classes(), config, seed)?.model)
}

/// Fraction of `dataset` classified correctly by argmax (ties go to the lowest class).
pub fn test_accuracy(model: &ModelSnapshot, dataset: &LabeledDataset) -> Result<f64> {
    let c = model.config();
    let (h, w) = dataset.image_hw();
    if (c.input_channels, c.input_height, c.input_width) != (dataset.channels(), h, w) {
        return Err(Error::Incompatible("model input shape differs from the dataset's".into()));
    }
    accuracy(model, dataset.normalized(), dataset.labels())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub label: String,
    pub config: EvalConfig,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_seed`.
    pub std: f64,
}

impl EvalResult {
    pub fn from_accuracies(label: &str, config: EvalConfig, per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        EvalResult {
            label: label.to_string(),
            config,
            per_seed,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn report(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.label);
        let _ = writeln!(
            s,
            "  ConvNet-{} width {}, {} epochs, lr {}, momentum {}, weight decay {}, batch {}, augment {}",
            c.depth, c.width, c.epochs, c.learning_rate, c.momentum, c.weight_decay, c.batch_size, c.augment
        );
        let seeds: Vec<String> = self.per_seed.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        let _ = writeln!(s, "  per seed: {}", seeds.join(" "));
        let _ = writeln!(s, "  accuracy: {:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std);
        s
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let seeds: Vec<String> = self.per_seed.iter().map(|a| format!("{a:?}")).collect();
        format!(
            "{},{},{},{},{},{:?},{:?},{}",
            self.label.replace(',', ";"),
            c.depth,
            c.width,
            c.epochs,
            c.repeats,
            self.mean,
            self.std,
            seeds.join(";")
        )
    }
}

/// Trains `config.repeats` networks on `images` (seeds `seed`, `seed + 1`, ...)
/// and tests each on `test`.
pub fn evaluate_images(
    label: &str,
    images: &Tensor,
    labels: &[usize],
    test: &LabeledDataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalResult> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let t = train_model(images, labels, test.num_classes(), config, seed.wrapping_add(r as u64))?;
        per_seed.push(test_accuracy(&t.model, test)?);
    }
    Ok(EvalResult::from_accuracies(label, *config, per_seed))
}

/// Evaluates `syn`; `test` is normalized with the synthetic set's statistics first.
pub fn evaluate(label: &str, syn: &SyntheticSet, test: &LabeledDataset, config: &EvalConfig, seed: u64) -> Result<EvalResult> {
    if syn.num_classes() != test.num_classes() || syn.channels() != test.channels() || syn.image_hw() != test.image_hw() {
        return Err(Error::Incompatible("synthetic set and test set differ in classes or image shape".into()));
    }
    let test = test.renormalized(syn.stats().clone())?;
    let (images, labels) = decode_all(syn)?;
    evaluate_images(label, &images, &labels, &test, config, seed)
}

/// Strictly-above-mean test on gradient magnitudes.
pub fn activated(grads: &[f64]) -> Vec<bool> {
    let mean = grads.iter().map(|g| g.abs()).sum::<f64>() / grads.len() as f64;
    grads.iter().map(|g| g.abs() > mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationRatio {
    /// Mean over images of the fraction of activated units.
    pub per_image: f64,
    /// Fraction of units activated by at least one image.
    pub dataset: f64,
}

/// Share of post-ReLU units whose loss gradient exceeds their layer's mean
/// magnitude, per image and over the union of the batch.
pub fn neuron_activation_ratio(model: &ModelSnapshot, images: &Tensor, labels: &[usize]) -> Result<ActivationRatio> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::Shape(format!("{n} labels for image batch {:?}", images.shape())));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.leaf(images.clone());
    let trace = bound.trace(&mut tape, x)?;
    let logits = bound.head(&mut tape, trace.embedding)?;
    // Images do not interact, so the batch-mean loss gives every image's own
    // gradient up to a common factor, which the threshold ignores.
    let loss = tape.cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let mut per_image_hits = vec![0usize; n];
    let mut union_hits = 0usize;
    let mut units = 0usize;
    for act in &trace.activations {
        let g = tape
            .grad(*act)
            .ok_or_else(|| Error::Numeric("activation received no gradient".into()))?;
        let per = g.row_len();
        let mut any = vec![false; per];
        for (i, row) in g.data().chunks_exact(per).enumerate() {
            for (u, on) in activated(row).into_iter().enumerate() {
                if on {
                    per_image_hits[i] += 1;
                    any[u] = true;
                }
            }
        }
        union_hits += any.iter().filter(|&&a| a).count();
        units += per;
    }
    let per_image = per_image_hits.iter().map(|&h| h as f64 / units as f64).sum::<f64>() / n as f64;
    Ok(ActivationRatio {
        per_image,
        dataset: union_hits as f64 / units as f64,
    })
}

fn class_means(embeddings: &Tensor, labels: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    let d = embeddings.row_len();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in embeddings.data().chunks_exact(d).zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelRange { label: y, num_classes });
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, (s, &k)) in sums.iter_mut().zip(&counts).enumerate() {
        if k == 0 {
            return Err(Error::UnknownClass(c));
        }
        s.iter_mut().for_each(|v| *v /= k as f64);
    }
    Ok(sums)
}

/// Cosine similarity of per-class mean embeddings under `extractor`,
/// averaged over classes.
pub fn feature_correlation(
    extractor: &ModelSnapshot,
    real: &Tensor,
    real_labels: &[usize],
    syn: &Tensor,
    syn_labels: &[usize],
) -> Result<f64> {
    if real_labels.is_empty() || syn_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = extractor.config().num_classes;
    let a = class_means(&embed_all(extractor, real)?, real_labels, k)?;
    let b = class_means(&embed_all(extractor, syn)?, syn_labels, k)?;
    let mut total = 0.0;
    for (c, (u, v)) in a.iter().zip(&b).enumerate() {
        let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::Numeric(format!("class {c} has a zero mean embedding")));
        }
        total += dot / (nu * nv);
    }
    Ok(total / k as f64)
}
