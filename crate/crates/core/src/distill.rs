//! Synthetic set optimization: distribution matching on trajectory-sampled
//! feature extractors plus a cross-entropy term from a nearby expert.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::augment::{sample_params, AugmentationParams, MultiformationCodec};
use crate::data::{init_synthetic, sample_class_batch, ClassBatch, LabeledDataset, SyntheticSet};
use crate::error::{Error, Result};
use crate::models::{BoundModel, ModelSnapshot};
use crate::rng::Stream;
use crate::tensor::{SgdState, Tape, Tensor, Var};
use crate::trajectory::{sample_expert, sample_extractor, sample_initial, TrajectoryStore};

pub const DEFAULT_SYN_MOMENTUM: f64 = 0.5;
pub const DEFAULT_REAL_BATCH: usize = 64;
pub const CSV_HEADER: &str = "iter,ext_epoch,exp_epoch,l_mmd,l_sdc,l_total";

/// `2.5` below 50 images per class, `0.5` from 50 up.
pub fn default_alpha(ipc: usize) -> f64 {
    if ipc >= 50 {
        0.5
    } else {
        2.5
    }
}

/// How per-sample cross-entropy terms are combined into the SDC loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SdcNormalization {
    /// Mean over every synthetic image.
    #[default]
    GlobalMean,
    /// Mean within each class, summed over classes.
    PerClassSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub ipc: usize,
    pub rho: usize,
    pub alpha: f64,
    pub region_length: usize,
    pub iterations: usize,
    /// Base learning rate, multiplied by `ipc` unless `lr_override` is set.
    pub syn_lr: f64,
    pub lr_override: Option<f64>,
    pub syn_momentum: f64,
    pub real_batch: usize,
    pub seed: u64,
    pub augment: bool,
    /// Feed the augmented (rather than merely decoded) synthetic batch to the expert.
    pub augment_in_sdc: bool,
    /// Random-network extractors only and no SDC term.
    pub dm_baseline: bool,
    pub sdc_normalization: SdcNormalization,
}

impl DistillConfig {
    pub fn new(ipc: usize) -> Self {
        DistillConfig {
            ipc,
            rho: 1,
            alpha: default_alpha(ipc),
            region_length: 10,
            iterations: 20_000,
            syn_lr: 0.01,
            lr_override: None,
            syn_momentum: DEFAULT_SYN_MOMENTUM,
            real_batch: DEFAULT_REAL_BATCH,
            seed: 0,
            augment: true,
            augment_in_sdc: true,
            dm_baseline: false,
            sdc_normalization: SdcNormalization::GlobalMean,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr_override.unwrap_or(self.syn_lr * self.ipc as f64)
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.dm_baseline {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ipc < 1 {
            return bad("ipc must be at least 1".into());
        }
        if self.rho < 1 {
            return bad("rho must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if self.region_length < 1 {
            return bad("expert region length must be at least 1".into());
        }
        let lr = self.effective_lr();
        if !(lr.is_finite() && lr > 0.0) {
            return bad(format!("synthetic learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&self.syn_momentum) {
            return bad(format!("synthetic momentum must lie in [0, 1), got {}", self.syn_momentum));
        }
        if self.real_batch < 1 {
            return bad("real batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// A class label paired with a batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ClassVar {
    pub class: usize,
    pub images: Var,
}

fn check_classes(real: &[ClassVar], syn: &[ClassVar]) -> Result<()> {
    if real.is_empty() || real.len() != syn.len() {
        return Err(Error::Config(format!(
            "need one real and one synthetic batch per class, got {} and {}",
            real.len(),
            syn.len()
        )));
    }
    for (c, (r, s)) in real.iter().zip(syn).enumerate() {
        if r.class != c || s.class != c {
            return Err(Error::Config(format!(
                "batches must cover classes 0..{} in order",
                real.len()
            )));
        }
    }
    Ok(())
}

/// Sum over classes of the squared distance between mean real and mean
/// synthetic embeddings under `extractor`.
pub fn mmd_loss(tape: &mut Tape, extractor: &BoundModel, real: &[ClassVar], syn: &[ClassVar]) -> Result<Var> {
    check_classes(real, syn)?;
    let mut total: Option<Var> = None;
    for (r, s) in real.iter().zip(syn) {
        let er = extractor.embed(tape, r.images)?;
        let es = extractor.embed(tape, s.images)?;
        let mr = tape.mean_rows(er)?;
        let ms = tape.mean_rows(es)?;
        let d = tape.sub(mr, ms)?;
        let sq = tape.sum_squares(d)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    Ok(total.expect("at least one class"))
}

/// Cross-entropy of `expert` on the synthetic batches against their class labels.
pub fn sdc_loss(tape: &mut Tape, expert: &BoundModel, syn: &[ClassVar], norm: SdcNormalization) -> Result<Var> {
    if syn.is_empty() {
        return Err(Error::Config("no synthetic batches".into()));
    }
    match norm {
        SdcNormalization::GlobalMean => {
            let mut labels = Vec::new();
            for s in syn {
                labels.extend(std::iter::repeat_n(s.class, tape.shape(s.images)[0]));
            }
            let vars: Vec<Var> = syn.iter().map(|s| s.images).collect();
            let all = tape.concat_rows(&vars)?;
            let logits = expert.logits(tape, all)?;
            tape.cross_entropy(logits, &labels)
        }
        SdcNormalization::PerClassSum => {
            let mut total: Option<Var> = None;
            for s in syn {
                let labels = vec![s.class; tape.shape(s.images)[0]];
                let logits = expert.logits(tape, s.images)?;
                let ce = tape.cross_entropy(logits, &labels)?;
                total = Some(match total {
                    None => ce,
                    Some(t) => tape.add(t, ce)?,
                });
            }
            Ok(total.expect("at least one class"))
        }
    }
}

/// `l_mmd + alpha * l_sdc`. With `alpha == 0` this is `l_mmd` itself.
pub fn total_loss(tape: &mut Tape, l_mmd: Var, l_sdc: Var, alpha: f64) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(l_mmd);
    }
    let weighted = tape.scale(l_sdc, alpha)?;
    tape.add(l_mmd, weighted)
}

/// Everything random about one iteration, drawn up front.
#[derive(Debug, Clone)]
pub struct StepDraw<'s> {
    pub extractor: &'s ModelSnapshot,
    pub expert: Option<&'s ModelSnapshot>,
    pub real: Vec<ClassBatch>,
    /// One augmentation per class, shared by that class's real and synthetic batch.
    pub augment: Vec<Option<AugmentationParams>>,
}

/// Loss values and the gradient with respect to the synthetic storage.
#[derive(Debug, Clone)]
pub struct Objective {
    pub l_mmd: f64,
    pub l_sdc: Option<f64>,
    pub l_total: f64,
    pub grad: Tensor,
}

/// Evaluates the objective for `storage` under a fixed draw.
pub fn evaluate_objective(
    storage: &Tensor,
    syn: &SyntheticSet,
    draw: &StepDraw<'_>,
    config: &DistillConfig,
) -> Result<Objective> {
    let (h, w) = syn.image_hw();
    let codec = MultiformationCodec::new(syn.rho(), h, w)?;
    let mut tape = Tape::new();
    let s = tape.leaf(storage.clone());
    let mut real = Vec::with_capacity(syn.num_classes());
    let mut syn_aug = Vec::with_capacity(syn.num_classes());
    let mut syn_plain = Vec::with_capacity(syn.num_classes());
    for (class, batch) in draw.real.iter().enumerate() {
        let slots = syn.class_slots(class);
        let part = tape.slice_rows(s, slots.start, slots.len())?;
        let decoded = codec.decode(&mut tape, part)?;
        let r = tape.constant(batch.images.clone());
        let (r, a) = match &draw.augment[class] {
            Some(p) => (p.apply(&mut tape, r)?, p.apply(&mut tape, decoded)?),
            None => (r, decoded),
        };
        real.push(ClassVar { class, images: r });
        syn_aug.push(ClassVar { class, images: a });
        syn_plain.push(ClassVar { class, images: decoded });
    }
    let extractor = draw.extractor.bind(&mut tape, false);
    let l_mmd = mmd_loss(&mut tape, &extractor, &real, &syn_aug)?;
    let alpha = config.effective_alpha();
    let (l_sdc, loss) = match draw.expert {
        Some(expert) => {
            let bound = expert.bind(&mut tape, false);
            let input = if config.augment_in_sdc { &syn_aug } else { &syn_plain };
            let l_sdc = sdc_loss(&mut tape, &bound, input, config.sdc_normalization)?;
            (Some(l_sdc), total_loss(&mut tape, l_mmd, l_sdc, alpha)?)
        }
        None => (None, l_mmd),
    };
    let l_total = tape.value(loss).item();
    let l_mmd_v = tape.value(l_mmd).item();
    let l_sdc_v = l_sdc.map(|v| tape.value(v).item());
    if !l_total.is_finite() {
        return Err(Error::Numeric(format!("distillation loss became {l_total}")));
    }
    tape.backward(loss)?;
    let grad = tape
        .take_grad(s)
        .unwrap_or_else(|| Tensor::zeros(storage.shape()));
    Ok(Objective {
        l_mmd: l_mmd_v,
        l_sdc: l_sdc_v,
        l_total,
        grad,
    })
}

/// One row of the per-iteration report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub extractor_epoch: usize,
    pub expert_epoch: Option<usize>,
    pub l_mmd: f64,
    pub l_sdc: Option<f64>,
    pub l_total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DistillReport {
    pub records: Vec<IterationRecord>,
    pub elapsed: Duration,
}

impl DistillReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let exp = r.expert_epoch.map(|e| e.to_string()).unwrap_or_default();
            let sdc = r.l_sdc.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:?},{},{:?}",
                r.iteration, r.extractor_epoch, exp, r.l_mmd, sdc, r.l_total
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Stateful distillation: the synthetic set, its optimizer and the random streams.
pub struct Distiller<'a> {
    dataset: &'a LabeledDataset,
    store: &'a TrajectoryStore,
    config: DistillConfig,
    syn: SyntheticSet,
    opt: SgdState,
    models: Stream,
    real: Stream,
    augment: Stream,
    iteration: usize,
}

impl<'a> Distiller<'a> {
    /// Validates the setup and initializes the synthetic set from real images.
    pub fn new(dataset: &'a LabeledDataset, store: &'a TrajectoryStore, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        store.check_dataset(dataset)?;
        if store.is_empty() {
            return Err(Error::Config("empty trajectory store".into()));
        }
        if !config.dm_baseline && config.region_length > store.epochs() + 1 {
            return Err(Error::Config(format!(
                "expert region length {} exceeds the {} snapshots per trajectory",
                config.region_length,
                store.epochs() + 1
            )));
        }
        let mut init = Stream::new(config.seed, "distill/init");
        let syn = init_synthetic(dataset, config.ipc, config.rho, &mut init)?;
        let opt = SgdState::new(config.effective_lr(), config.syn_momentum, 0.0)?;
        Ok(Distiller {
            dataset,
            store,
            models: Stream::new(config.seed, "distill/models"),
            real: Stream::new(config.seed, "distill/real"),
            augment: Stream::new(config.seed, "distill/augment"),
            config,
            syn,
            opt,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn synthetic(&self) -> &SyntheticSet {
        &self.syn
    }

    pub fn into_synthetic(self) -> SyntheticSet {
        self.syn
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Samples the networks, real batches and augmentations for the next step.
    pub fn draw(&mut self) -> Result<StepDraw<'a>> {
        let store = self.store;
        let (extractor, expert) = if self.config.dm_baseline {
            (sample_initial(store, &mut self.models), None)
        } else {
            let (ext, region) = sample_extractor(store, self.config.region_length, &mut self.models)?;
            (ext, Some(sample_expert(store, &region, &mut self.models)))
        };
        let mut real = Vec::with_capacity(self.dataset.num_classes());
        let mut augment = Vec::with_capacity(self.dataset.num_classes());
        for class in 0..self.dataset.num_classes() {
            real.push(sample_class_batch(self.dataset, class, self.config.real_batch, &mut self.real)?);
            augment.push(self.config.augment.then(|| sample_params(&mut self.augment)));
        }
        Ok(StepDraw {
            extractor,
            expert,
            real,
            augment,
        })
    }

    pub fn objective(&self, draw: &StepDraw<'_>) -> Result<Objective> {
        evaluate_objective(&self.syn.storage, &self.syn, draw, &self.config)
    }

    /// Draws, evaluates and takes one optimizer step on the synthetic storage.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let draw = self.draw()?;
        let obj = self.objective(&draw)?;
        self.opt
            .step(&mut [("storage", &mut self.syn.storage)], vec![Some(obj.grad)])?;
        if !self.syn.storage.all_finite() {
            return Err(Error::Numeric("synthetic images became non-finite".into()));
        }
        let record = IterationRecord {
            iteration: self.iteration,
            extractor_epoch: draw.extractor.epoch_index as usize,
            expert_epoch: draw.expert.map(|e| e.epoch_index as usize),
            l_mmd: obj.l_mmd,
            l_sdc: obj.l_sdc,
            l_total: obj.l_total,
        };
        self.iteration += 1;
        Ok(record)
    }
}

/// Runs `config.iterations` steps. `on_iter` sees every record as it is produced.
pub fn run(
    dataset: &LabeledDataset,
    store: &TrajectoryStore,
    config: DistillConfig,
    mut on_iter: impl FnMut(&IterationRecord),
) -> Result<(SyntheticSet, DistillReport)> {
    let start = Instant::now();
    let iterations = config.iterations;
    let mut d = Distiller::new(dataset, store, config)?;
    let mut report = DistillReport::default();
    for _ in 0..iterations {
        let r = d.step()?;
        on_iter(&r);
        report.records.push(r);
    }
    report.elapsed = start.elapsed();
    Ok((d.into_synthetic(), report))
}
