//! Expert trajectories: per-epoch snapshots of ConvNets trained on real data,
//! their on-disk store, and the extractor/expert sampling rules.
//!
//! Store layout:
//!
//! ```text
//! <dir>/manifest                 key=value text
//! <dir>/traj_<i>/epoch_<j>.snap  TGDDSNAP snapshot, j = 0..=epochs
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{parse_kv, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{ConvNetConfig, ModelSnapshot};
use crate::rng::Stream;
use crate::tensor::SgdState;
use crate::training::train_epoch;

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_BATCH: usize = 256;

/// How one trajectory was (or will be) trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrajectoryTraining {
    fn default() -> Self {
        TrajectoryTraining {
            epochs: 60,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: DEFAULT_BATCH,
            augment: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertTrajectory {
    pub id: usize,
    /// Snapshots for epochs `0..=epochs`, in order.
    pub snapshots: Vec<ModelSnapshot>,
    pub training: TrajectoryTraining,
    /// Mean training loss of each epoch `1..=epochs`.
    pub epoch_losses: Vec<f64>,
}

impl ExpertTrajectory {
    pub fn epochs(&self) -> usize {
        self.snapshots.len() - 1
    }
}

/// Trains trajectory `id` and keeps a snapshot after initialization and after
/// every epoch. `on_epoch(epoch, mean_loss)` is called after each epoch.
pub fn train_trajectory(
    dataset: &LabeledDataset,
    config: ConvNetConfig,
    training: &TrajectoryTraining,
    id: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ExpertTrajectory> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compatible(&config, dataset)?;
    let mut init = Stream::new(training.seed, &format!("trajectory/{id}/init"));
    let mut order = Stream::new(training.seed, &format!("trajectory/{id}/batches"));
    let mut model = ModelSnapshot::build(config, &mut init)?;
    let mut opt = SgdState::new(training.learning_rate, training.momentum, training.weight_decay)?;
    let mut snapshots = Vec::with_capacity(training.epochs + 1);
    snapshots.push(model.clone());
    let mut epoch_losses = Vec::with_capacity(training.epochs);
    for epoch in 1..=training.epochs {
        let stats = train_epoch(
            &mut model,
            &mut opt,
            dataset.normalized(),
            dataset.labels(),
            training.batch_size,
            training.augment,
            &mut order,
        )?;
        model.epoch_index = epoch as u32;
        snapshots.push(model.clone());
        epoch_losses.push(stats.mean_loss);
        on_epoch(epoch, stats.mean_loss);
    }
    Ok(ExpertTrajectory {
        id,
        snapshots,
        training: *training,
        epoch_losses,
    })
}

/// Errors unless `config` consumes images shaped like `dataset`'s.
pub fn check_compatible(config: &ConvNetConfig, dataset: &LabeledDataset) -> Result<()> {
    let (h, w) = dataset.image_hw();
    if config.num_classes != dataset.num_classes()
        || config.input_channels != dataset.channels()
        || (config.input_height, config.input_width) != (h, w)
    {
        return Err(Error::Incompatible(format!(
            "network expects {} classes of {}x{}x{} images, dataset has {} classes of {}x{}x{}",
            config.num_classes,
            config.input_channels,
            config.input_height,
            config.input_width,
            dataset.num_classes(),
            dataset.channels(),
            h,
            w
        )));
    }
    Ok(())
}

/// `L` consecutive snapshots of trajectory `trajectory` starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertRegion {
    pub trajectory: usize,
    pub start: usize,
    pub length: usize,
}

impl ExpertRegion {
    pub fn last(&self) -> usize {
        self.start + self.length - 1
    }
}

/// A set of trajectories sharing one network configuration and length.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    config: ConvNetConfig,
    epochs: usize,
    trajectories: Vec<ExpertTrajectory>,
}

impl TrajectoryStore {
    pub fn new(trajectories: Vec<ExpertTrajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Config("a trajectory store needs at least one trajectory".into()))?;
        let config = *first.snapshots[0].config();
        let epochs = first.epochs();
        for t in &trajectories {
            if t.epochs() != epochs {
                return Err(Error::Incompatible(format!(
                    "trajectory {} has {} epochs, expected {epochs}",
                    t.id,
                    t.epochs()
                )));
            }
            for (j, s) in t.snapshots.iter().enumerate() {
                if *s.config() != config || s.epoch_index as usize != j {
                    return Err(Error::Incompatible(format!(
                        "trajectory {} snapshot {j} does not fit the store",
                        t.id
                    )));
                }
            }
        }
        Ok(TrajectoryStore {
            config,
            epochs,
            trajectories,
        })
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    /// `M`: the last epoch index; each trajectory holds `M + 1` snapshots.
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[ExpertTrajectory] {
        &self.trajectories
    }

    pub fn snapshot(&self, trajectory: usize, epoch: usize) -> &ModelSnapshot {
        &self.trajectories[trajectory].snapshots[epoch]
    }

    pub fn check_dataset(&self, dataset: &LabeledDataset) -> Result<()> {
        check_compatible(&self.config, dataset)
    }

    pub fn manifest(&self) -> String {
        let c = &self.config;
        let t = &self.trajectories[0].training;
        let mut m = String::new();
        let _ = writeln!(m, "version={MANIFEST_VERSION}");
        let _ = writeln!(m, "n_trajectories={}", self.trajectories.len());
        let _ = writeln!(m, "epochs={}", self.epochs);
        let _ = writeln!(m, "depth={}", c.depth);
        let _ = writeln!(m, "width={}", c.width);
        let _ = writeln!(m, "num_classes={}", c.num_classes);
        let _ = writeln!(m, "input_channels={}", c.input_channels);
        let _ = writeln!(m, "input_height={}", c.input_height);
        let _ = writeln!(m, "input_width={}", c.input_width);
        let _ = writeln!(m, "config_hash={:016x}", c.hash());
        let _ = writeln!(m, "learning_rate={:?}", t.learning_rate);
        let _ = writeln!(m, "momentum={:?}", t.momentum);
        let _ = writeln!(m, "weight_decay={:?}", t.weight_decay);
        let _ = writeln!(m, "batch_size={}", t.batch_size);
        let _ = writeln!(m, "augment={}", t.augment);
        let _ = writeln!(m, "seed={}", t.seed);
        for tr in &self.trajectories {
            let losses: Vec<String> = tr.epoch_losses.iter().map(|l| format!("{l:?}")).collect();
            let _ = writeln!(m, "traj_{}.losses={}", tr.id, losses.join(","));
        }
        m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, t) in self.trajectories.iter().enumerate() {
            let tdir = dir.join(format!("traj_{i}"));
            std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
            for (j, s) in t.snapshots.iter().enumerate() {
                s.save(&tdir.join(format!("epoch_{j}.snap")))?;
            }
        }
        let path = dir.join("manifest");
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("manifest `{k}` has bad value `{v}`")))
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let version: u32 = parse("version", get("version")?)?;
        if version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        let config = ConvNetConfig {
            depth: num("depth")?,
            width: num("width")?,
            num_classes: num("num_classes")?,
            input_channels: num("input_channels")?,
            input_height: num("input_height")?,
            input_width: num("input_width")?,
        };
        let hash = u64::from_str_radix(get("config_hash")?, 16)
            .map_err(|_| Error::Format("manifest config_hash is not hex".into()))?;
        if hash != config.hash() {
            return Err(Error::Format("manifest config_hash does not match its config fields".into()));
        }
        let training = TrajectoryTraining {
            epochs: num("epochs")?,
            learning_rate: parse("learning_rate", get("learning_rate")?)?,
            momentum: parse("momentum", get("momentum")?)?,
            weight_decay: parse("weight_decay", get("weight_decay")?)?,
            batch_size: num("batch_size")?,
            augment: parse("augment", get("augment")?)?,
            seed: parse("seed", get("seed")?)?,
        };
        let n = num("n_trajectories")?;
        let mut trajectories = Vec::with_capacity(n);
        for i in 0..n {
            let mut snapshots = Vec::with_capacity(training.epochs + 1);
            for j in 0..=training.epochs {
                let s = ModelSnapshot::load(&dir.join(format!("traj_{i}/epoch_{j}.snap")))?;
                if *s.config() != config || s.epoch_index as usize != j {
                    return Err(Error::Format(format!("traj_{i}/epoch_{j}.snap disagrees with the manifest")));
                }
                snapshots.push(s);
            }
            let epoch_losses = match get(&format!("traj_{i}.losses")) {
                Ok("") | Err(_) => Vec::new(),
                Ok(v) => v
                    .split(',')
                    .map(|p| parse("losses", p))
                    .collect::<Result<Vec<f64>>>()?,
            };
            trajectories.push(ExpertTrajectory {
                id: i,
                snapshots,
                training,
                epoch_losses,
            });
        }
        TrajectoryStore::new(trajectories)
    }
}

/// Picks a trajectory uniformly and a start epoch uniformly from
/// `0..=M - L + 1`, so the region of `L` snapshots never runs past epoch `M`.
/// Returns the snapshot at the start epoch (the feature extractor) and the region.
pub fn sample_extractor<'s>(
    store: &'s TrajectoryStore,
    region_length: usize,
    stream: &mut Stream,
) -> Result<(&'s ModelSnapshot, ExpertRegion)> {
    if store.is_empty() {
        return Err(Error::Config("empty trajectory store".into()));
    }
    if region_length < 1 || region_length > store.epochs + 1 {
        return Err(Error::Config(format!(
            "expert region length {region_length} does not fit trajectories of {} snapshots",
            store.epochs + 1
        )));
    }
    let trajectory = stream.below(store.len());
    let start = stream.below(store.epochs + 2 - region_length);
    let region = ExpertRegion {
        trajectory,
        start,
        length: region_length,
    };
    Ok((store.snapshot(trajectory, start), region))
}

/// A uniformly chosen snapshot of `region`.
pub fn sample_expert<'s>(store: &'s TrajectoryStore, region: &ExpertRegion, stream: &mut Stream) -> &'s ModelSnapshot {
    let k = stream.below(region.length);
    store.snapshot(region.trajectory, region.start + k)
}

/// The randomly initialized (epoch 0) snapshot of a uniformly chosen trajectory.
pub fn sample_initial<'s>(store: &'s TrajectoryStore, stream: &mut Stream) -> &'s ModelSnapshot {
    store.snapshot(stream.below(store.len()), 0)
}
