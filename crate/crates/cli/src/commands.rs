//! Subcommand implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use tgdd::augment::decode_all;
use tgdd::data::{generate_toy_dataset, LabeledDataset, SyntheticSet, ToySpec};
use tgdd::distill::{run, DistillConfig, SdcNormalization};
use tgdd::eval::{evaluate, evaluate_images, EvalConfig, EvalResult, CSV_HEADER};
use tgdd::models::{ConvNetConfig, DEFAULT_WIDTH};
use tgdd::rng::Stream;
use tgdd::trajectory::{train_trajectory, TrajectoryStore, TrajectoryTraining};
use tgdd::{Error, Result};

use crate::raster::{montage, read_image_folder, save_png};
use crate::settings::Settings;
use crate::{ConvertArgs, DistillArgs, EvalArgs, ExportGridArgs, PretrainArgs, ToygenArgs};

pub struct Context {
    settings: Settings,
    seed: u64,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, quiet: bool) -> Result<Self> {
        let mut settings = Settings::new(config)?;
        let seed = settings.get("seed", seed, 0)?;
        let out = settings.get("out", out.map(|p| p.display().to_string()), "out".to_string())?;
        Ok(Context {
            settings,
            seed,
            out: PathBuf::from(out),
            quiet,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Writes the config echo; called once every setting is resolved.
    fn begin(&self) -> Result<()> {
        for key in self.settings.unused() {
            self.log(format!("warning: config key `{key}` is not used by this command"));
        }
        self.settings.write_echo(&self.out)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn toygen(mut ctx: Context, a: ToygenArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let classes = s.get("classes", a.classes, 3)?;
    let per_class = s.get("per_class", a.per_class, 200)?;
    let test_per_class = s.get("test_per_class", a.test_per_class, 200)?;
    let size = s.get("size", a.size, 16)?;
    let channels = s.get("channels", a.channels, 3)?;
    let noise = s.get("noise", a.noise, 0.15)?;
    if classes < 2 {
        return Err(Error::Config("the toy dataset needs at least two classes".into()));
    }
    ctx.begin()?;
    let mut spec = ToySpec::new(classes, per_class, (size, size), channels);
    spec.noise_std = noise;
    let train = generate_toy_dataset(&spec, ctx.seed)?;
    spec.per_class = test_per_class;
    let test_seed = Stream::new(ctx.seed, "toygen/test").next_u64();
    let test = generate_toy_dataset(&spec, test_seed)?;
    train.save(&ctx.out.join("toy.tgdd"))?;
    test.save(&ctx.out.join("toy_test.tgdd"))?;
    ctx.log(format!(
        "wrote {} training and {} test images to {}",
        train.len(),
        test.len(),
        ctx.out.display()
    ));
    Ok(())
}

pub fn convert(mut ctx: Context, a: ConvertArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let input = s.path("input", a.input)?;
    let name = s.get("name", a.name, "dataset".to_string())?;
    let channels = s.get("channels", a.channels, 3)?;
    ctx.begin()?;
    let folder = read_image_folder(&input, channels)?;
    let n_classes = folder.class_names.len();
    let ds = LabeledDataset::new(folder.images, folder.labels, n_classes)?;
    ds.save(&ctx.out.join(format!("{name}.tgdd")))?;
    let listing: String = folder.class_names.iter().map(|c| format!("{c}\n")).collect();
    let path = ctx.out.join(format!("{name}.classes"));
    std::fs::write(&path, listing).map_err(io_err(&path))?;
    ctx.log(format!("converted {} images in {n_classes} classes", ds.len()));
    Ok(())
}

pub fn pretrain(mut ctx: Context, a: PretrainArgs) -> Result<()> {
    let defaults = TrajectoryTraining::default();
    let s = &mut ctx.settings;
    let data = s.path("data", a.data)?;
    let n = s.get("trajectories", a.trajectories, 5)?;
    let epochs = s.get("epochs", a.epochs, defaults.epochs)?;
    let depth = s.get("depth", a.depth, 3)?;
    let width = s.get("width", a.width, DEFAULT_WIDTH)?;
    let learning_rate = s.get("lr", a.lr, defaults.learning_rate)?;
    let momentum = s.get("momentum", a.momentum, defaults.momentum)?;
    let weight_decay = s.get("weight_decay", a.weight_decay, defaults.weight_decay)?;
    let batch_size = s.get("batch", a.batch, defaults.batch_size)?;
    let augment = s.switch("augment", a.augment, false)?;
    if n < 1 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    let dataset = LabeledDataset::load(&data)?;
    let (h, w) = dataset.image_hw();
    let net = ConvNetConfig::new(depth, dataset.num_classes(), dataset.channels(), (h, w)).with_width(width);
    net.validate()?;
    let training = TrajectoryTraining {
        epochs,
        learning_rate,
        momentum,
        weight_decay,
        batch_size,
        augment,
        seed: ctx.seed,
    };
    ctx.begin()?;
    let mut trajectories = Vec::with_capacity(n);
    for id in 0..n {
        let t = train_trajectory(&dataset, net, &training, id, |e, loss| {
            ctx.log(format!("trajectory {}/{n} epoch {e}/{epochs} loss {loss:.4}", id + 1));
        })?;
        trajectories.push(t);
    }
    let store = TrajectoryStore::new(trajectories)?;
    store.save(&ctx.out)?;
    ctx.log(format!("saved {n} trajectories to {}", ctx.out.display()));
    Ok(())
}

pub fn distill(mut ctx: Context, a: DistillArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let data = s.path("data", a.data)?;
    let store_dir = s.path("store", a.store)?;
    let ipc = s.get("ipc", a.ipc, 10)?;
    let mut c = DistillConfig::new(ipc);
    c.seed = ctx.seed;
    c.alpha = s.get("alpha", a.alpha, c.alpha)?;
    c.region_length = s.get("region", a.region, c.region_length)?;
    c.iterations = s.get("iters", a.iters, c.iterations)?;
    c.syn_lr = s.get("lr", a.lr, c.syn_lr)?;
    c.lr_override = s.optional("lr_override", a.lr_override)?;
    c.syn_momentum = s.get("momentum", a.momentum, c.syn_momentum)?;
    c.rho = s.get("rho", a.rho, c.rho)?;
    c.real_batch = s.get("real_batch", a.real_batch, c.real_batch)?;
    c.augment = s.switch("augment", a.no_augment, true)?;
    c.augment_in_sdc = s.switch("augment_in_sdc", a.plain_sdc, true)?;
    if s.switch("sdc_per_class", a.sdc_per_class, false)? {
        c.sdc_normalization = SdcNormalization::PerClassSum;
    }
    c.dm_baseline = s.switch("dm_baseline", a.dm_baseline, false)?;
    let log_every = s.get("log_every", a.log_every, 100)?.max(1);
    c.validate()?;
    let dataset = LabeledDataset::load(&data)?;
    let store = TrajectoryStore::load(&store_dir)?;
    store.check_dataset(&dataset)?;
    ctx.begin()?;
    let total = c.iterations;
    let (syn, report) = run(&dataset, &store, c, |r| {
        if (r.iteration + 1) % log_every == 0 || r.iteration + 1 == total {
            ctx.log(format!(
                "iter {}/{total} extractor {} mmd {:.5} total {:.5}",
                r.iteration + 1,
                r.extractor_epoch,
                r.l_mmd,
                r.l_total
            ));
        }
    })?;
    let extras: Vec<(String, String)> = ctx
        .settings
        .echo()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .filter(|(k, _)| *k != "out")
        .map(|(k, v)| (format!("config.{k}"), v.to_string()))
        .collect();
    syn.save(&ctx.out.join("synthetic.tgdd"), &extras)?;
    report.save_csv(&ctx.out.join("report.csv"))?;
    ctx.log(format!(
        "wrote {} synthetic slots in {:.1}s",
        syn.labels().len(),
        report.elapsed.as_secs_f64()
    ));
    Ok(())
}

fn parse_depths(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad depth `{d}` in architecture sweep")))
        })
        .collect()
}

pub fn eval(mut ctx: Context, a: EvalArgs) -> Result<()> {
    let defaults = EvalConfig::default();
    let s = &mut ctx.settings;
    let synthetic = s.optional("synthetic", a.synthetic.map(|p| p.display().to_string()))?;
    let real = s.optional("real", a.real.map(|p| p.display().to_string()))?;
    let test = s.path("test", a.test)?;
    let config = EvalConfig {
        depth: s.get("depth", a.depth, defaults.depth)?,
        width: s.get("width", a.width, defaults.width)?,
        epochs: s.get("epochs", a.epochs, defaults.epochs)?,
        learning_rate: s.get("lr", a.lr, defaults.learning_rate)?,
        momentum: s.get("momentum", a.momentum, defaults.momentum)?,
        weight_decay: s.get("weight_decay", a.weight_decay, defaults.weight_decay)?,
        batch_size: s.get("batch", a.batch, defaults.batch_size)?,
        repeats: s.get("repeats", a.repeats, defaults.repeats)?,
        augment: s.switch("augment", a.no_augment, true)?,
    };
    let sweep = s.optional("arch_sweep", a.arch_sweep)?;
    let ledger = s.optional("ledger", a.ledger.map(|p| p.display().to_string()))?;
    config.validate()?;
    let depths = match &sweep {
        Some(list) => parse_depths(list)?,
        None => vec![config.depth],
    };
    let test_set = LabeledDataset::load(&test)?;
    enum Source {
        Synthetic(SyntheticSet, String),
        Real(LabeledDataset, String),
    }
    let source = match (synthetic, real) {
        (Some(p), None) => Source::Synthetic(SyntheticSet::load(Path::new(&p))?, p),
        (None, Some(p)) => Source::Real(LabeledDataset::load(Path::new(&p))?, p),
        _ => return Err(Error::Config("give exactly one of `synthetic` or `real`".into())),
    };
    ctx.begin()?;
    let mut results: Vec<EvalResult> = Vec::new();
    for depth in depths {
        let cfg = EvalConfig { depth, ..config };
        ctx.log(format!("evaluating ConvNet-{depth} over {} seeds", cfg.repeats));
        let r = match &source {
            Source::Synthetic(syn, label) => evaluate(label, syn, &test_set, &cfg, ctx.seed)?,
            Source::Real(train, label) => {
                if train.num_classes() != test_set.num_classes()
                    || train.channels() != test_set.channels()
                    || train.image_hw() != test_set.image_hw()
                {
                    return Err(Error::Incompatible("training and test sets differ in shape".into()));
                }
                let t = test_set.renormalized(train.stats().clone())?;
                evaluate_images(label, train.normalized(), train.labels(), &t, &cfg, ctx.seed)?
            }
        };
        print!("{}", r.report());
        results.push(r);
    }
    let report: String = results.iter().map(EvalResult::report).collect();
    let path = ctx.out.join("eval_report.txt");
    std::fs::write(&path, report).map_err(io_err(&path))?;
    let ledger = ledger.map(PathBuf::from).unwrap_or_else(|| ctx.out.join("results.csv"));
    let fresh = !ledger.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger)
        .map_err(io_err(&ledger))?;
    let mut rows = String::new();
    if fresh {
        rows.push_str(CSV_HEADER);
        rows.push('\n');
    }
    for r in &results {
        rows.push_str(&r.csv_row());
        rows.push('\n');
    }
    f.write_all(rows.as_bytes()).map_err(io_err(&ledger))
}

pub fn export_grid(mut ctx: Context, a: ExportGridArgs) -> Result<()> {
    let path = ctx.settings.path("synthetic", a.synthetic)?;
    ctx.begin()?;
    let syn = SyntheticSet::load(&path)?;
    let (images, _) = decode_all(&syn)?;
    let pixels = syn.stats().denormalize(&images);
    let cols = syn.ipc() * syn.rho() * syn.rho();
    let img = montage(&pixels, cols)?;
    let out = ctx.out.join("grid.png");
    save_png(&img, &out)?;
    ctx.log(format!("wrote {}x{} montage to {}", img.width(), img.height(), out.display()));
    Ok(())
}
