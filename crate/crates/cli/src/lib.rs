//! Subcommands of the `voxpart` binary.
//!
//! Every command works inside a run directory (`--out`). `make-data` creates
//! it with the dataset `manifest.json` and the merged `config.txt`; later
//! commands read both and add their artifacts next to them:
//!
//! ```text
//! run/manifest.json  config.txt  objects/...
//! run/fields/<object>.vxf  <object>.loss.csv  fit.csv
//! run/model/  ae_loss.csv  train_loss.csv  snapshots/
//! run/samples/  run/interp/  run/mix/  run/metrics.csv
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxpart::autodiff::Tensor;
use voxpart::config::{RunConfig, CONFIG_ENV};
use voxpart::diffusion::schedule;
use voxpart::field::FieldBundle;
use voxpart::image::{PartMap, RgbImage};
use voxpart::metrics::{default_threshold, extract_points, mmd_cov, write_metrics_csv, MetricsRow, PointCloud};
use voxpart::seed::{derive_seed, label_hash};
use voxpart::synth::{heldout_cameras, load_manifest, make_dataset, part_names, DatasetSpec, Manifest, Split, MANIFEST_FILE};
use voxpart::trainer::{
    fit_field, heldout_psnr, initial_noise, interpolate, loss_csv_header, mix, parse_assignment, pretrain_autoencoder,
    reconstruction_psnr, sample_from_noise, sampler_seed, AePretrainConfig, FitConfig, Model, ModelConfig, TrainConfig,
    TrainObject, Trainer,
};
use voxpart::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const FIELDS_DIR: &str = "fields";
pub const MODEL_DIR: &str = "model";

#[derive(Debug, Parser)]
#[command(name = "voxpart", version, about = "Part-aware latent diffusion of neural voxel fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Config file of `key = value` lines (falls back to $VOXPART_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Override any config key, e.g. `--set fit.lr=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural training dataset.
    MakeData {
        /// Training objects (data.objects).
        #[arg(long)]
        objects: Option<usize>,
        /// Held-out test objects (data.test_objects).
        #[arg(long)]
        test_objects: Option<usize>,
        /// Training views per object (data.views).
        #[arg(long)]
        views: Option<usize>,
        /// Evaluation views per object (data.heldout_views).
        #[arg(long)]
        heldout_views: Option<usize>,
        /// Image side in pixels (data.image_size).
        #[arg(long)]
        image_size: Option<usize>,
        /// Comma-separated template names.
        #[arg(long)]
        templates: Option<String>,
    },
    /// Fit one voxel field per object.
    Fit {
        /// Optimisation steps per field (fit.iterations).
        #[arg(long)]
        iterations: Option<usize>,
        /// Grid side (field.resolution).
        #[arg(long)]
        resolution: Option<usize>,
        /// Refit objects that already have a field.
        #[arg(long)]
        force: bool,
        /// Restrict to these objects.
        #[arg(long = "only", value_name = "NAME")]
        only: Vec<String>,
    },
    /// Pretrain the autoencoder, then train denoiser and part decoder jointly.
    Train {
        /// Joint training steps (train.iterations).
        #[arg(long)]
        iterations: Option<usize>,
        /// Steps before the part decoder starts learning (train.warmup_iters).
        #[arg(long)]
        warmup_iters: Option<usize>,
        /// Autoencoder pretraining steps (ae.steps).
        #[arg(long)]
        ae_steps: Option<usize>,
    },
    /// Sample shapes and render turntables.
    Sample {
        /// Number of shapes (sample.count).
        #[arg(long)]
        count: Option<usize>,
        /// Sampler steps (diffusion.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Time schedule: uniform or quadratic (diffusion.schedule).
        #[arg(long)]
        schedule: Option<String>,
        /// Turntable views per shape.
        #[arg(long)]
        views: Option<usize>,
        /// Output directory name inside the run directory.
        #[arg(long, default_value = "samples")]
        name: String,
    },
    /// Interpolate between the initial noise of two samples.
    Interp {
        /// Sample index of the first endpoint.
        #[arg(long, default_value_t = 0)]
        a: u64,
        /// Sample index of the second endpoint.
        #[arg(long, default_value_t = 1)]
        b: u64,
        /// Frames including both endpoints (interp.frames).
        #[arg(long)]
        frames: Option<usize>,
        /// Sampler steps (diffusion.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Time schedule: uniform or quadratic (diffusion.schedule).
        #[arg(long)]
        schedule: Option<String>,
        /// Output directory name inside the run directory.
        #[arg(long, default_value = "interp")]
        name: String,
    },
    /// Compose two fields part by part.
    Mix {
        /// First source field (.vxf).
        #[arg(long)]
        a: PathBuf,
        /// Second source field (.vxf).
        #[arg(long)]
        b: PathBuf,
        /// `part=a|b|none` list; parts not listed are dropped.
        #[arg(long)]
        assign: String,
        /// Template whose part names `--assign` uses.
        #[arg(long, default_value = "stool")]
        template: String,
        /// Output directory name inside the run directory.
        #[arg(long, default_value = "mix")]
        name: String,
    },
    /// MMD and COV of generated fields against reference fields.
    Eval {
        /// Directory of generated `.vxf` files (default: run/samples).
        #[arg(long)]
        gen: Option<PathBuf>,
        /// Directory of reference `.vxf` files (default: fitted test objects,
        /// or all fitted objects when there is no test split).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Label written to metrics.csv.
        #[arg(long, default_value = "samples")]
        set_name: String,
    },
}

/// Process exit code for an error: 2 usage/config, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownStrategy { .. } => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = merged_config(&cli)?;
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        // Fails only if a pool already exists (e.g. in tests); keep that one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = &cli.global.out;
    match &cli.command {
        Command::MakeData { .. } => cmd_make_data(&cfg, out),
        Command::Fit { force, only, .. } => cmd_fit(&cfg, out, *force, only),
        Command::Train { .. } => cmd_train(&cfg, out),
        Command::Sample { name, .. } => cmd_sample(&cfg, out, name),
        Command::Interp { a, b, name, .. } => cmd_interp(&cfg, out, *a, *b, name),
        Command::Mix { a, b, assign, template, name } => cmd_mix(&cfg, out, a, b, assign, template, name),
        Command::Eval { gen, reference, set_name } => cmd_eval(&cfg, out, gen.as_deref(), reference.as_deref(), set_name),
    }
}

/// defaults < run config.txt < --config / $VOXPART_CONFIG < $VOXPART_* < flags.
fn merged_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let run_cfg = cli.global.out.join(CONFIG_FILE);
    if !matches!(cli.command, Command::MakeData { .. }) && run_cfg.is_file() {
        cfg.merge_file(&run_cfg)?;
    }
    let path = cli.global.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(p) = path {
        cfg.merge_file(&p)?;
    }
    cfg.merge_env(std::env::vars())?;
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    set("seed", cli.global.seed.map(|s| s.to_string()))?;
    set("threads", cli.global.threads.map(|s| s.to_string()))?;
    let s = |v: &Option<usize>| v.map(|x| x.to_string());
    match &cli.command {
        Command::MakeData {
            objects,
            test_objects,
            views,
            heldout_views,
            image_size,
            templates,
        } => {
            set("data.objects", s(objects))?;
            set("data.test_objects", s(test_objects))?;
            set("data.views", s(views))?;
            set("data.heldout_views", s(heldout_views))?;
            set("data.image_size", s(image_size))?;
            set("data.templates", templates.clone())?;
        }
        Command::Fit { iterations, resolution, .. } => {
            set("fit.iterations", s(iterations))?;
            set("field.resolution", s(resolution))?;
        }
        Command::Train {
            iterations,
            warmup_iters,
            ae_steps,
        } => {
            set("train.iterations", s(iterations))?;
            set("train.warmup_iters", s(warmup_iters))?;
            set("ae.steps", s(ae_steps))?;
        }
        Command::Sample {
            count, steps, schedule, views, ..
        } => {
            set("sample.count", s(count))?;
            set("diffusion.steps", s(steps))?;
            set("diffusion.schedule", schedule.clone())?;
            set("sample.views", s(views))?;
        }
        Command::Interp {
            frames, steps, schedule, ..
        } => {
            set("interp.frames", s(frames))?;
            set("diffusion.steps", s(steps))?;
            set("diffusion.schedule", schedule.clone())?;
        }
        Command::Mix { .. } | Command::Eval { .. } => {}
    }
    for pair in &cli.global.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn seed_of(cfg: &RunConfig, stream: &str) -> Result<u64> {
    Ok(derive_seed(cfg.get("seed")?, label_hash(stream)))
}

fn open_manifest(out: &Path) -> Result<Manifest> {
    let path = out.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Data(format!("{} not found; run make-data first", path.display())));
    }
    load_manifest(&path)
}

fn field_path(out: &Path, name: &str) -> PathBuf {
    out.join(FIELDS_DIR).join(format!("{name}.vxf"))
}

fn cmd_make_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = DatasetSpec {
        templates: cfg.get_list("data.templates")?,
        objects: cfg.get("data.objects")?,
        test_objects: cfg.get("data.test_objects")?,
        views: cfg.get("data.views")?,
        heldout_views: cfg.get("data.heldout_views")?,
        image_size: cfg.get("data.image_size")?,
        seed: cfg.get("seed")?,
    };
    create_dir(out)?;
    let manifest = make_dataset(&spec, out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    println!("{}", out.join(MANIFEST_FILE).display());
    eprintln!("{} objects, {} views each", manifest.objects.len(), spec.views);
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, out: &Path, force: bool, only: &[String]) -> Result<()> {
    let manifest = open_manifest(out)?;
    let fit_cfg = FitConfig::from_config(cfg)?;
    for name in only {
        manifest.find(name)?;
    }
    let dir = out.join(FIELDS_DIR);
    create_dir(&dir)?;
    let mut table = String::from("object,split,heldout_psnr_db,final_loss\n");
    println!("{:<12} {:<6} {:>10} {:>12}", "object", "split", "psnr_db", "final_loss");
    for (i, obj) in manifest.objects.iter().enumerate() {
        if !only.is_empty() && !only.contains(&obj.name) {
            continue;
        }
        let path = field_path(out, &obj.name);
        let heldout = manifest.load_views(i, true)?;
        let split = match obj.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let (psnr, loss) = if path.is_file() && !force {
            let field = FieldBundle::load_vxf(&path)?;
            (heldout_psnr(&field, &heldout, &fit_cfg)?.db(), "skipped".to_string())
        } else {
            let views = manifest.load_views(i, false)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.get("seed")?, label_hash(&obj.name)));
            let (field, report) = fit_field(&views, Some(&heldout), &fit_cfg, &mut rng)
                .map_err(|e| prefix_error(e, &format!("object {}", obj.name)))?;
            field.save_vxf(&path)?;
            let mut csv = String::from("step,loss\n");
            for (s, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{s},{l:.9e}\n"));
            }
            write_file(&dir.join(format!("{}.loss.csv", obj.name)), csv.as_bytes())?;
            let psnr = report.heldout_psnr.map(|p| p.db()).unwrap_or(f64::NAN);
            (psnr, format!("{:.6e}", report.losses.last().copied().unwrap_or(f64::NAN)))
        };
        println!("{:<12} {:<6} {:>10.2} {:>12}", obj.name, split, psnr, loss);
        table.push_str(&format!("{},{split},{psnr:.4},{loss}\n", obj.name));
    }
    write_file(&dir.join("fit.csv"), table.as_bytes())
}

fn prefix_error(e: Error, what: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        other => other,
    }
}

/// Fitted fields of the given split, with their manifest indices.
fn load_fields(out: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(usize, FieldBundle)>> {
    manifest
        .split(split)
        .map(|(i, obj)| {
            let path = field_path(out, &obj.name);
            if !path.is_file() {
                return Err(Error::Data(format!("missing field {}; run fit first", path.display())));
            }
            Ok((i, FieldBundle::load_vxf(&path)?))
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = open_manifest(out)?;
    let fields = load_fields(out, &manifest, Split::Train)?;
    if fields.is_empty() {
        return Err(Error::Data("no training objects".into()));
    }
    let mut mcfg = ModelConfig::from_config(cfg)?;
    // The fitted fields fix the model resolution.
    mcfg.resolution = fields[0].1.dims()[0];
    if fields.iter().any(|(_, f)| f.dims() != mcfg.field_dims()) {
        return Err(Error::Data("fitted fields have different extents".into()));
    }
    mcfg.validate()?;
    let tcfg = TrainConfig::from_config(cfg)?;
    let acfg = AePretrainConfig::from_config(cfg)?;
    let mut model = Model::new(mcfg, &mut ChaCha8Rng::seed_from_u64(seed_of(cfg, "model")?))?;

    let grids: Vec<Tensor> = fields.iter().map(|(_, f)| f.grid()).collect();
    let mut ae_csv = String::from("step,recon_loss,kl_loss\n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(cfg, "ae")?);
    let report_every = (acfg.steps / 10).max(1);
    pretrain_autoencoder(&mut model.ae, &grids, &acfg, &mut rng, |s, l| {
        ae_csv.push_str(&format!("{s},{:.9e},{:.9e}\n", l.recon, l.kl));
        if (s + 1) % report_every == 0 {
            eprintln!("ae step {:>6}  recon {:.4e}  kl {:.4e}", s + 1, l.recon, l.kl);
        }
    })?;
    write_file(&out.join("ae_loss.csv"), ae_csv.as_bytes())?;
    for ((i, _), g) in fields.iter().zip(&grids) {
        eprintln!("ae reconstruction {}: {:.2} dB", manifest.objects[*i].name, reconstruction_psnr(&model.ae, g)?);
    }

    let objects = fields
        .iter()
        .map(|(i, f)| TrainObject::new(&model, &manifest.objects[*i].name, f, manifest.load_views(*i, false)?, None))
        .collect::<Result<Vec<_>>>()?;
    let checkpoint_every: usize = cfg.get("train.checkpoint_every")?;
    let snapshot_every: usize = cfg.get("train.snapshot_every")?;
    let samples: usize = cfg.get("render.samples")?;
    let mut trainer = Trainer::new(model, objects, tcfg)?;
    let model_dir = out.join(MODEL_DIR);
    let loss_path = out.join("train_loss.csv");
    let mut log = fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let mut line = |s: &str| writeln!(log, "{s}").map_err(|e| Error::io(&loss_path, e));
    line(loss_csv_header())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(cfg, "train")?);
    let iterations = trainer.cfg.iterations;
    let report_every = (iterations / 20).max(1);
    for step in 0..iterations {
        let r = trainer.train_step(&mut rng).map_err(|e| prefix_error(e, &format!("train step {step}")))?;
        line(&r.csv_row())?;
        if (step + 1) % report_every == 0 {
            eprintln!(
                "step {:>6}  diff {:.4e}  rend {:.4e}  total {:.4e}",
                step + 1,
                r.diff,
                r.rend,
                r.total
            );
        }
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 && step + 1 < iterations {
            trainer.model.save(&model_dir)?;
        }
        if snapshot_every > 0 && (step + 1) % snapshot_every == 0 {
            snapshot(&trainer, out, step + 1, samples)?;
        }
    }
    trainer.model.save(&model_dir)?;
    println!("{}", model_dir.display());
    Ok(())
}

/// Renders the first view of the first object through the reconstruction path.
fn snapshot(trainer: &Trainer, out: &Path, step: usize, samples: usize) -> Result<()> {
    let dir = out.join("snapshots");
    create_dir(&dir)?;
    let obj = &trainer.objects[0];
    let field_hat = trainer.model.ae.decode_tensor(&obj.latent)?;
    let (img, parts) = trainer.model.render_view(&field_hat, &obj.views.cameras[0], samples)?;
    save_view(&dir, &format!("step_{step:06}"), &img, &parts)
}

fn save_view(dir: &Path, stem: &str, img: &RgbImage, parts: &PartMap) -> Result<()> {
    img.save(&dir.join(format!("{stem}.ppm")))?;
    parts.save(&dir.join(format!("{stem}_part.pgm")))
}

fn load_model(out: &Path) -> Result<Model> {
    let dir = out.join(MODEL_DIR);
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} not found; run train first", dir.display())));
    }
    Model::load(&dir)
}

fn sampler_times(cfg: &RunConfig) -> Result<Vec<f64>> {
    schedule(cfg.raw("diffusion.schedule")?, cfg.get("diffusion.steps")?)
}

/// Saves `field` and renders it from `views` turntable cameras.
fn save_shape(model: &Model, field: &FieldBundle, dir: &Path, stem: &str, views: usize, cfg: &RunConfig) -> Result<()> {
    field.save_vxf(&dir.join(format!("{stem}.vxf")))?;
    let size: usize = cfg.get("data.image_size")?;
    let samples: usize = cfg.get("render.samples")?;
    let grid = field.grid();
    for (v, cam) in heldout_cameras(views, size).iter().enumerate() {
        let (img, parts) = model.render_view(&grid, cam, samples)?;
        save_view(dir, &format!("{stem}_view_{v:02}"), &img, &parts)?;
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, out: &Path, name: &str) -> Result<()> {
    let model = load_model(out)?;
    let times = sampler_times(cfg)?;
    let count: usize = cfg.get("sample.count")?;
    let views: usize = cfg.get("sample.views")?;
    let seed: u64 = cfg.get("seed")?;
    let dir = out.join(name);
    create_dir(&dir)?;
    for i in 0..count {
        let field = sample_from_noise(&model, initial_noise(&model, seed, i as u64), &times, None, sampler_seed(seed))?;
        save_shape(&model, &field, &dir, &format!("sample_{i:03}"), views, cfg)?;
        eprintln!("sample {}/{count}", i + 1);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_interp(cfg: &RunConfig, out: &Path, a: u64, b: u64, name: &str) -> Result<()> {
    let model = load_model(out)?;
    let times = sampler_times(cfg)?;
    let frames: usize = cfg.get("interp.frames")?;
    if frames < 2 {
        return Err(Error::Config("interp.frames must be at least 2".into()));
    }
    let views: usize = cfg.get("sample.views")?;
    let seed: u64 = cfg.get("seed")?;
    let s: Vec<f64> = (0..frames).map(|i| i as f64 / (frames - 1) as f64).collect();
    let (ea, eb) = (initial_noise(&model, seed, a), initial_noise(&model, seed, b));
    let fields = interpolate(&model, &ea, &eb, &s, &times, None, sampler_seed(seed))?;
    let dir = out.join(name);
    create_dir(&dir)?;
    for (i, f) in fields.iter().enumerate() {
        save_shape(&model, f, &dir, &format!("frame_{i:02}"), views, cfg)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_mix(cfg: &RunConfig, out: &Path, a: &Path, b: &Path, assign: &str, template: &str, name: &str) -> Result<()> {
    let model = load_model(out)?;
    let names = part_names(template)?;
    if names.len() != model.cfg.parts {
        return Err(Error::Config(format!(
            "template {template} has {} parts, the model has {}",
            names.len(),
            model.cfg.parts
        )));
    }
    let assignment = parse_assignment(assign, &names)?;
    let (fa, fb) = (FieldBundle::load_vxf(a)?, FieldBundle::load_vxf(b)?);
    let mixed = mix(&model, &fa, &fb, &assignment)?;
    let dir = out.join(name);
    create_dir(&dir)?;
    save_shape(&model, &mixed, &dir, "mixed", cfg.get("sample.views")?, cfg)?;
    println!("{}", dir.join("mixed.vxf").display());
    Ok(())
}

fn vxf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vxf"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .vxf files in {}", dir.display())));
    }
    Ok(files)
}

fn point_clouds(fields: &[(String, FieldBundle)], shift: f64, n: usize, seed: u64) -> Result<Vec<PointCloud>> {
    fields
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            extract_points(f, shift, default_threshold(f), n, &mut rng).map_err(|e| prefix_error(e, name))
        })
        .collect()
}

fn load_dir(dir: &Path) -> Result<Vec<(String, FieldBundle)>> {
    vxf_files(dir)?
        .iter()
        .map(|p| Ok((p.display().to_string(), FieldBundle::load_vxf(p)?)))
        .collect()
}

fn cmd_eval(cfg: &RunConfig, out: &Path, gen: Option<&Path>, reference: Option<&Path>, set_name: &str) -> Result<()> {
    let gen_dir = gen.map(Path::to_path_buf).unwrap_or_else(|| out.join("samples"));
    let gen = load_dir(&gen_dir)?;
    let reference = match reference {
        Some(dir) => load_dir(dir)?,
        None => {
            let manifest = open_manifest(out)?;
            let mut r = load_fields(out, &manifest, Split::Test)?;
            if r.is_empty() {
                eprintln!("no test objects; using the training fields as reference");
                r = load_fields(out, &manifest, Split::Train)?;
            }
            r.into_iter().map(|(i, f)| (manifest.objects[i].name.clone(), f)).collect()
        }
    };
    let shift: f64 = cfg.get("field.b_shift")?;
    let n: usize = cfg.get("metrics.points")?;
    let seed = seed_of(cfg, "eval")?;
    // One stream per list position, so identical field lists give identical clouds.
    let g = point_clouds(&gen, shift, n, seed)?;
    let r = point_clouds(&reference, shift, n, seed)?;
    let scores = mmd_cov(&g, &r)?;
    let row = MetricsRow {
        set_name: set_name.to_string(),
        scores,
        n_gen: g.len(),
        n_ref: r.len(),
    };
    let path = out.join("metrics.csv");
    write_metrics_csv(&path, &[row])?;
    println!("set {set_name}: mmd x100 = {:.4}, cov x100 = {:.1}", 100.0 * scores.mmd, 100.0 * scores.cov);
    Ok(())
}
