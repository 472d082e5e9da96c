//! Implementations behind each subcommand. Each returns the stdout summary.

use std::fs;
use std::path::{Path, PathBuf};

use curio::config::KvFile;
use curio::eval::{novel_view_eval, ratio_report, EvalReport, MetricWeights};
use curio::image::load_png;
use curio::nn::NetworkConfig;
use curio::oracle::{optimize_joint, OracleConfig};
use curio::train::{checkpoint, TrainConfig, TrainMode, Trainer};
use curio::worlds::{generate_dataset, load_dataset, save_dataset, Dataset};
use curio::{Error, Image, Result, SceneCode, WorldSpec};

const RESOLVED: &str = "config.resolved.txt";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "na".into())
}

fn world_arg(world: &str, image_size: usize) -> Result<WorldSpec> {
    let path = Path::new(world);
    if path.is_file() {
        let kv = KvFile::load(path)?;
        if !kv.has_section("world") {
            return Err(Error::InvalidConfig(format!("{world} has no [world] section")));
        }
        let w = WorldSpec::from_kv(&kv, "world")?;
        w.validate()?;
        Ok(w)
    } else {
        WorldSpec::preset(world, image_size)
    }
}

pub fn gen(world: &str, n: usize, seed: u64, out: &Path, image_size: usize) -> Result<String> {
    let w = world_arg(world, image_size)?;
    if n < 4 {
        return Err(Error::InvalidConfig(format!("--n {n} is too small for a train/val/test split")));
    }
    let d = generate_dataset(&w, n, seed)?;
    save_dataset(&d, out)?;
    eprintln!("wrote {} images of world {} to {}", n, w.name, out.display());
    Ok(format!(
        "world={} n={} train={} val={} test={} seed={} out={}",
        w.name,
        n,
        d.split.train.len(),
        d.split.val.len(),
        d.split.test.len(),
        seed,
        out.display()
    ))
}

/// `[network]` overrides on top of the defaults for `world`.
fn network_config(world: &WorldSpec, kv: &KvFile) -> Result<NetworkConfig> {
    const KEYS: [&str; 4] = ["width_scale", "latent_dim", "n_proposals", "heads"];
    kv.check_keys("network", &KEYS)?;
    let mut n = NetworkConfig::for_world(world, kv.parse_opt("network", "width_scale")?.unwrap_or(0.5));
    if let Some(v) = kv.parse_opt("network", "latent_dim")? {
        n.latent_dim = v;
    }
    if let Some(v) = kv.parse_opt("network", "n_proposals")? {
        n.n_proposals = v;
    }
    if let Some(h) = kv.get("network", "heads") {
        n.heads = curio::GroupSet::parse_list(h)?;
    }
    n.validate()?;
    Ok(n)
}

fn metric_weights(kv: &KvFile) -> Result<MetricWeights> {
    const KEYS: [&str; 5] = ["position", "color", "rotation", "confidence", "light"];
    kv.check_keys("eval", &KEYS)?;
    let mut w = MetricWeights::default();
    for (k, slot) in KEYS.iter().zip([
        &mut w.position,
        &mut w.color,
        &mut w.rotation,
        &mut w.confidence,
        &mut w.light,
    ]) {
        if let Some(v) = kv.parse_opt("eval", k)? {
            *slot = v;
        }
    }
    w.validate()?;
    Ok(w)
}

fn weights_to_kv(w: &MetricWeights, kv: &mut KvFile) {
    for (k, v) in [
        ("position", w.position),
        ("color", w.color),
        ("rotation", w.rotation),
        ("confidence", w.confidence),
        ("light", w.light),
    ] {
        kv.set("eval", k, format!("{v:?}"));
    }
}

/// Relative paths in a config are resolved against the config's directory.
fn config_path(config: &Path, kv: &KvFile, key: &str) -> Result<PathBuf> {
    let p = PathBuf::from(kv.require::<String>("paths", key)?);
    Ok(if p.is_absolute() {
        p
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    })
}

fn load_for_training(dir: &Path) -> Result<Dataset> {
    let with_labels = dir.join("labels.jsonl").is_file();
    load_dataset(dir, with_labels)
}

pub fn train(config: &Path, mode: Option<&str>, frac: Option<f64>, resume: Option<&Path>) -> Result<String> {
    let kv = KvFile::load(config)?;
    kv.check_keys("", &["seed"])?;
    kv.check_keys("paths", &["dataset", "out"])?;
    let seed: u64 = kv.require("", "seed")?;
    let data_dir = config_path(config, &kv, "dataset")?;
    let out = config_path(config, &kv, "out")?;
    let dataset = load_for_training(&data_dir)?;
    if kv.has_section("world") {
        let w = WorldSpec::from_kv(&kv, "world")?;
        if w != dataset.world {
            return Err(Error::InvalidConfig(format!(
                "[world] in the config differs from the world of dataset {}",
                data_dir.display()
            )));
        }
    }
    let mut cfg = TrainConfig::from_kv(&kv, "train")?;
    if kv.get("train", "seed").is_some_and(|s| s.parse::<u64>().ok() != Some(seed)) {
        return Err(Error::InvalidConfig("[train] seed disagrees with the top-level seed".into()));
    }
    cfg.seed = seed;
    if let Some(m) = mode {
        cfg.mode = TrainMode::parse(m)?;
    }
    if let Some(f) = frac {
        cfg.supervision_frac = f;
    }
    cfg.validate()?;
    let weights = metric_weights(&kv)?;

    let mut trainer = match resume {
        Some(ck) => {
            let mut t = checkpoint::load(ck)?;
            if t.world != dataset.world {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint {} was trained on a different world",
                    ck.display()
                )));
            }
            if t.cfg.mode != cfg.mode {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint mode {} differs from requested mode {}",
                    t.cfg.mode, cfg.mode
                )));
            }
            t.cfg.max_epochs = cfg.max_epochs;
            t.cfg.max_steps = cfg.max_steps;
            eprintln!("resuming {} at epoch {} step {}", ck.display(), t.epoch, t.step);
            t
        }
        None => {
            let net = network_config(&dataset.world, &kv)?;
            Trainer::new(&dataset.world, &net, &cfg)?
        }
    };

    mkdir(&out)?;
    let mut resolved = KvFile::new();
    resolved.set("", "seed", seed);
    resolved.set("paths", "dataset", data_dir.display());
    resolved.set("paths", "out", out.display());
    if let Some(ck) = resume {
        resolved.set("paths", "resume", ck.display());
    }
    trainer.world.to_kv(&mut resolved, "world");
    trainer.net.to_kv(&mut resolved, "network");
    trainer.cfg.to_kv(&mut resolved, "train");
    weights_to_kv(&weights, &mut resolved);
    write(&out.join(RESOLVED), resolved.to_text())?;

    let labels = dataset.visible_label_count().gt(&0).then_some(&dataset);
    let outcome = trainer.run_with(&dataset, labels, Some(&out), &mut |row| {
        eprintln!(
            "epoch {:>4} {:<5} image_mse {} d_loss {} g_loss {} eq1 {}",
            row.epoch,
            row.split,
            fmt_opt(row.image_mse),
            fmt_opt(row.d_loss),
            fmt_opt(row.g_loss),
            fmt_opt(row.eq1_error)
        )
    })?;
    Ok(format!(
        "mode={} epochs={} steps={} final_val_mse={} converged={} checkpoint={}",
        trainer.cfg.mode,
        trainer.epoch,
        trainer.step,
        fmt_opt(Some(outcome.final_val_mse)),
        outcome.converged,
        out.join("final.ckpt").display()
    ))
}

pub fn eval(
    ckpt: &Path,
    data_dir: &Path,
    reference: Option<&Path>,
    out: Option<&Path>,
    config: Option<&Path>,
) -> Result<String> {
    let (mut generator, world) = checkpoint::load_generator(ckpt)?;
    let dataset = load_dataset(data_dir, true)?;
    if world != dataset.world {
        return Err(Error::InvalidConfig(format!(
            "checkpoint world {} does not match dataset world {}",
            world.name, dataset.world.name
        )));
    }
    let weights = match config {
        Some(c) => metric_weights(&KvFile::load(c)?)?,
        None => MetricWeights::default(),
    };
    let report = novel_view_eval(&mut generator, &dataset, &weights)?;
    let ratios = match reference {
        Some(r) => {
            let text = fs::read_to_string(r).map_err(|e| Error::io(r, e))?;
            let reference = EvalReport::from_json(&text)?;
            if reference.world != report.world {
                return Err(Error::InvalidConfig(format!(
                    "reference report is for world {}, not {}",
                    reference.world, report.world
                )));
            }
            Some(ratio_report(&report, &reference))
        }
        None => None,
    };
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    mkdir(&out)?;
    let table = report.table(ratios.as_ref());
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("report.txt"), &table)?;
    if let Some(r) = &ratios {
        let json = serde_json::to_string_pretty(r).expect("metrics always serialize");
        write(&out.join("ratios.json"), json)?;
    }
    let mut resolved = KvFile::new();
    resolved.set("paths", "checkpoint", ckpt.display());
    resolved.set("paths", "dataset", data_dir.display());
    if let Some(r) = reference {
        resolved.set("paths", "reference_report", r.display());
    }
    weights_to_kv(&weights, &mut resolved);
    write(&out.join("eval.resolved.txt"), resolved.to_text())?;
    eprint!("{table}");
    let a = &report.aggregate;
    let mut line = format!(
        "world={} scenes={} param={} dssim={}",
        report.world,
        report.scenes.len(),
        fmt_opt(a.param),
        fmt_opt(a.dssim)
    );
    if let Some(r) = &ratios {
        line.push_str(&format!(" param_ratio={} dssim_ratio={}", fmt_opt(r.param), fmt_opt(r.dssim)));
    }
    line.push_str(&format!(" report={}", out.join("report.json").display()));
    Ok(line)
}

pub fn oracle(n_problems: usize, steps: usize, curiosity: bool, seed: u64, out: &Path) -> Result<String> {
    let cfg = OracleConfig {
        n_problems,
        steps,
        use_curiosity: curiosity,
        seed,
        ..OracleConfig::default()
    };
    cfg.validate()?;
    let run = optimize_joint(&cfg)?;
    mkdir(out)?;
    run.write(out)?;
    let mut kv = KvFile::new();
    cfg.to_kv(&mut kv, "oracle");
    write(&out.join(RESOLVED), kv.to_text())?;
    let o = run.outcome();
    eprintln!(
        "mean |t error| {:.4}, mean |l error| {:.4}",
        o.mean_abs_t_error, o.mean_abs_l_error
    );
    Ok(format!(
        "curiosity={} problems={} steps={} collapse_fraction={:.4} success_fraction={:.4} out={}",
        if curiosity { "on" } else { "off" },
        n_problems,
        steps,
        o.collapse_fraction,
        o.success_fraction,
        out.display()
    ))
}

pub struct RenderArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub image: Option<&'a Path>,
    pub scene_json: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub world: Option<&'a str>,
    pub image_size: usize,
    pub out: &'a Path,
}

fn dataset_world(dir: &Path) -> Result<WorldSpec> {
    WorldSpec::from_kv(&KvFile::load(&dir.join("meta.txt"))?, "world")
}

pub fn render(a: RenderArgs) -> Result<String> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let picture = match (a.image, a.scene_json) {
        (Some(img_path), None) => {
            let ckpt = a
                .checkpoint
                .ok_or_else(|| Error::InvalidConfig("--image needs --checkpoint".into()))?;
            let (mut g, world) = checkpoint::load_generator(ckpt)?;
            let input = load_png(img_path)?;
            let code = g.encode(&[&input])?.remove(0);
            eprintln!("{}", code.to_json());
            Image::hstack(&[&input, &world.render(&code)?])
        }
        (None, Some(json_path)) => {
            let world = match (a.checkpoint, a.dataset, a.world) {
                (Some(c), _, _) => checkpoint::load_generator(c)?.1,
                (None, Some(d), _) => dataset_world(d)?,
                (None, None, Some(w)) => WorldSpec::preset(w, a.image_size)?,
                (None, None, None) => {
                    return Err(Error::InvalidConfig(
                        "--scene-json needs --checkpoint, --dataset or --world".into(),
                    ))
                }
            };
            let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
            let scene = SceneCode::from_json(text.trim()).map_err(|e| match e {
                Error::Format { msg, .. } => Error::format(json_path.display().to_string(), 0, msg),
                other => other,
            })?;
            world.render(&scene)?
        }
        _ => return Err(Error::InvalidConfig("give exactly one of --image or --scene-json".into())),
    };
    picture.save_png(a.out)?;
    Ok(format!(
        "out={} width={} height={}",
        a.out.display(),
        picture.width(),
        picture.height()
    ))
}
