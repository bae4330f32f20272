use std::fs;
use std::path::{Path, PathBuf};

use organseg::datasets::{load_dataset, read_image, write_labels, ClassRegistry};
use organseg::eval::{evaluate, Aggregation, Segmenter};
use organseg::gradcheck::{run_grad_check, GradCheckConfig, Precision};
use organseg::model::{preprocess_dataset, preprocess_image, Model};
use organseg::run::RunManifest;
use organseg::trainer::{
    check_resume, fit, load_checkpoint, synthesize, write_synthetic, Config, FitOptions, RunData, CONFIG_COPY, METRICS_FILE,
    REGISTRY_FILE,
};
use organseg::{Error, Result};

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn config_base(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn gen_data(config: &Path, out: &Path, force: bool) -> Result<()> {
    let (cfg, text) = Config::load(config)?;
    let gen = cfg.data.generate.clone().unwrap_or_default();
    if out.is_file() {
        return Err(Error::validation(format!("{} is a file, not a directory", out.display())));
    }
    if is_non_empty_dir(out) {
        if !force {
            return Err(Error::validation(format!(
                "{} exists and is not empty; pass --force to regenerate it",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut manifest = RunManifest::new("gen-data", &text, gen.seed);
    manifest.write(out)?;
    fs::write(out.join(CONFIG_COPY), &text).map_err(|e| Error::io(out, e))?;

    let data = synthesize(&gen)?;
    let layout = write_synthetic(&data, out)?;
    let section = out.join("data.toml");
    fs::write(&section, layout.data_section(out)).map_err(|e| Error::io(&section, e))?;

    let mut artifacts = vec![layout.registry.clone()];
    artifacts.extend(layout.labeled.iter().cloned());
    artifacts.extend([layout.unlabeled.clone(), layout.eval.clone(), section]);
    for d in &data.labeled {
        let classes: Vec<&str> = d
            .spec()
            .map(|s| s.annotated().iter().filter_map(|&c| data.registry.name_of(c)).collect())
            .unwrap_or_default();
        println!("labeled   {:<16} {:>4} images  classes: {}", d.descriptor.name, d.len(), classes.join(", "));
    }
    println!("unlabeled {:<16} {:>4} images", data.unlabeled.descriptor.name, data.unlabeled.len());
    println!("eval      {:<16} {:>4} images  classes: all", data.eval.descriptor.name, data.eval.len());
    manifest.finish(out, artifacts)?;
    Ok(())
}

pub fn train(config: &Path, run_dir: &Path, resume: Option<PathBuf>, allow_config_drift: bool, dump_augs: bool, quiet: bool) -> Result<()> {
    let (cfg, text) = Config::load(config)?;
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if let Some(path) = &resume {
        check_resume(path, &load_checkpoint::<f32>(path)?.meta, &text, allow_config_drift)?;
    }
    let mut manifest = RunManifest::new("train", &text, cfg.train.seed);
    manifest.write(run_dir)?;
    let data = RunData::load(&cfg, &config_base(config))?;
    let opts = FitOptions {
        resume,
        allow_config_drift,
        stop_after_epochs: None,
        dump_augs,
        verbose: !quiet,
    };
    let summary = fit(&cfg, &text, &data, run_dir, &opts)?;
    let mut artifacts = summary.checkpoints.clone();
    artifacts.extend(summary.final_checkpoint.clone());
    artifacts.push(run_dir.join(METRICS_FILE));
    println!(
        "trained {} epochs ({} steps); final checkpoint: {}",
        summary.epochs_done,
        summary.global_step,
        summary.final_checkpoint.as_deref().map_or("-".into(), |p| p.display().to_string())
    );
    manifest.finish(run_dir, artifacts)?;
    Ok(())
}

fn registry_for(manifest: &Path, explicit: Option<PathBuf>) -> Result<ClassRegistry> {
    let path = explicit.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join(REGISTRY_FILE));
    ClassRegistry::load(&path)
}

fn check_classes(model: &Model<f32>, registry: &ClassRegistry) -> Result<()> {
    if model.num_classes() != registry.num_outputs() {
        return Err(Error::validation(format!(
            "checkpoint predicts {} classes (background included) but the registry lists {} organs: {}",
            model.num_classes(),
            registry.len(),
            registry.names().join(", ")
        )));
    }
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, registry: Option<PathBuf>, agg: Aggregation, label: &str) -> Result<()> {
    let ck = load_checkpoint::<f32>(ckpt)?;
    let mut manifest = RunManifest::new("eval", &ck.config_text, ck.config.train.seed);
    manifest.write(out)?;
    fs::write(out.join(CONFIG_COPY), &ck.config_text).map_err(|e| Error::io(out, e))?;
    let registry = registry_for(data, registry)?;
    check_classes(&ck.model, &registry)?;
    let mut ds = load_dataset(data, &registry)?;
    preprocess_dataset(&mut ds, ck.model.config())?;
    let report = evaluate(&ck.model, &ds, &registry, agg, label, ck.meta.minutes_per_epoch())?;

    let csv = out.join("dice.csv");
    let table = out.join("dice.txt");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    print!("{}", report.to_table());
    manifest.finish(out, vec![csv, table])?;
    Ok(())
}

pub fn predict(ckpt: &Path, image: &Path, out: &Path, registry: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint::<f32>(ckpt)?;
    let mut manifest = RunManifest::new("predict", &ck.config_text, ck.config.train.seed);
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".run.json");
    let manifest_path = PathBuf::from(manifest_path);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    manifest.write_to(&manifest_path)?;
    if let Some(r) = registry {
        check_classes(&ck.model, &ClassRegistry::load(&r)?)?;
    }
    let mcfg = ck.model.config();
    let mut img = read_image(image)?;
    if let Some(r) = mcfg.resize_to {
        img = preprocess_image(&img, r, mcfg.input_size)?;
    }
    let labels = ck.model.segment(std::slice::from_ref(&img))?.remove(0);
    write_labels(out, &labels)?;
    manifest.finish_to(&manifest_path, vec![out.to_path_buf()])
}

pub fn grad_check(config: Option<PathBuf>, precision: Precision, out: &Path, sabotage: bool) -> Result<()> {
    let text = match &config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let cfg = GradCheckConfig::parse(&text)?;
    let mut manifest = RunManifest::new("grad-check", &text, cfg.seed);
    manifest.write(out)?;
    let report = run_grad_check(&cfg, precision, sabotage)?;
    print!("{report}");
    let path = out.join("report.txt");
    fs::write(&path, report.to_string()).map_err(|e| Error::io(&path, e))?;
    manifest.finish(out, vec![path])?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(Error::Numeric(format!("gradient check failed for {}", names.join(", "))))
    }
}
