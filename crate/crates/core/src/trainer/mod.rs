//! Training: the labeled stream under the target adaptive loss, plus the
//! weak view, two strong views and the feature-perturbed view of unlabeled
//! images, combined into one loss and one RMSprop update per step.

mod checkpoint;
mod config;
mod generate;
mod optim;
mod plan;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{config_hash, resolve, Config, Cycle, DataConfig, GenerateConfig, SemiConfig, TrainConfig};
pub use generate::{synthesize, write_synthetic, Synthetic, SyntheticLayout, EVAL_NAME, REGISTRY_FILE, UNLABELED_NAME};
pub use optim::{lr_at, RmsProp};
pub use plan::{default_steps_per_epoch, plan_epoch, BatchPlan, PlannedStep};

use crate::augment::{
    apply_strong_batch, apply_weak_image, apply_weak_labels, sample_strong, sample_weak, transport_batch, RngStream, StrongTransform,
    WeakTransform,
};
use crate::datasets::{load_dataset, ClassRegistry, Dataset, DatasetKind, Image, LabelMap, PartialLabelSpec};
use crate::error::{Error, Result};
use crate::losses::{
    kept_fraction, make_pseudo_labels, tal_loss_with_grad, unsup_stream_loss_with_grad, LossReport, PseudoLabel,
    METRICS_HEADER, W_FP, W_S1, W_S2, W_SUP, W_UNSUP,
};
use crate::model::{images_to_tensor, preprocess_dataset, preprocess_image, FeatureMask, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const AUGS_FILE: &str = "augs.jsonl";
pub const CONFIG_COPY: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Datasets a run trains on, loaded and resized to the network input.
#[derive(Clone, Debug)]
pub struct RunData {
    pub registry: ClassRegistry,
    pub labeled: Vec<Dataset>,
    pub unlabeled: Vec<Image>,
}

impl RunData {
    pub fn new(registry: ClassRegistry, labeled: Vec<Dataset>, unlabeled: Vec<Image>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::validation("no labeled dataset configured"));
        }
        for ds in &labeled {
            if ds.descriptor.kind != DatasetKind::Labeled || ds.labels.is_none() {
                return Err(Error::validation(format!("dataset {:?} is not labeled", ds.descriptor.name)));
            }
            if ds.is_empty() {
                return Err(Error::validation(format!("labeled dataset {:?} is empty", ds.descriptor.name)));
            }
        }
        Ok(RunData {
            registry,
            labeled,
            unlabeled,
        })
    }

    /// Loads every manifest named by `cfg.data`, resolving paths against
    /// `base` (the config file's directory).
    pub fn load(cfg: &Config, base: &Path) -> Result<Self> {
        let registry = ClassRegistry::load(&resolve(base, &cfg.data.registry))?;
        let labeled = cfg
            .data
            .labeled
            .iter()
            .map(|p| load_dataset(&resolve(base, p), &registry))
            .collect::<Result<Vec<_>>>()?;
        let mut unlabeled = Vec::new();
        for p in &cfg.data.unlabeled {
            let ds = load_dataset(&resolve(base, p), &registry)?;
            if ds.descriptor.kind != DatasetKind::Unlabeled {
                return Err(Error::validation(format!("{} is not an unlabeled manifest", p.display())));
            }
            if ds.is_empty() {
                return Err(Error::validation(format!("unlabeled dataset {:?} is empty", ds.descriptor.name)));
            }
            unlabeled.extend(ds.images);
        }
        let data = RunData::new(registry, labeled, unlabeled)?;
        data.prepared(cfg)
    }

    /// Applies the model's resize/crop pre-processing and checks sizes and
    /// class counts against the model config.
    pub fn prepared(mut self, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        if self.registry.num_outputs() != m.num_classes {
            return Err(Error::validation(format!(
                "registry has {} classes plus background but model.num_classes = {}",
                self.registry.len(),
                m.num_classes
            )));
        }
        for ds in &mut self.labeled {
            preprocess_dataset(ds, m)?;
        }
        if let Some(r) = m.resize_to {
            for img in &mut self.unlabeled {
                *img = preprocess_image(img, r, m.input_size)?;
            }
        }
        let s = m.input_size;
        let all = self.labeled.iter().flat_map(|d| d.images.iter()).chain(&self.unlabeled);
        for img in all {
            if img.height() != s || img.width() != s {
                return Err(Error::shape(format!(
                    "image is {}x{} but model.input_size = {s} (set model.resize_to to rescale)",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(self)
    }
}

/// Inputs of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub spec: PartialLabelSpec,
    pub unlabeled: Vec<Image>,
}

impl StepBatch {
    fn from_plan(data: &RunData, step: &PlannedStep) -> Self {
        let ds = &data.labeled[step.dataset];
        let labels = ds.labels.as_ref().expect("checked labeled");
        StepBatch {
            images: step.labeled.iter().map(|&i| ds.images[i].clone()).collect(),
            labels: step.labeled.iter().map(|&i| labels[i].clone()).collect(),
            spec: ds.spec().expect("labeled datasets carry a spec").clone(),
            unlabeled: step.unlabeled.iter().map(|&i| data.unlabeled[i].clone()).collect(),
        }
    }
}

/// Disturbance records of one step, replayable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugRecords {
    /// Transforms of the labeled images; empty when labeled augmentation
    /// is off.
    pub labeled: Vec<WeakTransform>,
    pub weak: Vec<WeakTransform>,
    pub strong1: Vec<StrongTransform>,
    pub strong2: Vec<StrongTransform>,
}

/// The unlabeled views of one step and the detached pseudo-labels that
/// supervise them.
pub struct UnlabeledViews<T> {
    pub weak: Tensor<T>,
    pub strong1: Tensor<T>,
    pub strong2: Tensor<T>,
    pub pseudo: Vec<PseudoLabel>,
    pub pseudo1: Vec<PseudoLabel>,
    pub pseudo2: Vec<PseudoLabel>,
    pub mask: Option<FeatureMask<T>>,
    pub records: AugRecords,
}

/// Builds the weak view, runs the (gradient-free) pseudo-label pass, then
/// draws two independent strong views of the weak view and the feature
/// dropout mask.
pub fn prepare_views<T: Scalar>(model: &Model<T>, unlabeled: &[Image], semi: &SemiConfig, rng: &mut RngStream) -> Result<UnlabeledViews<T>> {
    let side = model.config().input_size;
    let weak_t: Vec<WeakTransform> = unlabeled.iter().map(|_| sample_weak(rng)).collect();
    let weak_imgs: Vec<Image> = weak_t.iter().zip(unlabeled).map(|(t, im)| apply_weak_image(t, im)).collect();
    let weak = images_to_tensor::<T>(&weak_imgs, side)?;
    let (p_weak, _) = model.forward(&weak)?;
    let pseudo = make_pseudo_labels(&p_weak, semi.tau)?;

    let strong_cfg = semi.strong();
    let n = unlabeled.len();
    let s1_t = sample_strong(rng, n, side, side, &strong_cfg);
    let s2_t = sample_strong(rng, n, side, side, &strong_cfg);
    let strong1 = images_to_tensor::<T>(&apply_strong_batch(&s1_t, &weak_imgs)?, side)?;
    let strong2 = images_to_tensor::<T>(&apply_strong_batch(&s2_t, &weak_imgs)?, side)?;
    let pseudo1 = transport_batch(&pseudo, &s1_t)?;
    let pseudo2 = transport_batch(&pseudo, &s2_t)?;
    let mask = (model.config().feature_dropout > 0.0).then(|| FeatureMask::sample(rng, n, model.config()));
    Ok(UnlabeledViews {
        weak,
        strong1,
        strong2,
        pseudo,
        pseudo1,
        pseudo2,
        mask,
        records: AugRecords {
            labeled: Vec::new(),
            weak: weak_t,
            strong1: s1_t,
            strong2: s2_t,
        },
    })
}

/// Knobs for gradient verification.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Negates the supervised-loss gradient. Exists only so the gradient
    /// checker can prove it catches a wrong gradient.
    #[doc(hidden)]
    pub sabotage_tal: bool,
}

fn scaled<T: Scalar>(mut g: Tensor<T>, w: f64) -> Tensor<T> {
    let w = T::of(w);
    for v in g.data_mut() {
        *v *= w;
    }
    g
}

/// Computes every loss stream and, when `grads` is given, accumulates the
/// gradient of the total loss into it. Pseudo-labels in `views` are fixed
/// inputs here, so no gradient flows through them.
pub fn compute_step<T: Scalar>(
    model: &Model<T>,
    labeled: &Tensor<T>,
    labels: &[LabelMap],
    spec: &PartialLabelSpec,
    views: Option<&UnlabeledViews<T>>,
    mut grads: Option<&mut [T]>,
    opts: GradOptions,
) -> Result<LossReport> {
    let cache = model.forward_cached(labeled, None)?;
    let (l_sup, g) = tal_loss_with_grad(cache.prediction(), labels, spec)?;
    if let Some(gr) = grads.as_deref_mut() {
        let w = if opts.sabotage_tal { -W_SUP } else { W_SUP };
        model.backward(&cache, &scaled(g, w), gr);
    }
    drop(cache);

    let Some(v) = views else {
        return LossReport::from_streams(l_sup.as_f64(), 0.0, 0.0, 0.0, [0.0; 3]);
    };
    let mut stream = |x: &Tensor<T>, mask: Option<FeatureMask<T>>, ys: &[PseudoLabel], weight: f64| -> Result<f64> {
        let cache = model.forward_cached(x, mask)?;
        let (l, g) = unsup_stream_loss_with_grad(cache.prediction(), ys)?;
        if let Some(gr) = grads.as_deref_mut() {
            model.backward(&cache, &scaled(g, weight), gr);
        }
        Ok(l.as_f64())
    };
    let l_s1 = stream(&v.strong1, None, &v.pseudo1, W_UNSUP * W_S1)?;
    let l_s2 = stream(&v.strong2, None, &v.pseudo2, W_UNSUP * W_S2)?;
    let l_fp = stream(&v.weak, v.mask.clone(), &v.pseudo, W_UNSUP * W_FP)?;
    LossReport::from_streams(
        l_sup.as_f64(),
        l_s1,
        l_s2,
        l_fp,
        [kept_fraction(&v.pseudo1), kept_fraction(&v.pseudo2), kept_fraction(&v.pseudo)],
    )
}

pub struct StepOutcome {
    pub report: LossReport,
    pub records: Option<AugRecords>,
}

fn image_stats(images: &[Image]) -> String {
    let vals = images.iter().flat_map(|i| i.pixels().iter().copied());
    let (mut lo, mut hi, mut sum, mut n) = (f32::INFINITY, f32::NEG_INFINITY, 0f64, 0usize);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
        n += 1;
    }
    format!("n={} min={lo} max={hi} mean={}", images.len(), if n > 0 { sum / n as f64 } else { 0.0 })
}

/// One training step: supervised stream, unlabeled streams (when
/// `semi.enabled` and the batch has unlabeled images), loss combination and
/// one optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut RmsProp<T>,
    lr: f64,
    batch: &StepBatch,
    cfg: &Config,
    step: usize,
    rng: &mut RngStream,
) -> Result<StepOutcome> {
    let side = model.config().input_size;
    let semi = &cfg.semi;
    let (labeled, labels, labeled_t) = if cfg.train.augment_labeled {
        let ts: Vec<WeakTransform> = batch.images.iter().map(|_| sample_weak(rng)).collect();
        let imgs: Vec<Image> = ts.iter().zip(&batch.images).map(|(t, i)| apply_weak_image(t, i)).collect();
        let labs = ts.iter().zip(&batch.labels).map(|(t, l)| apply_weak_labels(t, l)).collect();
        (images_to_tensor::<T>(&imgs, side)?, labs, ts)
    } else {
        (images_to_tensor::<T>(&batch.images, side)?, batch.labels.clone(), Vec::new())
    };
    let views = if semi.enabled && !batch.unlabeled.is_empty() {
        Some(prepare_views(model, &batch.unlabeled, semi, rng)?)
    } else {
        None
    };
    let mut grads = vec![T::zero(); model.params().len()];
    let diagnose = |what: String| {
        Error::Numeric(format!(
            "step {step}: {what}; lr={lr}; labeled {}; unlabeled {}",
            image_stats(&batch.images),
            image_stats(&batch.unlabeled)
        ))
    };
    let report = compute_step(
        model,
        &labeled,
        &labels,
        &batch.spec,
        views.as_ref(),
        Some(&mut grads),
        GradOptions::default(),
    )
    .map_err(|e| match e {
        Error::Numeric(m) => diagnose(m),
        other => other,
    })?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let layer = model.layout().layer_of(i).name.clone();
        return Err(diagnose(format!("non-finite gradient in {layer}")));
    }
    opt.step(model.params_mut(), &grads, lr);
    let records = match views {
        Some(v) => Some(AugRecords {
            labeled: labeled_t,
            ..v.records
        }),
        None if !labeled_t.is_empty() => Some(AugRecords {
            labeled: labeled_t,
            weak: Vec::new(),
            strong1: Vec::new(),
            strong2: Vec::new(),
        }),
        None => None,
    };
    Ok(StepOutcome { report, records })
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub resume: Option<PathBuf>,
    pub allow_config_drift: bool,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
    pub dump_augs: bool,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub epochs_done: usize,
    pub global_step: usize,
    /// `None` when the run stopped before its last epoch.
    pub final_checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub minutes_per_epoch: Option<f64>,
    pub model: Model<f32>,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows for steps before `global_step`.
fn truncate_metrics(path: &Path, global_step: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (step, _, _) = LossReport::parse_csv_row(line)?;
        if step < global_step {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Step RNG: one independent stream per global step, so a resumed run
/// draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, global_step: usize) -> RngStream {
    RngStream::with_stream(seed, global_step as u64)
}

/// Refuses to resume from a checkpoint written under a different config
/// unless `allow_drift` is set.
pub fn check_resume(path: &Path, meta: &CheckpointMeta, config_text: &str, allow_drift: bool) -> Result<()> {
    let hash = config_hash(config_text);
    if meta.config_hash != hash && !allow_drift {
        return Err(Error::validation(format!(
            "checkpoint {} was written with config {} but the current config hashes to {hash}; \
             pass --allow-config-drift to resume anyway",
            path.display(),
            meta.config_hash
        )));
    }
    Ok(())
}

/// Runs (or resumes) training, writing `metrics.csv`, `timing.csv` and
/// checkpoints under `run_dir`.
pub fn fit(cfg: &Config, config_text: &str, data: &RunData, run_dir: &Path, opts: &FitOptions) -> Result<FitSummary> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let hash = config_hash(config_text);
    let metrics = run_dir.join(METRICS_FILE);
    let timing = run_dir.join(TIMING_FILE);

    let (mut model, mut opt, mut meta) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            check_resume(path, &ck.meta, config_text, opts.allow_config_drift)?;
            if ck.model.config() != &cfg.model {
                return Err(Error::validation("checkpoint model config differs from the current [model] section"));
            }
            truncate_metrics(&metrics, ck.meta.global_step)?;
            let opt = RmsProp::with_state(ck.optimizer_state, cfg.train.rms_alpha, cfg.train.rms_eps);
            let meta = CheckpointMeta {
                config_hash: hash.clone(),
                ..ck.meta
            };
            (ck.model, opt, meta)
        }
        None => {
            fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
            fs::write(&timing, "epoch,seconds\n").map_err(|e| Error::io(&timing, e))?;
            if opts.dump_augs {
                fs::write(run_dir.join(AUGS_FILE), "").map_err(|e| Error::io(run_dir, e))?;
            }
            let model = Model::<f32>::new(cfg.model.clone())?;
            let opt = RmsProp::new(model.params().len(), cfg.train.rms_alpha, cfg.train.rms_eps);
            let meta = CheckpointMeta {
                config_hash: hash.clone(),
                ..CheckpointMeta::default()
            };
            (model, opt, meta)
        }
    };

    fs::write(run_dir.join(CONFIG_COPY), config_text).map_err(|e| Error::io(run_dir, e))?;

    let sizes: Vec<usize> = data.labeled.iter().map(Dataset::len).collect();
    let unlabeled_size = if cfg.semi.enabled { data.unlabeled.len() } else { 0 };
    let mut checkpoints = Vec::new();
    let stop = opts.stop_after_epochs.unwrap_or(usize::MAX).min(cfg.train.epochs);
    while meta.epoch < stop {
        let epoch = meta.epoch;
        let lr = lr_at(epoch, &cfg.train);
        let plan = plan_epoch(epoch, &sizes, unlabeled_size, &cfg.train);
        let started = Instant::now();
        let mut rows = String::new();
        let mut epoch_total = 0.0;
        for planned in &plan.steps {
            let batch = StepBatch::from_plan(data, planned);
            let mut rng = step_rng(cfg.train.seed, meta.global_step);
            let out = train_step(&mut model, &mut opt, lr, &batch, cfg, meta.global_step, &mut rng)?;
            rows.push_str(&out.report.csv_row(meta.global_step, lr));
            rows.push('\n');
            epoch_total += out.report.total;
            if let (true, Some(rec)) = (opts.dump_augs, &out.records) {
                let line = serde_json::json!({ "step": meta.global_step, "augs": rec });
                append(&run_dir.join(AUGS_FILE), &format!("{line}\n"))?;
            }
            meta.global_step += 1;
        }
        append(&metrics, &rows)?;
        let secs = started.elapsed().as_secs_f64();
        append(&timing, &format!("{epoch},{secs}\n"))?;
        meta.train_seconds += secs;
        meta.timed_epochs += 1;
        meta.epoch += 1;
        if opts.verbose {
            eprintln!(
                "epoch {:>4}/{}  lr {lr:.3e}  mean loss {:.5}  {secs:.1}s",
                meta.epoch,
                cfg.train.epochs,
                epoch_total / plan.steps.len().max(1) as f64
            );
        }
        if cfg.train.checkpoint_every > 0 && meta.epoch % cfg.train.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", meta.epoch));
            save_checkpoint(&path, config_text, &meta, &model, &opt)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = if meta.epoch >= cfg.train.epochs {
        let path = run_dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&path, config_text, &meta, &model, &opt)?;
        Some(path)
    } else {
        None
    };
    Ok(FitSummary {
        epochs_done: meta.epoch,
        global_step: meta.global_step,
        final_checkpoint,
        checkpoints,
        metrics,
        minutes_per_epoch: meta.minutes_per_epoch(),
        model,
    })
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, LossReport, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::validation(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(LossReport::parse_csv_row).collect()
}
