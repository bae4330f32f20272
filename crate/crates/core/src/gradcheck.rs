//! Finite-difference verification of the analytic gradients: the two loss
//! functions with respect to probabilities, then the full training loss
//! with respect to every parameter of a tiny model, grouped by layer.
//!
//! Reference derivatives are always central differences in f64. The
//! analytic side runs in the requested precision, so the f32 mode measures
//! how much single precision costs.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::RngStream;
use crate::datasets::{generate_phantom, ClassRegistry, LabelMap, PartialLabelSpec, PhantomSpec};
use crate::error::{Error, Result};
use crate::losses::{tal_loss, tal_loss_with_grad, unsup_stream_loss, unsup_stream_loss_with_grad, PseudoLabel};
use crate::model::{images_to_tensor, FeatureMask, Model, ModelConfig, Prediction};
use crate::scalar::Scalar;
use crate::tensor::{softmax_channels, Tensor};
use crate::trainer::{compute_step, prepare_views, GradOptions, SemiConfig, UnlabeledViews};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Largest accepted relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Precision::F64 => 1e-3,
            Precision::F32 => 1e-2,
        }
    }

    /// Gradient magnitude below which errors are measured absolutely.
    /// Single precision cannot resolve tiny gradients of a sum over many
    /// pixels, so its floor is higher.
    pub fn floor(self) -> f64 {
        match self {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            _ => Err(Error::validation(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Settings of a gradient check; the defaults are the tiny reference
/// network (16x16 input, width 4, two organs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub input_size: usize,
    pub base_width: usize,
    pub pyramid_depth: usize,
    pub organs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub tau: f64,
    pub feature_dropout: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            input_size: 16,
            base_width: 4,
            pyramid_depth: 3,
            organs: 2,
            labeled_batch: 2,
            unlabeled_batch: 2,
            tau: 0.4,
            feature_dropout: 0.5,
            step: 1e-5,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            #[serde(default)]
            gradcheck: GradCheckConfig,
        }
        let f: File = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        Ok(f.gradcheck)
    }

    fn model(&self) -> ModelConfig {
        ModelConfig {
            pyramid_depth: self.pyramid_depth,
            base_width: self.base_width,
            num_classes: self.organs + 1,
            input_size: self.input_size,
            feature_dropout: self.feature_dropout,
            init_seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

/// Worst agreement found for one component.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub kept_fraction: f64,
    pub components: Vec<ComponentResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.components.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.components.iter().map(|c| c.name.len()).max().unwrap_or(9).max(9);
        writeln!(f, "gradient check ({} analytic vs f64 central differences)", self.precision.name())?;
        writeln!(f, "{:<width$}  {:>7}  {:>12}  {:>9}  result", "component", "checked", "max rel err", "threshold")?;
        for c in &self.components {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}  {:>9.1e}  {}",
                c.name,
                c.checked,
                c.max_rel_error,
                c.threshold,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        let mut tail = String::new();
        if self.passed() {
            write!(tail, "all components within tolerance").unwrap();
        } else {
            let names: Vec<&str> = self.failures().iter().map(|c| c.name.as_str()).collect();
            write!(tail, "FAILED: {}", names.join(", ")).unwrap();
        }
        writeln!(f, "{tail}")
    }
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along every coordinate of `x`.
fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x)?;
        x[i] = orig - h;
        let down = f(x)?;
        x[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

fn random_prediction(rng: &mut ChaCha8Rng, n: usize, k1: usize, side: usize) -> Result<Prediction<f64>> {
    let logits: Vec<f64> = (0..n * k1 * side * side).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Prediction::new(softmax_channels(&Tensor::from_vec([n, k1, side, side], logits)?))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k1: usize, side: usize) -> Result<Vec<LabelMap>> {
    (0..n)
        .map(|_| LabelMap::new(side, side, (0..side * side).map(|_| rng.gen_range(0..k1) as u8).collect()))
        .collect()
}

fn with_probs(pred: &Prediction<f64>, data: &[f64]) -> Result<Prediction<f64>> {
    let p = pred.probs();
    Prediction::new(Tensor::from_vec([p.batch(), p.channels(), p.height(), p.width()], data.to_vec())?)
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], precision: Precision) -> ComponentResult {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n, precision.floor()))
        .fold(0.0, f64::max);
    ComponentResult {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_error,
        threshold: precision.threshold(),
    }
}

/// Probability-level check of the two losses on random 4x4 instances.
fn loss_components(cfg: &GradCheckConfig, precision: Precision, sabotage: bool) -> Result<Vec<ComponentResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1055);
    let (n, k1, side, h) = (2, cfg.organs + 1, 4, 1e-6);
    let registry = ClassRegistry::new((1..k1).map(|c| format!("organ{c}")).collect::<Vec<_>>())?;
    let spec = PartialLabelSpec::new([1u8], &registry)?;
    let pred = random_prediction(&mut rng, n, k1, side)?;
    let labels = random_labels(&mut rng, n, k1, side)?;
    let labels: Vec<LabelMap> = labels.iter().map(|l| crate::datasets::restrict_labels(l, &spec)).collect();

    let (_, g) = tal_loss_with_grad(&pred, &labels, &spec)?;
    let mut analytic: Vec<f64> = match precision {
        Precision::F64 => g.data().to_vec(),
        Precision::F32 => {
            let p32 = Prediction::new(pred.probs().cast::<f32>())?;
            tal_loss_with_grad(&p32, &labels, &spec)?.1.data().iter().map(|&v| v as f64).collect()
        }
    };
    if sabotage {
        analytic.iter_mut().for_each(|v| *v = -*v);
    }
    let mut x = pred.probs().data().to_vec();
    let numeric = numeric_grad(&mut x, h, |d| tal_loss(&with_probs(&pred, d)?, &labels, &spec))?;
    let tal = compare("tal_loss", &analytic, &numeric, precision);

    let ys: Vec<PseudoLabel> = random_labels(&mut rng, n, k1, side)?
        .into_iter()
        .map(|labels| PseudoLabel {
            keep: (0..side * side).map(|_| rng.gen_bool(0.6)).collect(),
            labels,
            tau: 0.5,
        })
        .collect();
    let analytic: Vec<f64> = match precision {
        Precision::F64 => unsup_stream_loss_with_grad(&pred, &ys)?.1.data().to_vec(),
        Precision::F32 => {
            let p32 = Prediction::new(pred.probs().cast::<f32>())?;
            unsup_stream_loss_with_grad(&p32, &ys)?.1.data().iter().map(|&v| v as f64).collect()
        }
    };
    let numeric = numeric_grad(&mut x, h, |d| unsup_stream_loss(&with_probs(&pred, d)?, &ys))?;
    let unsup = compare("unsup_stream_loss", &analytic, &numeric, precision);
    Ok(vec![tal, unsup])
}

struct Fixture {
    model: Model<f64>,
    labeled: Tensor<f64>,
    labels: Vec<LabelMap>,
    spec: PartialLabelSpec,
    views: UnlabeledViews<f64>,
}

fn fixture(cfg: &GradCheckConfig) -> Result<Fixture> {
    let mcfg = cfg.model();
    mcfg.validate()?;
    let registry = ClassRegistry::new((1..=cfg.organs).map(|c| format!("organ{c}")).collect::<Vec<_>>())?;
    let mut phantom = PhantomSpec::abdominal(cfg.input_size, cfg.labeled_batch + cfg.unlabeled_batch, cfg.seed);
    phantom.classes.truncate(cfg.organs);
    for shape in &mut phantom.classes {
        shape.radius_min = shape.radius_min.max(2.0);
        shape.radius_max = shape.radius_max.max(3.0);
    }
    let (images, labels): (Vec<_>, Vec<_>) = generate_phantom(&phantom, &registry)?.into_iter().unzip();
    let (lab_imgs, unl_imgs) = images.split_at(cfg.labeled_batch);
    let spec = PartialLabelSpec::new([1u8], &registry)?;
    let labels: Vec<LabelMap> = labels[..cfg.labeled_batch]
        .iter()
        .map(|l| crate::datasets::restrict_labels(l, &spec))
        .collect();
    let model = Model::<f64>::new(mcfg)?;
    let semi = SemiConfig {
        tau: cfg.tau,
        ..SemiConfig::default()
    };
    let mut rng = RngStream::with_stream(cfg.seed, 0);
    let views = prepare_views(&model, unl_imgs, &semi, &mut rng)?;
    Ok(Fixture {
        labeled: images_to_tensor(lab_imgs, cfg.input_size)?,
        model,
        labels,
        spec,
        views,
    })
}

fn cast_views(v: &UnlabeledViews<f64>) -> UnlabeledViews<f32> {
    let cast = |m: &Vec<f64>| m.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    UnlabeledViews {
        weak: v.weak.cast(),
        strong1: v.strong1.cast(),
        strong2: v.strong2.cast(),
        pseudo: v.pseudo.clone(),
        pseudo1: v.pseudo1.clone(),
        pseudo2: v.pseudo2.clone(),
        mask: v.mask.as_ref().map(|m| FeatureMask {
            deepest: cast(&m.deepest),
            skips: m.skips.as_ref().map(|s| s.iter().map(cast).collect()),
        }),
        records: v.records.clone(),
    }
}

fn analytic_params<T: Scalar>(fx: &Fixture, views: &UnlabeledViews<T>, sup_only: bool, opts: GradOptions) -> Result<Vec<f64>> {
    let model: Model<T> = fx.model.cast();
    let mut g = vec![T::zero(); model.params().len()];
    let views = (!sup_only).then_some(views);
    compute_step(&model, &fx.labeled.cast(), &fx.labels, &fx.spec, views, Some(&mut g), opts)?;
    Ok(g.iter().map(|v| v.as_f64()).collect())
}

fn parameter_components(fx: &mut Fixture, cfg: &GradCheckConfig, precision: Precision, sabotage: bool) -> Result<Vec<ComponentResult>> {
    let opts = GradOptions { sabotage_tal: sabotage };
    let views32 = cast_views(&fx.views);
    let analytic = |sup_only: bool| match precision {
        Precision::F64 => analytic_params(fx, &fx.views, sup_only, opts),
        Precision::F32 => analytic_params(fx, &views32, sup_only, opts),
    };
    let sup = analytic(true)?;
    let full = analytic(false)?;

    let total = |fx: &Fixture, params: &[f64], sup_only: bool| -> Result<f64> {
        let model = Model::from_params(fx.model.config().clone(), params.to_vec())?;
        let views = (!sup_only).then_some(&fx.views);
        let r = compute_step(&model, &fx.labeled, &fx.labels, &fx.spec, views, None, GradOptions::default())?;
        Ok(r.total)
    };
    let mut params = fx.model.params().to_vec();
    let num_sup = numeric_grad(&mut params, cfg.step, |p| total(fx, p, true))?;
    let num_full = numeric_grad(&mut params, cfg.step, |p| total(fx, p, false))?;

    // The supervised term alone, through the whole network: this is where
    // a wrong loss gradient shows up even if the loss check was skipped.
    let mut out = vec![compare("tal_loss (through network)", &sup, &num_sup, precision)];
    for layer in fx.model.layout().layers() {
        let r = layer.weight_offset..layer.bias_offset + layer.out_ch;
        out.push(compare(&format!("L / {}", layer.name), &full[r.clone()], &num_full[r], precision));
    }
    Ok(out)
}

/// Runs every component and collects the worst relative error of each.
/// `sabotage` flips the sign of the supervised loss gradient, a negative
/// control proving the checker catches a wrong gradient.
pub fn run_grad_check(cfg: &GradCheckConfig, precision: Precision, sabotage: bool) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) || cfg.organs == 0 {
        return Err(Error::validation("gradcheck needs step > 0 and at least one organ"));
    }
    let mut components = loss_components(cfg, precision, sabotage)?;
    let mut fx = fixture(cfg)?;
    let kept_fraction = crate::losses::kept_fraction(&fx.views.pseudo);
    components.extend(parameter_components(&mut fx, cfg, precision, sabotage)?);
    Ok(GradCheckReport {
        precision,
        kept_fraction,
        components,
    })
}
