//! Target adaptive loss for partially labeled batches, confidence-masked
//! pseudo-label losses for the unlabeled streams, and their weighted
//! combination.
//!
//! Every loss returns the value together with its gradient with respect to
//! the predicted probabilities; the model maps that onto the logits.

use serde::{Deserialize, Serialize};

use crate::datasets::{LabelMap, PartialLabelSpec};
use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Weights of the two strong-view streams and the feature-perturbed stream.
pub const W_S1: f64 = 0.25;
pub const W_S2: f64 = 0.25;
pub const W_FP: f64 = 0.5;
/// Weights of the supervised and unsupervised parts of the total loss.
pub const W_SUP: f64 = 0.5;
pub const W_UNSUP: f64 = 0.5;

/// Hard pseudo-labels from the weak view plus the confidence keep-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub keep: Vec<bool>,
    pub tau: f64,
}

impl PseudoLabel {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.keep.len() as f64
    }
}

/// Fraction of kept pixels over a whole batch.
pub fn kept_fraction(ys: &[PseudoLabel]) -> f64 {
    let total: usize = ys.iter().map(|y| y.keep.len()).sum();
    if total == 0 {
        return 0.0;
    }
    ys.iter().map(PseudoLabel::kept).sum::<usize>() as f64 / total as f64
}

struct Clamp<T> {
    lo: T,
    hi: T,
}

impl<T: Scalar> Clamp<T> {
    fn new() -> Self {
        Clamp {
            lo: T::of(EPS),
            hi: T::one() - T::of(EPS),
        }
    }

    /// `−log(clamp(p))` and `d/dp` of it (zero where the clamp is active).
    fn neg_log(&self, p: T) -> (T, T) {
        if p < self.lo {
            (-self.lo.ln(), T::zero())
        } else if p > self.hi {
            (-self.hi.ln(), T::zero())
        } else {
            (-p.ln(), -T::one() / p)
        }
    }
}

fn check_batch<T: Scalar>(pred: &Prediction<T>, n: usize, h: usize, w: usize, what: &str) -> Result<()> {
    let [pn, _, ph, pw] = pred.probs().shape();
    if pn != n || ph != h || pw != w {
        return Err(Error::validation(format!(
            "{what}: prediction batch {pn}x{ph}x{pw} does not match targets {n}x{h}x{w}"
        )));
    }
    Ok(())
}

fn label_shape(labels: &[LabelMap]) -> Result<(usize, usize)> {
    let first = labels.first().ok_or_else(|| Error::validation("empty label batch"))?;
    let (h, w) = (first.height(), first.width());
    if labels.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(Error::shape("label maps in a batch differ in size"));
    }
    Ok((h, w))
}

/// Target adaptive loss: mean over pixels of
/// `−[Σ_{c∈C_k} y_c log p_c + 1[no annotated class] log(1 − Σ_{c∈C_k} p_c)]`.
///
/// Unannotated foreground classes are folded into the background term, so a
/// partially labeled batch never penalizes mass on organs it does not label.
pub fn tal_loss_with_grad<T: Scalar>(
    pred: &Prediction<T>,
    labels: &[LabelMap],
    spec: &PartialLabelSpec,
) -> Result<(T, Tensor<T>)> {
    let (h, w) = label_shape(labels)?;
    check_batch(pred, labels.len(), h, w, "tal_loss")?;
    let probs = pred.probs();
    let k1 = probs.channels();
    let hw = h * w;
    let annotated = spec.class_mask(k1);
    if spec.annotated().iter().any(|&c| c as usize >= k1) {
        return Err(Error::validation(format!(
            "annotated classes {:?} exceed the {k1}-way prediction",
            spec.annotated()
        )));
    }
    let clamp = Clamp::new();
    let inv_count = T::one() / T::of((labels.len() * hw) as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    for (s, lab) in labels.iter().enumerate() {
        let p = probs.sample(s);
        let g = grad.sample_mut(s);
        for (i, &l) in lab.labels().iter().enumerate() {
            if l == 0 {
                let mut fg = T::zero();
                for c in 1..k1 {
                    if annotated[c] {
                        fg += p[c * hw + i];
                    }
                }
                let (v, d) = clamp.neg_log(T::one() - fg);
                loss += v;
                // d/dp_c of −log(1 − Σ p) = −d(−log q)/dq
                for c in 1..k1 {
                    if annotated[c] {
                        g[c * hw + i] = -d * inv_count;
                    }
                }
            } else {
                if !annotated.get(l as usize).copied().unwrap_or(false) {
                    return Err(Error::validation(format!(
                        "tal_loss: sample {s} pixel {i} has label {l}, which is not annotated (C_k = {:?})",
                        spec.annotated()
                    )));
                }
                let (v, d) = clamp.neg_log(p[l as usize * hw + i]);
                loss += v;
                g[l as usize * hw + i] = d * inv_count;
            }
        }
    }
    Ok((loss * inv_count, grad))
}

pub fn tal_loss<T: Scalar>(pred: &Prediction<T>, labels: &[LabelMap], spec: &PartialLabelSpec) -> Result<T> {
    tal_loss_with_grad(pred, labels, spec).map(|(v, _)| v)
}

/// Argmax labels (lowest index wins ties) and `max p ≥ τ` keep-masks.
pub fn make_pseudo_labels<T: Scalar>(pred_weak: &Prediction<T>, tau: f64) -> Result<Vec<PseudoLabel>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("confidence threshold {tau} outside [0, 1]")));
    }
    let probs = pred_weak.probs();
    let [n, k1, h, w] = probs.shape();
    let hw = h * w;
    let tau_t = T::of(tau);
    (0..n)
        .map(|s| {
            let p = probs.sample(s);
            let mut labels = vec![0u8; hw];
            let mut keep = vec![false; hw];
            for i in 0..hw {
                let mut best = 0;
                let mut best_p = p[i];
                for c in 1..k1 {
                    if p[c * hw + i] > best_p {
                        best = c;
                        best_p = p[c * hw + i];
                    }
                }
                labels[i] = best as u8;
                keep[i] = best_p >= tau_t;
            }
            Ok(PseudoLabel {
                labels: LabelMap::new(h, w, labels)?,
                keep,
                tau,
            })
        })
        .collect()
}

/// Mean over all pixels of `keep · (−log p[pseudo label])`. Dropped pixels
/// still count in the denominator.
pub fn unsup_stream_loss_with_grad<T: Scalar>(pred: &Prediction<T>, ys: &[PseudoLabel]) -> Result<(T, Tensor<T>)> {
    let maps: Vec<&LabelMap> = ys.iter().map(|y| &y.labels).collect();
    let first = maps.first().ok_or_else(|| Error::validation("empty pseudo-label batch"))?;
    let (h, w) = (first.height(), first.width());
    if ys.iter().any(|y| y.labels.height() != h || y.labels.width() != w || y.keep.len() != h * w) {
        return Err(Error::validation("pseudo-labels in a batch differ in size"));
    }
    check_batch(pred, ys.len(), h, w, "unsup_stream_loss")?;
    let probs = pred.probs();
    let k1 = probs.channels();
    let hw = h * w;
    let clamp = Clamp::new();
    let inv_count = T::one() / T::of((ys.len() * hw) as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    for (s, y) in ys.iter().enumerate() {
        let p = probs.sample(s);
        let g = grad.sample_mut(s);
        for (i, (&l, &keep)) in y.labels.labels().iter().zip(&y.keep).enumerate() {
            if !keep {
                continue;
            }
            if l as usize >= k1 {
                return Err(Error::validation(format!("pseudo-label {l} exceeds {k1}-way prediction")));
            }
            let (v, d) = clamp.neg_log(p[l as usize * hw + i]);
            loss += v;
            g[l as usize * hw + i] = d * inv_count;
        }
    }
    Ok((loss * inv_count, grad))
}

pub fn unsup_stream_loss<T: Scalar>(pred: &Prediction<T>, ys: &[PseudoLabel]) -> Result<T> {
    unsup_stream_loss_with_grad(pred, ys).map(|(v, _)| v)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss stream {name} is {v}")))
    }
}

/// `0.25·L_s1 + 0.25·L_s2 + 0.5·L_fp`.
pub fn combine_unsup(l_s1: f64, l_s2: f64, l_fp: f64) -> Result<f64> {
    Ok(W_S1 * finite("l_s1", l_s1)? + W_S2 * finite("l_s2", l_s2)? + W_FP * finite("l_fp", l_fp)?)
}

/// `0.5·L_sup + 0.5·L_u`.
pub fn combine_total(l_sup: f64, l_u: f64) -> Result<f64> {
    Ok(W_SUP * finite("l_sup", l_sup)? + W_UNSUP * finite("l_u", l_u)?)
}

/// Per-step loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_fp: f64,
    pub l_u: f64,
    pub total: f64,
    pub kept_s1: f64,
    pub kept_s2: f64,
    pub kept_fp: f64,
}

pub const METRICS_HEADER: &str = "step,l_sup,l_s1,l_s2,l_fp,l_u,total,kept_s1,kept_s2,kept_fp,lr";

impl LossReport {
    /// Fills `l_u` and `total` from the stream components.
    pub fn from_streams(l_sup: f64, l_s1: f64, l_s2: f64, l_fp: f64, kept: [f64; 3]) -> Result<Self> {
        let l_u = combine_unsup(l_s1, l_s2, l_fp)?;
        let total = combine_total(l_sup, l_u)?;
        Ok(LossReport {
            l_sup,
            l_s1,
            l_s2,
            l_fp,
            l_u,
            total,
            kept_s1: kept[0],
            kept_s2: kept[1],
            kept_fp: kept[2],
        })
    }

    /// Checks the weighted-sum identities within `tol`.
    pub fn combination_error(&self) -> f64 {
        let e_u = (self.l_u - (W_S1 * self.l_s1 + W_S2 * self.l_s2 + W_FP * self.l_fp)).abs();
        let e_t = (self.total - (W_SUP * self.l_sup + W_UNSUP * self.l_u)).abs();
        e_u.max(e_t)
    }

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{},{lr}",
            self.l_sup, self.l_s1, self.l_s2, self.l_fp, self.l_u, self.total, self.kept_s1, self.kept_s2, self.kept_fp
        )
    }

    /// Parses a row written by [`csv_row`](Self::csv_row); returns `(step, report, lr)`.
    pub fn parse_csv_row(row: &str) -> Result<(usize, LossReport, f64)> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::validation(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::validation(format!("metrics field {i} {:?} is not a number", f[i])))
        };
        let step = f[0]
            .parse::<usize>()
            .map_err(|_| Error::validation(format!("bad step {:?}", f[0])))?;
        Ok((
            step,
            LossReport {
                l_sup: num(1)?,
                l_s1: num(2)?,
                l_s2: num(3)?,
                l_fp: num(4)?,
                l_u: num(5)?,
                total: num(6)?,
                kept_s1: num(7)?,
                kept_s2: num(8)?,
                kept_fp: num(9)?,
            },
            num(10)?,
        ))
    }
}
