//! Dice evaluation per organ and on average, plus the CSV and plain-text
//! report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{ClassRegistry, Dataset, Image, LabelMap};
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, Model};
use crate::scalar::Scalar;

/// Images forwarded together during evaluation.
const EVAL_BATCH: usize = 4;

fn check_same_shape(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::validation(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Overlap counts of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn of(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<Self> {
        check_same_shape(pred, gt)?;
        let mut o = Overlap::default();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p == class, g == class);
            o.intersection += (p && g) as usize;
            o.predicted += p as usize;
            o.truth += g as usize;
        }
        Ok(o)
    }

    pub fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// 1.0 when both sets are empty: the organ is correctly absent.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

/// Dice of class `class` between two masks.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    Ok(Overlap::of(pred, gt, class)?.dice())
}

/// How per-case counts become one score per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sum the counts over the whole set, then take Dice once.
    #[default]
    Global,
    /// Mean of the per-image Dice scores.
    PerImage,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Global => "global",
            Aggregation::PerImage => "per-image",
        }
    }
}

/// Anything that maps images to label maps. Lets tests swap in an oracle.
pub trait Segmenter {
    /// Output classes including background.
    fn num_classes(&self) -> usize;
    fn segment(&self, images: &[Image]) -> Result<Vec<LabelMap>>;
}

impl<T: Scalar> Segmenter for Model<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn segment(&self, images: &[Image]) -> Result<Vec<LabelMap>> {
        let x = images_to_tensor::<T>(images, self.config().input_size)?;
        Ok(self.forward(&x)?.0.argmax())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub label: String,
    pub classes: Vec<String>,
    /// Dice in [0, 1], one per foreground class in registry order.
    pub per_class: Vec<f64>,
    pub average: f64,
    pub cases: usize,
    pub seconds_per_case: f64,
    pub train_minutes_per_epoch: Option<f64>,
    pub aggregation: Aggregation,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl DiceReport {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("label,aggregation,cases");
        for c in &self.classes {
            write!(h, ",{c}").unwrap();
        }
        h.push_str(",average,train_min_per_epoch,test_s_per_case");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.label, self.aggregation.name(), self.cases);
        for d in &self.per_class {
            write!(r, ",{d}").unwrap();
        }
        let train = self.train_minutes_per_epoch.map_or(String::new(), |v| v.to_string());
        write!(r, ",{},{train},{}", self.average, self.seconds_per_case).unwrap();
        r
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    /// Aligned table: Dice in percent per organ and on average, then train
    /// minutes per epoch and test seconds per case.
    pub fn to_table(&self) -> String {
        let mut head: Vec<String> = vec!["Method".into()];
        head.extend(self.classes.iter().map(|c| capitalize(c)));
        head.extend(["Average".into(), "Tr.(min/epoch)".into(), "Ts.(s/case)".into()]);
        let mut row: Vec<String> = vec![self.label.clone()];
        row.extend(self.per_class.iter().map(|d| format!("{:.2}", d * 100.0)));
        row.push(format!("{:.2}", self.average * 100.0));
        row.push(fmt_opt(self.train_minutes_per_epoch, 3));
        row.push(format!("{:.4}", self.seconds_per_case));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join(" | ")
        };
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        format!(
            "{}\n{}\n{}\n(Dice %, {} aggregation over {} cases)\n",
            line(&head),
            rule.join("-+-"),
            line(&row),
            self.aggregation.name(),
            self.cases
        )
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Scores `seg` on a fully labeled dataset.
pub fn evaluate<S: Segmenter + ?Sized>(
    seg: &S,
    data: &Dataset,
    registry: &ClassRegistry,
    aggregation: Aggregation,
    label: &str,
    train_minutes_per_epoch: Option<f64>,
) -> Result<DiceReport> {
    if seg.num_classes() != registry.num_outputs() {
        return Err(Error::validation(format!(
            "model predicts {} classes but the registry defines {} plus background",
            seg.num_classes(),
            registry.len()
        )));
    }
    let (Some(labels), Some(spec)) = (&data.labels, data.spec()) else {
        return Err(Error::validation(format!("dataset {:?} has no labels to evaluate against", data.descriptor.name)));
    };
    if !spec.is_full(registry) {
        return Err(Error::validation(format!(
            "dataset {:?} is partially labeled; unannotated organs appear as background, so Dice against it \
             would count correct predictions as false positives. Evaluate on a fully labeled split",
            data.descriptor.name
        )));
    }
    if data.is_empty() {
        return Err(Error::validation(format!("dataset {:?} is empty", data.descriptor.name)));
    }

    let k = registry.len();
    let mut global = vec![Overlap::default(); k];
    let mut per_image_sum = vec![0.0; k];
    let mut seconds = 0.0;
    for (imgs, gts) in data.images.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let started = Instant::now();
        let preds = seg.segment(imgs)?;
        seconds += started.elapsed().as_secs_f64();
        if preds.len() != imgs.len() {
            return Err(Error::shape(format!("segmenter returned {} maps for {} images", preds.len(), imgs.len())));
        }
        for (p, g) in preds.iter().zip(gts) {
            for c in 0..k {
                let o = Overlap::of(p, g, (c + 1) as u8)?;
                global[c].add(o);
                per_image_sum[c] += o.dice();
            }
        }
    }
    let per_class: Vec<f64> = match aggregation {
        Aggregation::Global => global.iter().map(Overlap::dice).collect(),
        Aggregation::PerImage => per_image_sum.iter().map(|s| s / data.len() as f64).collect(),
    };
    let average = per_class.iter().sum::<f64>() / k as f64;
    Ok(DiceReport {
        label: label.to_string(),
        classes: registry.names().to_vec(),
        per_class,
        average,
        cases: data.len(),
        seconds_per_case: seconds / data.len() as f64,
        train_minutes_per_epoch,
        aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: usize, top: usize, left: usize, size: usize, class: u8) -> LabelMap {
        let mut m = LabelMap::background(side, side);
        for y in top..top + size {
            for x in left..left + size {
                m.labels_mut()[y * side + x] = class;
            }
        }
        m
    }

    #[test]
    fn identical_masks_score_one() {
        let m = square(16, 2, 2, 5, 1);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = square(16, 0, 0, 4, 1);
        let b = square(16, 8, 8, 4, 1);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_of_hundred_pixel_sets() {
        // 10x10 squares shifted by 5 columns share 50 pixels.
        let a = square(32, 0, 0, 10, 2);
        let b = square(32, 0, 5, 10, 2);
        assert_eq!(dice(&a, &b, 2).unwrap(), 0.5);
    }

    #[test]
    fn empty_cases() {
        let bg = LabelMap::background(8, 8);
        let a = square(8, 0, 0, 2, 1);
        assert_eq!(dice(&bg, &bg, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &bg, 1).unwrap(), 0.0);
        assert_eq!(dice(&bg, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let a = LabelMap::background(8, 8);
        let b = LabelMap::background(8, 16);
        assert!(matches!(dice(&a, &b, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn table_has_one_column_per_organ() {
        let r = DiceReport {
            label: "model".into(),
            classes: vec!["liver".into(), "kidney".into(), "spleen".into()],
            per_class: vec![0.9, 0.8, 0.7],
            average: 0.8,
            cases: 4,
            seconds_per_case: 0.01,
            train_minutes_per_epoch: Some(0.5),
            aggregation: Aggregation::Global,
        };
        let t = r.to_table();
        for col in ["Liver", "Kidney", "Spleen", "Average", "Tr.(min/epoch)", "Ts.(s/case)", "90.00", "80.00"] {
            assert!(t.contains(col), "{col} missing from\n{t}");
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("label,aggregation,cases,liver,kidney,spleen,average,train_min_per_epoch,test_s_per_case\n"));
        assert!(csv.contains(",0.5,0.01\n"));
    }
}
