use proptest::prelude::*;

use organseg::augment::{apply_weak_labels, WeakTransform};
use organseg::datasets::{ClassRegistry, Dataset, Image, LabelMap, PartialLabelSpec};
use organseg::eval::{dice, evaluate, Aggregation, Segmenter};
use organseg::{Error, Result};

/// Returns stored label maps in order: a perfect model for the dataset it
/// was built from.
struct Oracle(Vec<LabelMap>, std::cell::Cell<usize>);

impl Segmenter for Oracle {
    fn num_classes(&self) -> usize {
        4
    }
    fn segment(&self, images: &[Image]) -> Result<Vec<LabelMap>> {
        let start = self.1.get();
        self.1.set(start + images.len());
        Ok(self.0[start..start + images.len()].to_vec())
    }
}

struct Background;

impl Segmenter for Background {
    fn num_classes(&self) -> usize {
        4
    }
    fn segment(&self, images: &[Image]) -> Result<Vec<LabelMap>> {
        Ok(images.iter().map(|i| LabelMap::background(i.height(), i.width())).collect())
    }
}

fn registry() -> ClassRegistry {
    ClassRegistry::new(["liver", "kidney", "spleen"]).unwrap()
}

fn eval_set(n: usize) -> Dataset {
    let mut labels = Vec::new();
    for i in 0..n {
        let mut m = LabelMap::background(16, 16);
        for c in 1..=3u8 {
            let y = (c as usize - 1) * 5 + i % 2;
            for x in 2..6 + i {
                m.labels_mut()[y * 16 + x] = c;
            }
        }
        labels.push(m);
    }
    let images = (0..n).map(|_| Image::filled(16, 16, 0.5).unwrap()).collect();
    Dataset::from_parts("eval", Some(PartialLabelSpec::full(&registry())), images, Some(labels)).unwrap()
}

#[test]
fn oracle_scores_one_and_background_scores_zero() {
    let ds = eval_set(6);
    let oracle = Oracle(ds.labels.clone().unwrap(), Default::default());
    let r = evaluate(&oracle, &ds, &registry(), Aggregation::Global, "oracle", None).unwrap();
    assert_eq!(r.per_class, vec![1.0; 3]);
    assert_eq!(r.average, 1.0);
    assert!(r.seconds_per_case >= 0.0);

    let r = evaluate(&Background, &ds, &registry(), Aggregation::Global, "bg", None).unwrap();
    assert_eq!(r.per_class, vec![0.0; 3]);
    let r = evaluate(&Background, &ds, &registry(), Aggregation::PerImage, "bg", None).unwrap();
    assert_eq!(r.per_class, vec![0.0; 3]);
}

#[test]
fn average_is_the_mean_of_the_class_entries() {
    struct Shifted;
    impl Segmenter for Shifted {
        fn num_classes(&self) -> usize {
            4
        }
        fn segment(&self, images: &[Image]) -> Result<Vec<LabelMap>> {
            let mut m = LabelMap::background(16, 16);
            for x in 0..8 {
                m.labels_mut()[x] = 1;
                m.labels_mut()[5 * 16 + x] = 2;
            }
            Ok(vec![m; images.len()])
        }
    }
    let ds = eval_set(4);
    for agg in [Aggregation::Global, Aggregation::PerImage] {
        let r = evaluate(&Shifted, &ds, &registry(), agg, "s", None).unwrap();
        assert_eq!(r.average, r.per_class.iter().sum::<f64>() / 3.0);
        assert!(r.per_class.iter().all(|d| (0.0..=1.0).contains(d)));
    }
}

#[test]
fn partially_labeled_sets_are_refused() {
    let reg = registry();
    let spec = PartialLabelSpec::new([1u8], &reg).unwrap();
    let ds = Dataset::from_parts(
        "site",
        Some(spec),
        vec![Image::filled(16, 16, 0.1).unwrap()],
        Some(vec![LabelMap::background(16, 16)]),
    )
    .unwrap();
    match evaluate(&Background, &ds, &reg, Aggregation::Global, "x", None) {
        Err(Error::Validation(msg)) => assert!(msg.contains("partially labeled"), "{msg}"),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn class_count_mismatch_is_refused() {
    let reg = ClassRegistry::new(["liver", "kidney"]).unwrap();
    let ds = eval_set(1);
    assert!(matches!(
        evaluate(&Background, &ds, &reg, Aggregation::Global, "x", None),
        Err(Error::Validation(_))
    ));
}

fn mask(side: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..3, side * side).prop_map(move |v| LabelMap::new(side, side, v).unwrap())
}

proptest! {
    #[test]
    fn dice_is_symmetric(a in mask(8), b in mask(8), c in 0u8..3) {
        prop_assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
    }

    #[test]
    fn dice_is_invariant_under_shared_weak_transforms(
        a in mask(8), b in mask(8), c in 0u8..3, h: bool, v: bool, k in 0u8..4,
    ) {
        let t = WeakTransform { hflip: h, vflip: v, k_rot90: k };
        let before = dice(&a, &b, c).unwrap();
        let after = dice(&apply_weak_labels(&t, &a), &apply_weak_labels(&t, &b), c).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn dice_stays_in_unit_interval(a in mask(6), b in mask(6), c in 0u8..3) {
        let d = dice(&a, &b, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
