//! Images, label maps, the class registry, partial-label semantics and the
//! on-disk dataset layout.

mod container;
mod manifest;
mod phantom;
mod registry;

use std::collections::BTreeSet;

pub use container::{read_array, read_image, read_labels, write_image, write_labels, RawArray, MAGIC};
pub use manifest::{load_dataset, write_manifest, Dataset, DatasetDescriptor, DatasetKind, ManifestItem};
pub use phantom::{generate_phantom, ClassShape, PhantomSpec};
pub use registry::ClassRegistry;

use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 8;

/// Single-channel intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::shape(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("image pixel {i} is not finite")));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Builds an image from already-checked parts (same dimensions as an
    /// existing valid image).
    pub(crate) fn from_parts_unchecked(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Image { height, width, pixels }
    }
}

/// Per-pixel class indices; 0 is background, or "not annotated" in a
/// partially labeled dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class value `0..=max_class`.
    pub fn histogram(&self, max_class: u8) -> Vec<usize> {
        let mut counts = vec![0; max_class as usize + 1];
        for &l in &self.labels {
            if l <= max_class {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Checks every value lies in `0..=num_foreground`.
    pub fn check_range(&self, num_foreground: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize > num_foreground) {
            Some(i) => Err(Error::validation(format!(
                "label {} at pixel {i} exceeds class count {num_foreground}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// The foreground classes a dataset actually annotates (`C_k`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialLabelSpec {
    annotated: BTreeSet<u8>,
}

impl PartialLabelSpec {
    pub fn new(classes: impl IntoIterator<Item = u8>, registry: &ClassRegistry) -> Result<Self> {
        let annotated: BTreeSet<u8> = classes.into_iter().collect();
        if annotated.is_empty() {
            return Err(Error::validation("partial label spec annotates no classes"));
        }
        for &c in &annotated {
            if c == 0 || c as usize > registry.len() {
                return Err(Error::validation(format!(
                    "class index {c} is not a foreground class of a {}-class registry",
                    registry.len()
                )));
            }
        }
        Ok(PartialLabelSpec { annotated })
    }

    /// Every foreground class of the registry.
    pub fn full(registry: &ClassRegistry) -> Self {
        PartialLabelSpec {
            annotated: (1..=registry.len() as u8).collect(),
        }
    }

    pub fn annotated(&self) -> &BTreeSet<u8> {
        &self.annotated
    }

    pub fn contains(&self, class: u8) -> bool {
        self.annotated.contains(&class)
    }

    pub fn is_full(&self, registry: &ClassRegistry) -> bool {
        self.annotated.len() == registry.len()
    }

    /// Mask over `0..=K`: true for annotated foreground classes.
    pub fn class_mask(&self, num_classes_with_bg: usize) -> Vec<bool> {
        (0..num_classes_with_bg).map(|c| self.annotated.contains(&(c as u8))).collect()
    }
}

/// Keeps only the annotated classes; everything else becomes background.
pub fn restrict_labels(full: &LabelMap, spec: &PartialLabelSpec) -> LabelMap {
    let labels = full
        .labels
        .iter()
        .map(|&l| if spec.contains(l) { l } else { 0 })
        .collect();
    LabelMap {
        height: full.height,
        width: full.width,
        labels,
    }
}
