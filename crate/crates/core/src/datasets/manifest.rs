//! Line-oriented dataset manifest:
//!
//! ```text
//! name = liver
//! kind = labeled
//! classes = liver
//! item = images/000.ums,labels/000.ums
//! ```
//!
//! Item paths are relative to the manifest's directory. `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_image, read_labels, ClassRegistry, Image, LabelMap, PartialLabelSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetDescriptor {
    pub name: String,
    pub kind: DatasetKind,
    pub spec: Option<PartialLabelSpec>,
    pub items: Vec<ManifestItem>,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("dataset name is empty"));
        }
        match self.kind {
            DatasetKind::Labeled => {
                if self.spec.is_none() {
                    return Err(Error::validation(format!("labeled dataset {:?} has no classes", self.name)));
                }
                if let Some(i) = self.items.iter().position(|it| it.label.is_none()) {
                    return Err(Error::validation(format!(
                        "labeled dataset {:?}: item {i} has no label path",
                        self.name
                    )));
                }
            }
            DatasetKind::Unlabeled => {
                if self.spec.is_some() {
                    return Err(Error::validation(format!(
                        "unlabeled dataset {:?} must not list classes",
                        self.name
                    )));
                }
                if let Some(i) = self.items.iter().position(|it| it.label.is_some()) {
                    return Err(Error::validation(format!(
                        "unlabeled dataset {:?}: item {i} lists a label path",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, registry: &ClassRegistry) -> Result<Self> {
        let mut name = None;
        let mut kind = None;
        let mut classes: Option<Vec<u8>> = None;
        let mut items = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::validation(format!("manifest line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => name = Some(value.to_owned()),
                "kind" => {
                    kind = Some(match value {
                        "labeled" => DatasetKind::Labeled,
                        "unlabeled" => DatasetKind::Unlabeled,
                        other => return Err(at(format!("unknown kind {other:?}"))),
                    })
                }
                "classes" => {
                    let mut idx = Vec::new();
                    for c in value.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                        idx.push(
                            registry
                                .index_of(c)
                                .ok_or_else(|| at(format!("class {c:?} is not in the registry")))?,
                        );
                    }
                    classes = Some(idx);
                }
                "item" => {
                    let mut parts = value.split(',').map(str::trim);
                    let image = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| at("empty item".into()))?;
                    let label = parts.next().filter(|p| !p.is_empty()).map(PathBuf::from);
                    if parts.next().is_some() {
                        return Err(at("item has more than two paths".into()));
                    }
                    items.push(ManifestItem {
                        image: PathBuf::from(image),
                        label,
                    });
                }
                other => return Err(at(format!("unknown key {other:?}"))),
            }
        }
        let desc = DatasetDescriptor {
            name: name.ok_or_else(|| Error::validation("manifest has no `name`"))?,
            kind: kind.ok_or_else(|| Error::validation("manifest has no `kind`"))?,
            spec: classes.map(|c| PartialLabelSpec::new(c, registry)).transpose()?,
            items,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn to_text(&self, registry: &ClassRegistry) -> String {
        let mut s = String::new();
        writeln!(s, "name = {}", self.name).unwrap();
        let kind = match self.kind {
            DatasetKind::Labeled => "labeled",
            DatasetKind::Unlabeled => "unlabeled",
        };
        writeln!(s, "kind = {kind}").unwrap();
        if let Some(spec) = &self.spec {
            let names: Vec<&str> = spec.annotated().iter().filter_map(|&c| registry.name_of(c)).collect();
            writeln!(s, "classes = {}", names.join(",")).unwrap();
        }
        for it in &self.items {
            match &it.label {
                Some(l) => writeln!(s, "item = {},{}", it.image.display(), l.display()).unwrap(),
                None => writeln!(s, "item = {}", it.image.display()).unwrap(),
            }
        }
        s
    }
}

/// A manifest with its arrays loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    pub images: Vec<Image>,
    /// Present iff the dataset is labeled.
    pub labels: Option<Vec<LabelMap>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn spec(&self) -> Option<&PartialLabelSpec> {
        self.descriptor.spec.as_ref()
    }

    /// Builds an in-memory dataset, checking the descriptor invariants and
    /// that labels only use annotated classes.
    pub fn from_parts(
        name: impl Into<String>,
        spec: Option<PartialLabelSpec>,
        images: Vec<Image>,
        labels: Option<Vec<LabelMap>>,
    ) -> Result<Self> {
        let kind = if labels.is_some() { DatasetKind::Labeled } else { DatasetKind::Unlabeled };
        let items = (0..images.len())
            .map(|i| ManifestItem {
                image: PathBuf::from(format!("images/{i:04}.ums")),
                label: labels.as_ref().map(|_| PathBuf::from(format!("labels/{i:04}.ums"))),
            })
            .collect();
        let descriptor = DatasetDescriptor {
            name: name.into(),
            kind,
            spec,
            items,
        };
        descriptor.validate()?;
        let ds = Dataset { descriptor, images, labels };
        ds.check_labels()?;
        Ok(ds)
    }

    fn check_labels(&self) -> Result<()> {
        let (Some(labels), Some(spec)) = (&self.labels, self.spec()) else {
            return Ok(());
        };
        if labels.len() != self.images.len() {
            return Err(Error::validation("image and label counts differ"));
        }
        for (i, (img, lab)) in self.images.iter().zip(labels).enumerate() {
            if img.height() != lab.height() || img.width() != lab.width() {
                return Err(Error::shape(format!(
                    "dataset {:?} item {i}: image {}x{} vs labels {}x{}",
                    self.descriptor.name,
                    img.height(),
                    img.width(),
                    lab.height(),
                    lab.width()
                )));
            }
            if let Some(&bad) = lab.labels().iter().find(|&&l| l != 0 && !spec.contains(l)) {
                return Err(Error::validation(format!(
                    "dataset {:?} item {i} uses class {bad}, which it does not annotate",
                    self.descriptor.name
                )));
            }
        }
        Ok(())
    }
}

/// Writes a manifest and its arrays under `dir`; the manifest goes to
/// `dir/<name>.manifest`, arrays to `dir/<name>/...`.
pub fn write_manifest(dir: &Path, dataset: &Dataset, registry: &ClassRegistry) -> Result<PathBuf> {
    let name = &dataset.descriptor.name;
    let sub = dir.join(name);
    fs::create_dir_all(sub.join("images")).map_err(|e| Error::io(&sub, e))?;
    if dataset.labels.is_some() {
        fs::create_dir_all(sub.join("labels")).map_err(|e| Error::io(&sub, e))?;
    }
    let mut desc = dataset.descriptor.clone();
    for (i, item) in desc.items.iter_mut().enumerate() {
        let img_rel = PathBuf::from(name).join(format!("images/{i:04}.ums"));
        super::write_image(&dir.join(&img_rel), &dataset.images[i])?;
        item.image = img_rel;
        if let Some(labels) = &dataset.labels {
            let lab_rel = PathBuf::from(name).join(format!("labels/{i:04}.ums"));
            super::write_labels(&dir.join(&lab_rel), &labels[i])?;
            item.label = Some(lab_rel);
        }
    }
    let path = dir.join(format!("{name}.manifest"));
    fs::write(&path, desc.to_text(registry)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest and every array it lists.
pub fn load_dataset(manifest: &Path, registry: &ClassRegistry) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let descriptor = DatasetDescriptor::parse(&text, registry)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(descriptor.items.len());
    let mut labels = Vec::new();
    for item in &descriptor.items {
        images.push(read_image(&base.join(&item.image))?);
        if let Some(l) = &item.label {
            let lab = read_labels(&base.join(l))?;
            lab.check_range(registry.len())?;
            labels.push(lab);
        }
    }
    let labels = (descriptor.kind == DatasetKind::Labeled).then_some(labels);
    let ds = Dataset {
        descriptor,
        images,
        labels,
    };
    ds.check_labels()?;
    Ok(ds)
}
