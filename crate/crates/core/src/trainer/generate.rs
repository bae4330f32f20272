//! Synthetic stand-in for a multi-institution collection: one partially
//! labeled phantom set per institution, an unlabeled pool and a fully
//! labeled evaluation split.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::GenerateConfig;
use crate::datasets::{
    generate_phantom, restrict_labels, write_manifest, ClassRegistry, Dataset, Image, LabelMap, PartialLabelSpec,
    PhantomSpec,
};
use crate::error::{Error, Result};

pub const REGISTRY_FILE: &str = "classes.txt";
pub const UNLABELED_NAME: &str = "unlabeled";
pub const EVAL_NAME: &str = "eval";

/// All generated splits, in memory.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub registry: ClassRegistry,
    pub labeled: Vec<Dataset>,
    pub unlabeled: Dataset,
    pub eval: Dataset,
}

/// Where [`write_synthetic`] put each split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLayout {
    pub registry: PathBuf,
    pub labeled: Vec<PathBuf>,
    pub unlabeled: PathBuf,
    pub eval: PathBuf,
}

impl SyntheticLayout {
    /// A `[data]` section pointing at these files, with paths relative to
    /// `base`.
    pub fn data_section(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            let p = p.strip_prefix(base).unwrap_or(p);
            format!("{:?}", p.to_string_lossy())
        };
        let labeled: Vec<String> = self.labeled.iter().map(|p| rel(p)).collect();
        format!(
            "[data]\nregistry = {}\nlabeled = [{}]\nunlabeled = [{}]\neval = {}\n",
            rel(&self.registry),
            labeled.join(", "),
            rel(&self.unlabeled),
            rel(&self.eval)
        )
    }
}

/// Distinct phantom seed per split so splits never share images.
fn split_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(split.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Images of one split; organs in `always` are present in every image.
fn phantoms(
    cfg: &GenerateConfig,
    registry: &ClassRegistry,
    count: usize,
    split: u64,
    always: &[u8],
) -> Result<(Vec<Image>, Vec<LabelMap>)> {
    let mut spec = cfg
        .phantom
        .clone()
        .unwrap_or_else(|| PhantomSpec::abdominal(cfg.side, count, 0));
    for &c in always {
        if let Some(shape) = spec.classes.get_mut(c as usize - 1) {
            shape.presence = 1.0;
        }
    }
    spec.count = count;
    spec.seed = split_seed(cfg.seed, split);
    Ok(generate_phantom(&spec, registry)?.into_iter().unzip())
}

fn institution_name(classes: &[String]) -> String {
    format!("site_{}", classes.join("_"))
}

/// Generates every split in memory. Deterministic in `cfg`.
pub fn synthesize(cfg: &GenerateConfig) -> Result<Synthetic> {
    let registry = ClassRegistry::new(cfg.classes.clone())?;
    if cfg.institutions.is_empty() {
        return Err(Error::validation("generate.institutions is empty"));
    }
    if cfg.labeled_per_institution == 0 || cfg.eval_count == 0 {
        return Err(Error::validation("generate needs at least one labeled and one eval image"));
    }
    let mut labeled = Vec::with_capacity(cfg.institutions.len());
    for (k, names) in cfg.institutions.iter().enumerate() {
        let classes = names
            .iter()
            .map(|n| {
                registry
                    .index_of(n)
                    .ok_or_else(|| Error::validation(format!("generate.institutions[{k}]: unknown class {n:?}")))
            })
            .collect::<Result<Vec<u8>>>()?;
        // A site annotating an organ only collects scans that show it.
        let (images, full) = phantoms(cfg, &registry, cfg.labeled_per_institution, k as u64, &classes)?;
        let spec = PartialLabelSpec::new(classes, &registry)?;
        let partial = full.iter().map(|l| restrict_labels(l, &spec)).collect();
        labeled.push(Dataset::from_parts(institution_name(names), Some(spec), images, Some(partial))?);
    }
    let n = cfg.institutions.len() as u64;
    let (images, _) = if cfg.unlabeled_count > 0 {
        phantoms(cfg, &registry, cfg.unlabeled_count, n, &[])?
    } else {
        (Vec::new(), Vec::new())
    };
    let unlabeled = Dataset::from_parts(UNLABELED_NAME, None, images, None)?;
    let (images, full) = phantoms(cfg, &registry, cfg.eval_count, n + 1, &[])?;
    let eval = Dataset::from_parts(EVAL_NAME, Some(PartialLabelSpec::full(&registry)), images, Some(full))?;
    Ok(Synthetic {
        registry,
        labeled,
        unlabeled,
        eval,
    })
}

/// Writes the registry and one manifest per split under `out`.
pub fn write_synthetic(data: &Synthetic, out: &Path) -> Result<SyntheticLayout> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let registry = out.join(REGISTRY_FILE);
    data.registry.save(&registry)?;
    let labeled = data
        .labeled
        .iter()
        .map(|d| write_manifest(out, d, &data.registry))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticLayout {
        registry,
        labeled,
        unlabeled: write_manifest(out, &data.unlabeled, &data.registry)?,
        eval: write_manifest(out, &data.eval, &data.registry)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerateConfig {
        GenerateConfig {
            side: 48,
            labeled_per_institution: 12,
            unlabeled_count: 4,
            eval_count: 3,
            ..GenerateConfig::default()
        }
    }

    #[test]
    fn institutions_annotate_only_their_organ() {
        let s = synthesize(&small()).unwrap();
        assert_eq!(s.labeled.len(), 3);
        for (k, ds) in s.labeled.iter().enumerate() {
            let want = (k + 1) as u8;
            assert_eq!(ds.spec().unwrap().annotated().iter().copied().collect::<Vec<_>>(), vec![want]);
            for lab in ds.labels.as_ref().unwrap() {
                assert!(lab.labels().iter().all(|&l| l == 0 || l == want));
                assert!(lab.labels().contains(&want), "site {k} image without its organ");
            }
        }
        assert!(s.eval.spec().unwrap().is_full(&s.registry));
        assert_eq!(s.unlabeled.len(), 4);
    }

    #[test]
    fn splits_do_not_share_images() {
        let s = synthesize(&small()).unwrap();
        assert_ne!(s.labeled[0].images[0], s.labeled[1].images[0]);
        assert_ne!(s.eval.images[0], s.unlabeled.images[0]);
    }
}
