//! Run configuration files.
//!
//! ```toml
//! images = ["lge.vhdr", "t2.vhdr"]
//! atlas = ["atlas_0.vhdr", "atlas_1.vhdr", "atlas_2.vhdr"]
//! domain = "truth_labels.vhdr"   # optional; default is the first image's lattice
//! truth = "truth_labels.vhdr"    # optional; needed by `ablate`
//! output = "out"
//! seed = 1
//!
//! [labels]
//! ids = [0, 1, 2]
//! components = [[2, 2, 1], [2, 2, 1]]   # per image, per label
//!
//! [schedule]
//! preset = "mvmm-full"
//! ```
//!
//! Relative paths are taken from the directory of the config file.

use std::path::{Path, PathBuf};

use mvmm_core::icm::{Schedule, ScheduleConfig};
use mvmm_core::io;
use mvmm_core::model::{AtlasPrior, LabelConfig, Problem};
use mvmm_core::volume::{LabelVolume, MultivariateImageSet};
use mvmm_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsBlock {
    pub ids: Vec<u16>,
    /// `components[i][k]`: mixture size of label `ids[k]` in image `i`.
    pub components: Vec<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub images: Vec<PathBuf>,
    /// One probability map per entry of `labels.ids`, in the same order.
    pub atlas: Vec<PathBuf>,
    #[serde(default)]
    pub domain: Option<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Also write one posterior volume per label.
    #[serde(default)]
    pub write_posteriors: bool,
    /// Labels scored by `ablate`; defaults to every label but the first.
    #[serde(default)]
    pub eval_labels: Option<Vec<u16>>,
    pub labels: LabelsBlock,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

/// A config with every input loaded and checked.
pub struct Loaded {
    pub config: RunConfig,
    pub source: PathBuf,
    pub names: Vec<String>,
    pub problem: Problem,
    pub schedule: Schedule,
    pub truth: Option<LabelVolume>,
}

impl RunConfig {
    pub fn parse(text: &str, src: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| io::toml_error(&e, text, src))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.images.iter_mut().for_each(fix);
        self.atlas.iter_mut().for_each(fix);
        self.domain.iter_mut().for_each(fix);
        self.truth.iter_mut().for_each(fix);
        fix(&mut self.output);
    }

    fn check_paths(&self) -> Result<()> {
        let inputs = self.images.iter().chain(&self.atlas).chain(&self.domain).chain(&self.truth);
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.output.exists() && !self.output.is_dir() {
            return Err(Error::Config(format!("output {} is not a directory", self.output.display())));
        }
        Ok(())
    }

    pub fn eval_labels(&self) -> Vec<u16> {
        self.eval_labels
            .clone()
            .unwrap_or_else(|| self.labels.ids.iter().skip(1).copied().collect())
    }
}

/// Reads, validates and loads everything a config refers to. Nothing is written.
pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut config = RunConfig::parse(&text, &path.display().to_string())?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    config.check_paths()?;
    if config.images.is_empty() {
        return Err(Error::Config("`images` is empty".into()));
    }
    if config.atlas.len() != config.labels.ids.len() {
        return Err(Error::Config(format!(
            "{} atlas maps for {} labels",
            config.atlas.len(),
            config.labels.ids.len()
        )));
    }
    if config.labels.components.len() != config.images.len() {
        return Err(Error::Config(format!(
            "component table has {} rows for {} images",
            config.labels.components.len(),
            config.images.len()
        )));
    }
    for k in config.eval_labels() {
        if !config.labels.ids.contains(&k) {
            return Err(Error::Config(format!("evaluation label {k} is not a model label")));
        }
    }
    let images = config.images.iter().map(|p| io::read_volume(p)).collect::<Result<Vec<_>>>()?;
    let images = match &config.domain {
        Some(d) => {
            let (lattice, _) = io::parse_volume_header(
                &std::fs::read_to_string(d).map_err(|e| Error::Io {
                    path: d.display().to_string(),
                    source: e,
                })?,
                &d.display().to_string(),
            )?;
            MultivariateImageSet::with_common(images, lattice)?
        }
        None => MultivariateImageSet::new(images)?,
    };
    let maps = config.atlas.iter().map(|p| io::read_volume(p)).collect::<Result<Vec<_>>>()?;
    let mut atlas = AtlasPrior::new(maps)?;
    atlas.normalize();
    let labels = LabelConfig::new(config.labels.ids.clone(), config.labels.components.clone())?;
    let problem = Problem::new(images, atlas, labels)?;
    let schedule = config.schedule.resolve()?;
    let truth = config.truth.as_deref().map(io::read_labels).transpose()?;
    if let Some(t) = &truth {
        if t.lattice != problem.images.common {
            return Err(Error::Config("truth labels are not on the segmentation domain".into()));
        }
    }
    let names = config
        .images
        .iter()
        .map(|p| p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    Ok(Loaded {
        config,
        source: path.to_path_buf(),
        names,
        problem,
        schedule,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
images = ["a.vhdr"]
atlas = ["b.vhdr", "c.vhdr"]
output = "out"
[labels]
ids = [0, 1]
components = [[1, 1]]
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::parse(MINIMAL, "c").unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.eval_labels(), vec![1]);
        assert!(c.schedule.resolve().unwrap().enable_ffd);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = format!("{MINIMAL}bogus = 3\n");
        let e = RunConfig::parse(&text, "c.toml").unwrap_err().to_string();
        assert!(e.starts_with("c.toml:"), "{e}");
        assert!(e.contains("bogus"), "{e}");
        let text = MINIMAL.replace("[labels]", "[schedule]\nfoo = 1\n[labels]");
        assert!(RunConfig::parse(&text, "c").is_err());
    }
}
