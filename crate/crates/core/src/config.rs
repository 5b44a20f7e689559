//! Run configuration files.
//!
//! ```toml
//! format = 1
//! manifest = "data/manifest.toml"
//! output_dir = "runs/first"
//!
//! [model]
//! depth = 4
//! base_width = 32
//!
//! [train]
//! epochs = 351
//! seed = 7            # drawn and written back when absent
//!
//! [train.sampler]
//! min_positive = 500
//!
//! [train.loss]
//! kind = "dice"
//! ```
//!
//! Relative paths resolve against the file's directory. Patch sizes and the
//! context margin always come from the manifest geometry.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PatchGeometry;
use crate::trainer::TrainConfig;
use crate::unet::ModelConfig;

pub const RUN_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format: u32,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(manifest: PathBuf, output_dir: PathBuf, model: ModelConfig, train: TrainConfig) -> Self {
        Self { format: RUN_FORMAT, manifest, output_dir, model, train }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        if cfg.format != RUN_FORMAT {
            return Err(Error::Config(format!(
                "{}: unsupported run config format {} (expected {RUN_FORMAT})",
                origin.display(),
                cfg.format
            )));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Read, validate and anchor relative paths at the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        for p in [&mut cfg.manifest, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Draw a seed when none is given.
    pub fn resolve_seed(&mut self) -> u64 {
        *self.train.seed.get_or_insert_with(|| rand::rng().random())
    }

    /// Take patch sizes from the manifest and check the depth agrees.
    pub fn apply_geometry(&mut self, geometry: &PatchGeometry) -> Result<()> {
        let depth = geometry.depth()?;
        if depth != self.model.depth {
            return Err(Error::Geometry(format!(
                "manifest geometry {}x{} → {}x{} fits depth {depth}, model has depth {}",
                geometry.output_w, geometry.output_h, geometry.input_w, geometry.input_h, self.model.depth
            )));
        }
        let s = &mut self.train.sampler;
        s.patch_w = geometry.output_w;
        s.patch_h = geometry.output_h;
        s.margin = geometry.margin();
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = RunConfig::parse("format = 1\nmanifest = \"m.toml\"\noutput_dir = \"out\"\n", Path::new("x")).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.epochs, 351);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.seed, None);
    }

    #[test]
    fn resolved_roundtrip() {
        let mut c = RunConfig::new("m.toml".into(), "out".into(), ModelConfig::half_width(), TrainConfig::default());
        let seed = c.resolve_seed();
        let back = RunConfig::parse(&c.to_toml().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, Some(seed));
    }

    #[test]
    fn rejects_bad_values() {
        let base = "format = 1\nmanifest = \"m\"\noutput_dir = \"o\"\n";
        assert!(RunConfig::parse(&format!("{base}[train]\nvalidation_fraction = 1.5\n"), Path::new("x")).is_err());
        assert!(RunConfig::parse(&format!("{base}[train]\nbogus = 1\n"), Path::new("x")).is_err());
        assert!(RunConfig::parse("format = 2\nmanifest = \"m\"\noutput_dir = \"o\"\n", Path::new("x")).is_err());
    }

    #[test]
    fn geometry_must_match_depth() {
        let mut c = RunConfig::new("m".into(), "o".into(), ModelConfig::full_width(), TrainConfig::default());
        c.apply_geometry(&PatchGeometry::default()).unwrap();
        assert_eq!((c.train.sampler.patch_w, c.train.sampler.margin), (388, 92));
        let small = PatchGeometry { output_w: 100, output_h: 100, input_w: 188, input_h: 188 };
        assert!(c.apply_geometry(&small).is_err());
    }
}
