//! Dataset manifests: one record per line, tab-separated paths, resolved
//! relative to the manifest's own directory.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geo::{read_world_file, GeoError};
use crate::raster::{read_image, MaskPair, RasterError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("referenced file missing: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub graph: Option<PathBuf>,
    pub world: Option<PathBuf>,
}

impl ManifestRecord {
    pub fn new(image: impl Into<PathBuf>, mask: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
            mask: mask.into(),
            graph: None,
            world: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// image<TAB>mask[<TAB>graph[<TAB>world]]; empty optional fields stay
    /// as empty columns when a later one is present.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut fields = vec![
                r.image.to_string_lossy().into_owned(),
                r.mask.to_string_lossy().into_owned(),
                r.graph
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                r.world
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            ];
            while fields.len() > 2 && fields.last().is_some_and(String::is_empty) {
                fields.pop();
            }
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 4 {
                return Err(ManifestError::Parse(format!(
                    "line {}: expected 2 to 4 tab-separated paths, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(ManifestError::Parse(format!(
                    "line {}: image and mask paths are required",
                    lineno + 1
                )));
            }
            let opt = |i: usize| -> Option<PathBuf> {
                fields
                    .get(i)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
            };
            records.push(ManifestRecord {
                image: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                graph: opt(2),
                world: opt(3),
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Load every record as an image/mask pair, resolving paths against
    /// `base`. Fails on the first missing file or size mismatch. A world
    /// file, when present, supplies the geotransform of both rasters.
    pub fn load_pairs(&self, base: &Path) -> Result<Vec<MaskPair>, ManifestError> {
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let image_path = base.join(&r.image);
            let mask_path = base.join(&r.mask);
            for p in [&image_path, &mask_path] {
                if !p.is_file() {
                    return Err(ManifestError::MissingFile(p.clone()));
                }
            }
            let mut image = read_image(&image_path)?;
            let mut mask = read_image(&mask_path)?;
            if let Some(w) = &r.world {
                let world_path = base.join(w);
                if !world_path.is_file() {
                    return Err(ManifestError::MissingFile(world_path));
                }
                let gt = read_world_file(&world_path)?;
                image.geo = Some(gt.clone());
                mask.geo = Some(gt);
            }
            out.push(MaskPair::new(image, mask)?);
        }
        Ok(out)
    }
}
