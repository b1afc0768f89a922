use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{majority_vote, resize_mask, resize_rgb, Dataset, ImageSample, LabelMask};
use crate::error::{Error, Result};

const RASTER_EXTS: &[&str] = &["png", "bmp", "tif", "tiff", "jpg", "jpeg"];
const MAX_RATERS: usize = 9;

/// Which annotation becomes the sample label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RaterSelector {
    /// `<id>_rater<k>` for one expert.
    Rater(u8),
    /// Plurality over every `<id>_rater<k>` present.
    MajorityVote,
    /// `<id>_clean`, the exact mask of a synthetic sample.
    Clean,
}

impl std::fmt::Display for RaterSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RaterSelector::Rater(k) => write!(f, "rater{k}"),
            RaterSelector::MajorityVote => f.write_str("majority-vote"),
            RaterSelector::Clean => f.write_str("clean"),
        }
    }
}

impl std::str::FromStr for RaterSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority-vote" | "majority" => Ok(RaterSelector::MajorityVote),
            "clean" | "clean-synthetic" => Ok(RaterSelector::Clean),
            _ => s
                .strip_prefix("rater")
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|&k| k >= 1)
                .map(RaterSelector::Rater)
                .ok_or_else(|| Error::Config(format!("unknown label target `{s}`"))),
        }
    }
}

impl TryFrom<String> for RaterSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RaterSelector> for String {
    fn from(r: RaterSelector) -> String {
        r.to_string()
    }
}

fn find_raster(dir: &Path, stem: &str) -> Option<PathBuf> {
    RASTER_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Path a mask with the given suffix is written to (`<dir>/<stem>_<suffix>.png`).
pub fn mask_path(dir: &Path, stem: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{stem}_{suffix}.png"))
}

fn load_label(dir: &Path, stem: &str, id: &str, rater: RaterSelector) -> Result<LabelMask> {
    let load = |suffix: &str| -> Result<LabelMask> {
        let path = find_raster(dir, &format!("{stem}_{suffix}")).ok_or_else(|| {
            Error::MissingMask {
                id: id.to_string(),
                path: dir.join(format!("{stem}_{suffix}.png")),
            }
        })?;
        LabelMask::load(&path, id)
    };
    match rater {
        RaterSelector::Rater(k) => load(&format!("rater{k}")),
        RaterSelector::Clean => load("clean"),
        RaterSelector::MajorityVote => {
            let masks: Vec<LabelMask> = (1..=MAX_RATERS)
                .filter(|k| find_raster(dir, &format!("{stem}_rater{k}")).is_some())
                .map(|k| load(&format!("rater{k}")))
                .collect::<Result<_>>()?;
            if masks.is_empty() {
                return Err(Error::MissingMask {
                    id: id.to_string(),
                    path: dir.join(format!("{stem}_rater1.png")),
                });
            }
            majority_vote(&masks)
        }
    }
}

/// Loads every `<root>/<source>/<stem>_image.<ext>` with its selected mask.
///
/// Images are bilinearly resized to `side` and scaled to `[0, 1]`; masks are
/// resized nearest-neighbour. Sample ids are `<source>/<stem>`, and samples
/// are ordered by id. Channel standardization is left to the caller so the
/// statistics can be computed on the training split.
pub fn load_riga_split(
    root: &Path,
    sources: &[String],
    rater: RaterSelector,
    side: usize,
) -> Result<Dataset> {
    let mut entries = Vec::new();
    for source in sources {
        let dir = root.join(source);
        let listing = match fs::read_dir(&dir) {
            Ok(listing) => listing,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(Error::io_at(&dir, e)),
        };
        for entry in listing {
            let entry = entry.map_err(|e| Error::io_at(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some((stem, ext)) = name.rsplit_once('.') else {
                continue;
            };
            if !RASTER_EXTS.contains(&ext.to_ascii_lowercase().as_str()) {
                continue;
            }
            if let Some(stem) = stem.strip_suffix("_image") {
                entries.push((format!("{source}/{stem}"), dir.clone(), stem.to_string(), entry.path()));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut samples = Vec::with_capacity(entries.len());
    for (id, dir, stem, image_path) in entries {
        let label = load_label(&dir, &stem, &id, rater)?;
        let raw = image::open(&image_path)?.into_rgb8();
        let image = resize_rgb(&raw, side);
        let label = resize_mask(&label, side);
        samples.push(ImageSample::new(id, image, label)?);
    }
    Dataset::new(samples)
}
