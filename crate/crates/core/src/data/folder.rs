use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::raster::image_to_latent;
use super::LatentDataset;
use crate::error::{Error, Result};
use crate::schedule::LatentShape;
use crate::seed;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FolderOptions {
    /// Undecodable files tolerated (each logged) before ingestion fails.
    pub max_skipped: usize,
}

impl Default for FolderOptions {
    fn default() -> Self {
        Self { max_skipped: 16 }
    }
}

fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(path).map_err(|e| {
        Error::Ingestion(format!("cannot read dataset folder {}: {e}", path.display()))
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes every raster file in `path` (lexicographic order), then draws a
/// seeded subset of `limit` usable images, kept in file order.
pub fn load_image_folder(
    path: &Path,
    shape: LatentShape,
    limit: usize,
    seed_: u64,
    options: &FolderOptions,
) -> Result<LatentDataset> {
    if limit == 0 {
        return Err(Error::invalid("image limit must be positive"));
    }
    let files = list_images(path)?;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut skipped = 0;
    for file in &files {
        let decoded = std::fs::read(file)
            .map_err(|e| e.to_string())
            .and_then(|bytes| image::load_from_memory(&bytes).map_err(|e| e.to_string()));
        match decoded {
            Ok(img) => {
                rows.push(image_to_latent(&img, shape)?);
                ids.push(
                    file.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
            }
            Err(e) => {
                skipped += 1;
                log::warn!("skipping {}: {e}", file.display());
                if skipped > options.max_skipped {
                    return Err(Error::Ingestion(format!(
                        "more than {} unreadable images in {}",
                        options.max_skipped,
                        path.display()
                    )));
                }
            }
        }
    }
    if rows.len() < limit {
        return Err(Error::Ingestion(format!(
            "{} has {} usable images, {limit} requested",
            path.display(),
            rows.len()
        )));
    }
    let mut rng = seed::stream(seed_, "data/subsample");
    let mut chosen = rand::seq::index::sample(&mut rng, rows.len(), limit).into_vec();
    chosen.sort_unstable();

    let mut x = Array2::zeros((limit, shape.numel()));
    for (r, &i) in chosen.iter().enumerate() {
        x.row_mut(r).assign(&rows[i]);
    }
    Ok(LatentDataset {
        x,
        shape,
        labels: None,
        ids: chosen.iter().map(|&i| ids[i].clone()).collect(),
    })
}
