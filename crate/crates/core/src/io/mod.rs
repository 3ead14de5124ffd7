//! File formats and reports: PGM images, the OCTM checkpoint container,
//! run configuration JSON, dataset directories, and metric reports.

pub mod checkpoint;
pub mod config;
pub mod pgm;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{MetricsReport, SegmentationSample};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{load_config, parse_config, RunConfig};
pub use pgm::{read_pgm, resize_mask_nearest, resize_to, write_pgm};

/// Write samples as `image_XXXX.pgm` / `mask_XXXX.pgm` pairs.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample<f32>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_pgm(&s.image, &dir.join(format!("image_{i:04}.pgm")))?;
        write_pgm(&s.mask, &dir.join(format!("mask_{i:04}.pgm")))?;
    }
    Ok(())
}

/// Load every `image_XXXX.pgm` / `mask_XXXX.pgm` pair in index order.
/// Masks are re-binarized at 0.5.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample<f32>>> {
    let mut indices: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("image_")
            .and_then(|r| r.strip_suffix(".pgm"))
        {
            if let Ok(i) = num.parse::<usize>() {
                indices.push((i, entry.path()));
            }
        }
    }
    indices.sort_by_key(|(i, _)| *i);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no image_XXXX.pgm files in {}",
            dir.display()
        )));
    }
    indices
        .into_iter()
        .map(|(i, img_path)| {
            let mask_path = dir.join(format!("mask_{i:04}.pgm"));
            let image = read_pgm(&img_path)?;
            let mask = read_pgm(&mask_path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            if image.shape() != mask.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i}: image {:?} vs mask {:?}",
                    image.shape(),
                    mask.shape()
                )));
            }
            Ok(SegmentationSample { image, mask })
        })
        .collect()
}

/// Deterministic JSON rendering of a metrics report.
pub fn report_json(r: &MetricsReport) -> String {
    serde_json::to_string_pretty(r).expect("report serialization cannot fail")
}

/// Aligned plain-text table of the same report.
pub fn report_table(r: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8}\n",
        "sample", "dice", "iou", "sen"
    ));
    for (i, s) in r.per_sample.iter().enumerate() {
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4}\n",
            i, s.dice, s.iou, s.sen
        ));
    }
    out.push_str(&format!(
        "{:<10} {:>8.4} {:>8.4} {:>8.4}\n",
        "micro", r.dice, r.iou, r.sen
    ));
    out.push_str(&format!(
        "samples: {}   trainable params: {}\n",
        r.n_samples, r.params
    ));
    out
}
