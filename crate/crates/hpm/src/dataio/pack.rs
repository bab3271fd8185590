//! Dataset pack: a directory of tensor files plus `manifest.txt` with one
//! `path,label` record per line.

use crate::dataio::checkpoint::{load_tensor_file, save_tensor_file, NamedTensor};
use crate::dataio::synth::SampleRecord;
use crate::error::{HpmError, Result};
use crate::patchkit::{PatchGeometry, VisualTensor};
use std::fs;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn write_pack(dir: &Path, samples: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, rec) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.tns");
        let g = &rec.visual.geometry;
        let tensors = vec![
            NamedTensor {
                name: "visual".into(),
                shape: vec![g.frames, g.height, g.width, g.channels],
                data: rec.visual.data.clone(),
            },
            NamedTensor {
                name: "fg_mask".into(),
                shape: vec![rec.fg_mask.len()],
                data: rec.fg_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            },
        ];
        save_tensor_file(&dir.join(&file), &tensors)?;
        manifest.push_str(&format!("{file},{}\n", rec.label));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Load a pack, reinterpreting each sample under the caller's run geometry
/// (the stored T, H, W, C extents must match it).
pub fn read_pack(dir: &Path, geometry: &PatchGeometry) -> Result<Vec<SampleRecord>> {
    geometry.validate()?;
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.rsplit_once(',').ok_or_else(|| HpmError::Format {
            offset: lineno,
            msg: format!("manifest line {} lacks a label field", lineno + 1),
        })?;
        let label: usize = label.trim().parse().map_err(|_| HpmError::Format {
            offset: lineno,
            msg: format!("bad label '{label}' on manifest line {}", lineno + 1),
        })?;
        let tensors = load_tensor_file(&dir.join(file.trim()))?;
        let visual = tensors
            .iter()
            .find(|t| t.name == "visual")
            .ok_or_else(|| HpmError::Checkpoint(format!("{file} lacks a visual tensor")))?;
        let want = vec![geometry.frames, geometry.height, geometry.width, geometry.channels];
        if visual.shape != want {
            return Err(HpmError::Geometry(format!(
                "{file} has shape {:?}, run geometry expects {want:?}",
                visual.shape
            )));
        }
        let fg = tensors
            .iter()
            .find(|t| t.name == "fg_mask")
            .ok_or_else(|| HpmError::Checkpoint(format!("{file} lacks an fg_mask tensor")))?;
        if fg.data.len() != geometry.num_patches() {
            return Err(HpmError::Geometry(format!(
                "{file} fg_mask has {} entries, run geometry expects {}",
                fg.data.len(),
                geometry.num_patches()
            )));
        }
        samples.push(SampleRecord {
            visual: VisualTensor::new(*geometry, visual.data.clone())?,
            label,
            fg_mask: fg.data.iter().map(|&v| v != 0.0).collect(),
        });
    }
    if samples.is_empty() {
        return Err(HpmError::Contract(format!("pack at {} is empty", dir.display())));
    }
    Ok(samples)
}
