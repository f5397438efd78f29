//! Dataset export/import: one directory per class, 8-bit RGB PNG images,
//! single-channel PNG masks with class ids as pixel values, plus a TOML
//! manifest recording seed, resolution and class names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage};
use crate::tensor::{Mask, Tensor};
use crate::{Error, Result};

const MANIFEST_FORMAT: &str = "protoseg-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    resolution: usize,
    classes: BTreeMap<String, String>,
}

fn class_dir_name(id: u16, name: &str) -> String {
    format!("class_{id:02}_{name}")
}

pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: dataset.seed,
        resolution: dataset.resolution,
        classes: dataset
            .class_names
            .iter()
            .map(|(id, name)| (id.to_string(), name.clone()))
            .collect(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.toml"), text)?;

    let mut per_class_counter: BTreeMap<u16, usize> = BTreeMap::new();
    for img in &dataset.images {
        let owner = img.class_ids.iter().next().copied().unwrap_or(0);
        let name = dataset
            .class_names
            .get(&owner)
            .cloned()
            .unwrap_or_else(|| format!("class{owner}"));
        let class_dir = dir.join(class_dir_name(owner, &name));
        fs::create_dir_all(&class_dir)?;
        let index = per_class_counter.entry(owner).or_insert(0);

        let res = dataset.resolution;
        let mut rgb = RgbImage::new(res as u32, res as u32);
        let data = img.pixels.data();
        let n = res * res;
        for y in 0..res {
            for x in 0..res {
                let p = y * res + x;
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (data[p] * 255.0).round() as u8,
                        (data[n + p] * 255.0).round() as u8,
                        (data[2 * n + p] * 255.0).round() as u8,
                    ]),
                );
            }
        }
        rgb.save(class_dir.join(format!("img_{index:04}.png")))
            .map_err(|e| Error::Data(format!("png save: {e}")))?;

        let mut gray = GrayImage::new(res as u32, res as u32);
        for y in 0..res {
            for x in 0..res {
                let v = img.mask.get(y, x);
                debug_assert!(v <= u16::from(u8::MAX));
                gray.put_pixel(x as u32, y as u32, image::Luma([v as u8]));
            }
        }
        gray.save(class_dir.join(format!("mask_{index:04}.png")))
            .map_err(|e| Error::Data(format!("png save: {e}")))?;
        *index += 1;
    }
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("manifest parse: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Data(format!(
            "unsupported dataset format tag {:?}",
            manifest.format
        )));
    }
    let class_names: BTreeMap<u16, String> = manifest
        .classes
        .iter()
        .map(|(id, name)| {
            id.parse::<u16>()
                .map(|id| (id, name.clone()))
                .map_err(|e| Error::Data(format!("bad class id {id:?}: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut images: Vec<LabeledImage> = Vec::new();
    for (&id, name) in &class_names {
        let class_dir = dir.join(class_dir_name(id, name));
        if !class_dir.is_dir() {
            continue;
        }
        let mut entries: Vec<_> = fs::read_dir(&class_dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("img_") && n.ends_with(".png"))
            .collect();
        entries.sort();
        for img_name in entries {
            let mask_name = img_name.replacen("img_", "mask_", 1);
            let rgb = image::open(class_dir.join(&img_name))
                .map_err(|e| Error::Data(format!("png load {img_name}: {e}")))?
                .to_rgb8();
            let gray = image::open(class_dir.join(&mask_name))
                .map_err(|e| Error::Data(format!("png load {mask_name}: {e}")))?
                .to_luma8();
            let (w, h) = rgb.dimensions();
            let (hw, n) = ((h as usize, w as usize), (h * w) as usize);
            let mut pixels = Tensor::zeros(&[3, hw.0, hw.1]);
            let data = pixels.data_mut();
            let mut mask = Mask::zeros(hw.0, hw.1);
            for y in 0..hw.0 {
                for x in 0..hw.1 {
                    let p = y * hw.1 + x;
                    let px = rgb.get_pixel(x as u32, y as u32);
                    data[p] = px.0[0] as f64 / 255.0;
                    data[n + p] = px.0[1] as f64 / 255.0;
                    data[2 * n + p] = px.0[2] as f64 / 255.0;
                    mask.set(y, x, gray.get_pixel(x as u32, y as u32).0[0] as u16);
                }
            }
            images.push(LabeledImage::new(pixels, mask));
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no images found under {}", dir.display())));
    }
    let resolution = manifest.resolution;
    Ok(Dataset::new(images, resolution, manifest.seed, class_names))
}
