//! On-disk dataset format.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/manifest.json
//! root/images/{id}.png   8-bit RGB
//! root/masks/{id}.png    16-bit single-channel instance labels
//! root/ann/{id}.json     {"points": [[x,y],...], "classes": [c,...], "n": N}
//! ```
//!
//! Instance maps and annotations round-trip exactly; images round-trip
//! within 8-bit quantization. Externally exported datasets in the same
//! layout load through the same path.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{InstanceMap, Scene};

/// One scene's files, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub ann: String,
}

/// Dataset index written to `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    points: Vec<[f64; 2]>,
    classes: Vec<usize>,
    n: usize,
}

fn load_err(path: &Path, message: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Writes scenes plus a manifest; the root is created if needed.
pub fn write_dataset(
    scenes: &[Scene],
    root: &Path,
    class_count: usize,
    class_names: Vec<String>,
    seed: u64,
) -> Result<DatasetManifest> {
    if class_names.len() != class_count {
        return Err(Error::Consistency(format!(
            "{} class names for {} classes",
            class_names.len(),
            class_count
        )));
    }
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    fs::create_dir_all(root.join("ann"))?;

    let mut entries = Vec::with_capacity(scenes.len());
    for (idx, scene) in scenes.iter().enumerate() {
        if let Some(&c) = scene.classes.iter().find(|&&c| c >= class_count) {
            return Err(Error::Consistency(format!(
                "scene {idx} has class {c}, dataset declares {class_count}"
            )));
        }
        if scene.n_instances() > u16::MAX as usize {
            return Err(Error::Consistency(format!(
                "scene {idx} has {} instances, 16-bit masks allow {}",
                scene.n_instances(),
                u16::MAX
            )));
        }
        let id = format!("{idx:05}");
        let entry = SceneEntry {
            id: id.clone(),
            image: format!("images/{id}.png"),
            mask: format!("masks/{id}.png"),
            ann: format!("ann/{id}.json"),
        };

        let (h, w) = (scene.height() as u32, scene.width() as u32);
        let mut rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(scene.image.at3(0, y as usize, x as usize)),
                    quantize(scene.image.at3(1, y as usize, x as usize)),
                    quantize(scene.image.at3(2, y as usize, x as usize)),
                ];
                rgb.put_pixel(x, y, Rgb(px));
            }
        }
        rgb.save(root.join(&entry.image))?;

        let mut mask = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let l = scene.instance_map.label_at(y as usize, x as usize);
                mask.put_pixel(x, y, Luma([l as u16]));
            }
        }
        mask.save(root.join(&entry.mask))?;

        let ann = Annotation {
            points: scene.points.clone(),
            classes: scene.classes.clone(),
            n: scene.n_instances(),
        };
        fs::write(root.join(&entry.ann), serde_json::to_vec_pretty(&ann)?)?;
        entries.push(entry);
    }

    let manifest = DatasetManifest {
        class_count,
        class_names,
        seed,
        scenes: entries,
    };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every scene referenced by `root/manifest.json` and validates the
/// scene invariants.
pub fn read_dataset(root: &Path) -> Result<(Vec<Scene>, DatasetManifest)> {
    let manifest_path = root.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| load_err(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| load_err(&manifest_path, e))?;

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        scenes.push(read_scene(root, entry, manifest.class_count)?);
    }
    Ok((scenes, manifest))
}

fn read_scene(root: &Path, entry: &SceneEntry, class_count: usize) -> Result<Scene> {
    let image_path = root.join(&entry.image);
    let img = image::open(&image_path).map_err(|e| load_err(&image_path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                image.set3(ch, y, x, px.0[ch] as f64 / 255.0);
            }
        }
    }

    let mask_path = root.join(&entry.mask);
    let mask_img = image::open(&mask_path).map_err(|e| load_err(&mask_path, e))?;
    let labels: Vec<u32> = match mask_img {
        DynamicImage::ImageLuma16(m) => {
            if (m.width() as usize, m.height() as usize) != (w, h) {
                return Err(load_err(&mask_path, "mask size differs from image"));
            }
            m.pixels().map(|p| p.0[0] as u32).collect()
        }
        DynamicImage::ImageLuma8(m) => {
            if (m.width() as usize, m.height() as usize) != (w, h) {
                return Err(load_err(&mask_path, "mask size differs from image"));
            }
            m.pixels().map(|p| p.0[0] as u32).collect()
        }
        _ => return Err(load_err(&mask_path, "mask must be single-channel PNG")),
    };

    let ann_path = root.join(&entry.ann);
    let ann_bytes = fs::read(&ann_path).map_err(|e| load_err(&ann_path, e))?;
    let ann: Annotation = serde_json::from_slice(&ann_bytes).map_err(|e| load_err(&ann_path, e))?;
    if ann.n != ann.points.len() || ann.n != ann.classes.len() {
        return Err(Error::Consistency(format!(
            "{}: n={} but {} points / {} classes",
            ann_path.display(),
            ann.n,
            ann.points.len(),
            ann.classes.len()
        )));
    }
    if let Some(&c) = ann.classes.iter().find(|&&c| c >= class_count) {
        return Err(Error::Consistency(format!(
            "{}: class {} exceeds dataset class count {}",
            ann_path.display(),
            c,
            class_count
        )));
    }

    let instance_map = InstanceMap::new(h, w, labels, ann.classes.clone())?;
    let scene = Scene {
        image,
        instance_map,
        points: ann.points,
        classes: ann.classes,
    };
    scene.validate()?;
    Ok(scene)
}

/// Paths of all files belonging to a manifest, for existence checks.
pub fn manifest_files(root: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    let mut files = vec![root.join("manifest.json")];
    for e in &manifest.scenes {
        files.push(root.join(&e.image));
        files.push(root.join(&e.mask));
        files.push(root.join(&e.ann));
    }
    files
}
