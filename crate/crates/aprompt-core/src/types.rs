//! Shared domain types: scenes, instance maps, and prompt sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label map plus per-instance class ids.
///
/// Label 0 is background; labels `1..=n_instances` are instances and must be
/// contiguous. `classes[i]` is the class of instance `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    classes: Vec<usize>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, classes: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        let n = classes.len() as u32;
        if labels.iter().any(|&l| l > n) {
            return Err(Error::Consistency(format!(
                "label map contains ids above instance count {n}"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            classes,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            classes: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label_at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn n_instances(&self) -> usize {
        self.classes.len()
    }

    /// Class of instance `id` (1-based label).
    pub fn class_of(&self, id: u32) -> usize {
        self.classes[(id - 1) as usize]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Pixel area of every instance, indexed by `id - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.classes.len()];
        for &l in &self.labels {
            if l > 0 {
                areas[(l - 1) as usize] += 1;
            }
        }
        areas
    }

    /// Keeps only instances of one class, relabeling contiguously.
    pub fn restrict_to_class(&self, class_id: usize) -> InstanceMap {
        let mut remap = vec![0u32; self.classes.len() + 1];
        let mut classes = Vec::new();
        for (i, &c) in self.classes.iter().enumerate() {
            if c == class_id {
                classes.push(c);
                remap[i + 1] = classes.len() as u32;
            }
        }
        let labels = self.labels.iter().map(|&l| remap[l as usize]).collect();
        InstanceMap {
            height: self.height,
            width: self.width,
            labels,
            classes,
        }
    }
}

/// One point prompt: image-frame coordinates, class, and a confidence score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Exported point prompts for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.prompts.iter().map(|p| [p.x, p.y]).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.prompts.iter().map(|p| p.class_id).collect()
    }
}

/// An image with full ground truth: instance map, centroids, and classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// RGB image as a `[3, H, W]` tensor with values in `[0, 1]`.
    pub image: Tensor,
    pub instance_map: InstanceMap,
    /// Instance centroids `(x, y)`, aligned with `classes`.
    pub points: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.instance_map.height()
    }

    pub fn width(&self) -> usize {
        self.instance_map.width()
    }

    pub fn n_instances(&self) -> usize {
        self.points.len()
    }

    /// Ground-truth prompts at the annotated centroids with unit score.
    pub fn gt_prompts(&self) -> PromptSet {
        PromptSet {
            prompts: self
                .points
                .iter()
                .zip(&self.classes)
                .map(|(p, &c)| Prompt {
                    x: p[0],
                    y: p[1],
                    class_id: c,
                    score: 1.0,
                })
                .collect(),
        }
    }

    /// Checks every structural invariant by brute force over pixels.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.classes.len() != n {
            return Err(Error::Consistency(format!(
                "{} points vs {} classes",
                n,
                self.classes.len()
            )));
        }
        if self.instance_map.n_instances() != n {
            return Err(Error::Consistency(format!(
                "instance map declares {} instances, annotations have {}",
                self.instance_map.n_instances(),
                n
            )));
        }
        if self.image.shape() != [3, self.height(), self.width()] {
            return Err(Error::Shape(format!(
                "image shape {:?} vs map {}x{}",
                self.image.shape(),
                self.height(),
                self.width()
            )));
        }
        let mut seen = vec![false; n + 1];
        for &l in self.instance_map.labels() {
            if l as usize > n {
                return Err(Error::Consistency(format!(
                    "label {l} above instance count {n}"
                )));
            }
            seen[l as usize] = true;
        }
        for (i, s) in seen.iter().enumerate().skip(1) {
            if !s {
                return Err(Error::Consistency(format!("label {i} has empty support")));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            let x = p[0].round() as isize;
            let y = p[1].round() as isize;
            if x < 0 || y < 0 || x as usize >= self.width() || y as usize >= self.height() {
                return Err(Error::Consistency(format!("point {i} outside image")));
            }
            if self.instance_map.label_at(y as usize, x as usize) != (i + 1) as u32 {
                return Err(Error::Consistency(format!(
                    "point {i} not inside the support of instance {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restrict_to_class_relabels_contiguously() {
        let labels = vec![
            0, 1, 1, 0, //
            2, 2, 0, 3, //
        ];
        let m = InstanceMap::new(2, 4, labels, vec![0, 1, 0]).unwrap();
        let r = m.restrict_to_class(0);
        assert_eq!(r.n_instances(), 2);
        assert_eq!(r.labels(), &[0, 1, 1, 0, 0, 0, 0, 2]);
        assert_eq!(r.classes(), &[0, 0]);
    }

    #[test]
    fn instance_map_rejects_stray_labels() {
        assert!(InstanceMap::new(1, 2, vec![0, 5], vec![0]).is_err());
    }

    #[test]
    fn areas_counts_pixels() {
        let m = InstanceMap::new(2, 2, vec![1, 1, 2, 0], vec![0, 1]).unwrap();
        assert_eq!(m.areas(), vec![2, 1]);
    }
}
