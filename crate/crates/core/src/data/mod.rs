//! Datasets, IDX files, the synthetic few-shot generator, class splits
//! and class-sequential streams.

mod idx;
mod stream;
mod synthetic;

pub use idx::{load_idx, load_mnist_dir, write_idx};
pub use stream::{make_class_stream, ClassStream};
pub use synthetic::{make_synthetic_fewshot, SyntheticConfig};

use rand::seq::SliceRandom;

use crate::error::{FusionError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Labelled images, `N×C×H×W` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let &[n, _, _, _] = images.shape() else {
            return Err(FusionError::Dimension(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        };
        if n == 0 {
            return Err(FusionError::Contract("a dataset needs at least one sample".into()));
        }
        if labels.len() != n {
            return Err(FusionError::Consistency(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(FusionError::Index(format!(
                "label {bad} with class_count {class_count}"
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(FusionError::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.item(i)
    }

    /// Sample indices of one class, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of samples per class.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let images = self.images.select(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.class_count, name)
    }

    /// Keeps only `classes`, relabelled to their position in that list.
    pub fn restrict_classes(&self, classes: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let mut map = vec![None; self.class_count];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.class_count {
                return Err(FusionError::Index(format!(
                    "class {old} of {}",
                    self.class_count
                )));
            }
            map[old] = Some(new);
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| map[self.labels[i]].is_some()).collect();
        if keep.is_empty() {
            return Err(FusionError::Contract("class selection is empty".into()));
        }
        let images = self.images.select(&keep)?;
        let labels = keep.iter().map(|&i| map[self.labels[i]].unwrap()).collect();
        Dataset::new(images, labels, classes.len(), name)
    }
}

/// Disjoint class partition of a dataset.
#[derive(Debug, Clone)]
pub struct ClassSplit {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    /// Original class ids of each split, in relabelled order.
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Randomly partitions classes into train/val/test and relabels each part to `0..k`.
pub fn split_classes(
    dataset: &Dataset,
    train_classes: usize,
    val_classes: usize,
    test_classes: usize,
    seed: u64,
) -> Result<ClassSplit> {
    let requested = train_classes + val_classes + test_classes;
    if requested > dataset.class_count() {
        return Err(FusionError::Contract(format!(
            "requested {requested} classes from a dataset with {}",
            dataset.class_count()
        )));
    }
    if train_classes == 0 || test_classes == 0 {
        return Err(FusionError::Contract(
            "train and test splits need at least one class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.class_count()).collect();
    order.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let part = |range: std::ops::Range<usize>| {
        let mut classes = order[range].to_vec();
        classes.sort_unstable();
        classes
    };
    let tr = part(0..train_classes);
    let va = part(train_classes..train_classes + val_classes);
    let te = part(train_classes + val_classes..requested);
    let name = dataset.name();
    Ok(ClassSplit {
        train: dataset.restrict_classes(&tr, format!("{name}-train"))?,
        val: if va.is_empty() {
            None
        } else {
            Some(dataset.restrict_classes(&va, format!("{name}-val"))?)
        },
        test: dataset.restrict_classes(&te, format!("{name}-test"))?,
        train_classes: tr,
        val_classes: va,
        test_classes: te,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_classes: usize, per_class: usize) -> Dataset {
        let n = n_classes * per_class;
        let images = Tensor::new(
            vec![n, 1, 2, 2],
            (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|i| i / per_class).collect();
        Dataset::new(images, labels, n_classes, "toy").unwrap()
    }

    #[test]
    fn rejects_bad_pixels_and_labels() {
        let img = Tensor::full(&[1, 1, 1, 1], 1.5);
        assert!(Dataset::new(img, vec![0], 1, "x").is_err());
        let img = Tensor::full(&[1, 1, 1, 1], 0.5);
        assert!(Dataset::new(img, vec![2], 2, "x").is_err());
    }

    #[test]
    fn split_is_disjoint_and_relabelled() {
        let d = toy(10, 3);
        let s = split_classes(&d, 5, 2, 3, 9).unwrap();
        let mut all: Vec<usize> = s
            .train_classes
            .iter()
            .chain(&s.val_classes)
            .chain(&s.test_classes)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10);
        assert_eq!(s.train.class_count(), 5);
        assert_eq!(s.train.len(), 15);
        assert!(s.test.labels().iter().all(|&l| l < 3));
        let again = split_classes(&d, 5, 2, 3, 9).unwrap();
        assert_eq!(again.train_classes, s.train_classes);
    }

    #[test]
    fn oversized_split_request_fails() {
        let d = toy(4, 2);
        assert!(matches!(
            split_classes(&d, 2, 2, 1, 0),
            Err(FusionError::Contract(_))
        ));
    }
}
