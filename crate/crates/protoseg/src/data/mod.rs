//! Episodic data pipeline: deterministic synthetic-shapes dataset, fold
//! splits over class ids, N-way K-shot episode sampling, and augmentation.

mod augment;
mod io;
mod shapes;

pub use augment::{augment, AugConfig};
pub use io::{export_dataset, import_dataset};
pub use shapes::{generate_synthetic_dataset, shape_family_names, NUM_SHAPE_FAMILIES};

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Mask, Tensor};
use crate::{Error, Result};

/// An image with its per-pixel class-id mask (0 = background).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledImage {
    /// [3, H, W] values in [0, 1].
    pub pixels: Tensor,
    pub mask: Mask,
    /// Foreground class ids present in the mask.
    pub class_ids: BTreeSet<u16>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, mask: Mask) -> Self {
        assert_eq!(pixels.shape()[1], mask.height());
        assert_eq!(pixels.shape()[2], mask.width());
        let class_ids = mask.foreground_labels().into_iter().collect();
        LabeledImage { pixels, mask, class_ids }
    }
}

/// An indexed pool of labeled images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub resolution: usize,
    pub seed: u64,
    pub class_names: BTreeMap<u16, String>,
    by_class: BTreeMap<u16, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        images: Vec<LabeledImage>,
        resolution: usize,
        seed: u64,
        class_names: BTreeMap<u16, String>,
    ) -> Self {
        let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            for &c in &img.class_ids {
                by_class.entry(c).or_default().push(i);
            }
        }
        Dataset { images, resolution, seed, class_names, by_class }
    }

    pub fn class_ids(&self) -> BTreeSet<u16> {
        self.by_class.keys().copied().collect()
    }

    /// Indices of images containing class `c`, in ascending order.
    pub fn images_for_class(&self, c: u16) -> &[usize] {
        self.by_class.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A class-disjoint train/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_classes: BTreeSet<u16>,
    pub test_classes: BTreeSet<u16>,
}

/// Partition sorted class ids into `num_folds` contiguous blocks; block
/// `fold_index` becomes the test classes and the rest train. Block sizes
/// differ by at most one.
pub fn split_folds(
    class_ids: &BTreeSet<u16>,
    num_folds: usize,
    fold_index: usize,
) -> Result<FoldSplit> {
    if num_folds == 0 || num_folds > class_ids.len() {
        return Err(Error::Data(format!(
            "cannot split {} classes into {num_folds} folds",
            class_ids.len()
        )));
    }
    if fold_index >= num_folds {
        return Err(Error::Data(format!(
            "fold index {fold_index} out of range for {num_folds} folds"
        )));
    }
    let sorted: Vec<u16> = class_ids.iter().copied().collect();
    let n = sorted.len();
    let base = n / num_folds;
    let rem = n % num_folds;
    let block_start = |i: usize| i * base + i.min(rem);
    let start = block_start(fold_index);
    let end = block_start(fold_index + 1);
    let test_classes: BTreeSet<u16> = sorted[start..end].iter().copied().collect();
    let train_classes: BTreeSet<u16> =
        sorted.iter().copied().filter(|c| !test_classes.contains(c)).collect();
    Ok(FoldSplit { fold_index, train_classes, test_classes })
}

/// One support example: the image plus a binary mask per episode class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportExample {
    pub image: Tensor,
    /// Parallel to `Episode::classes`; values in {0, 1}.
    pub class_masks: Vec<Mask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryExample {
    pub image: Tensor,
    /// Class-id mask restricted to the episode classes (others -> 0).
    pub mask: Mask,
}

/// One N-way K-shot task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    pub supports: Vec<SupportExample>,
    pub query: QueryExample,
    /// The N sampled class ids, in sampling order.
    pub classes: Vec<u16>,
    pub episode_seed: u64,
}

/// Sample an N-way K-shot episode from `allowed` classes. Draws one seed
/// from `rng` and derives everything else from it, so the recorded
/// `episode_seed` replays the episode exactly.
pub fn sample_episode(
    dataset: &Dataset,
    allowed: &BTreeSet<u16>,
    n_way: usize,
    k_shot: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let episode_seed = rng.next_u64();
    sample_episode_with_seed(dataset, allowed, n_way, k_shot, episode_seed)
}

pub fn sample_episode_with_seed(
    dataset: &Dataset,
    allowed: &BTreeSet<u16>,
    n_way: usize,
    k_shot: usize,
    episode_seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Data("n_way and k_shot must be positive".into()));
    }
    if allowed.len() < n_way {
        return Err(Error::Data(format!(
            "need {n_way} classes but only {} available",
            allowed.len()
        )));
    }
    let mut ep_rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let pool: Vec<u16> = allowed.iter().copied().collect();
    let classes: Vec<u16> = rand::seq::index::sample(&mut ep_rng, pool.len(), n_way)
        .iter()
        .map(|i| pool[i])
        .collect();

    let query_class = classes[rand::seq::index::sample(&mut ep_rng, n_way, 1).index(0)];
    let query_pool = dataset.images_for_class(query_class);
    if query_pool.is_empty() {
        return Err(Error::Data(format!("no images for class {query_class}")));
    }
    let query_idx = query_pool[rand::seq::index::sample(&mut ep_rng, query_pool.len(), 1).index(0)];

    // Supports must contain every episode class and must not reuse the query.
    let eligible: Vec<usize> = (0..dataset.images.len())
        .filter(|&i| i != query_idx && classes.iter().all(|c| dataset.images[i].class_ids.contains(c)))
        .collect();
    if eligible.len() < k_shot {
        return Err(Error::Data(format!(
            "insufficient images: need {k_shot} supports covering classes {:?}, have {}",
            classes,
            eligible.len()
        )));
    }
    let support_idx: Vec<usize> = rand::seq::index::sample(&mut ep_rng, eligible.len(), k_shot)
        .iter()
        .map(|i| eligible[i])
        .collect();

    let supports = support_idx
        .iter()
        .map(|&i| {
            let img = &dataset.images[i];
            SupportExample {
                image: img.pixels.clone(),
                class_masks: classes.iter().map(|&c| img.mask.binarize(c)).collect(),
            }
        })
        .collect();
    let query_img = &dataset.images[query_idx];
    let query = QueryExample {
        image: query_img.pixels.clone(),
        mask: query_img.mask.retain_labels(&classes),
    };

    Ok(Episode { supports, query, classes, episode_seed })
}
