//! Batch sources: in-memory tensors or PNGs on disk behind a bounded cache.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::Result;
use rand::RngCore;
use rayon::prelude::*;
use vdsnet_core::data::{augment_image, AugmentParams, Record};
use vdsnet_core::zoo::INPUT_EXTENT;
use vdsnet_core::Tensor;

use crate::fixtures::InMemorySet;
use crate::image_io::{load_image, Color};

/// Anything the trainer can draw mini-batches from.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<u8>;

    /// Samples `idx` as one batch, augmented when `augment` is given.
    fn batch(&self, idx: &[usize], augment: Option<&mut dyn RngCore>) -> Result<InMemorySet>;
}

fn apply_augmentation(set: &mut InMemorySet, rng: &mut dyn RngCore) {
    let s = set.images.shape().to_vec();
    let plane = s[1] * s[2] * s[3];
    let data = set.images.data_mut();
    for sample in data.chunks_mut(plane) {
        let p = AugmentParams::sample(rng);
        let out = augment_image(sample, s[1], s[2], s[3], &p);
        sample.copy_from_slice(&out);
    }
}

impl BatchSource for InMemorySet {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    fn batch(&self, idx: &[usize], augment: Option<&mut dyn RngCore>) -> Result<InMemorySet> {
        let mut set = self.select(idx);
        if let Some(rng) = augment {
            apply_augmentation(&mut set, rng);
        }
        Ok(set)
    }
}

struct Cache {
    capacity: usize,
    order: VecDeque<usize>,
    images: HashMap<usize, Arc<Vec<f32>>>,
}

impl Cache {
    fn get(&self, i: usize) -> Option<Arc<Vec<f32>>> {
        self.images.get(&i).cloned()
    }

    fn put(&mut self, i: usize, img: Arc<Vec<f32>>) {
        if self.capacity == 0 || self.images.contains_key(&i) {
            return;
        }
        if self.images.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.images.remove(&old);
            }
        }
        self.order.push_back(i);
        self.images.insert(i, img);
    }
}

/// Records whose images are decoded on demand from `image_dir`.
pub struct DiskDataset {
    records: Vec<Record>,
    image_dir: PathBuf,
    color: Color,
    cache: Mutex<Cache>,
}

impl DiskDataset {
    pub fn new(records: Vec<Record>, image_dir: &Path, color: Color, cache_images: usize) -> Self {
        Self {
            records,
            image_dir: image_dir.to_path_buf(),
            color,
            cache: Mutex::new(Cache {
                capacity: cache_images,
                order: VecDeque::new(),
                images: HashMap::new(),
            }),
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    fn image(&self, i: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(i) {
            return Ok(img);
        }
        let r = &self.records[i];
        let img = Arc::new(load_image(&self.image_dir.join(&r.image_index), self.color, &r.image_index)?);
        self.cache.lock().expect("cache lock").put(i, img.clone());
        Ok(img)
    }
}

impl BatchSource for DiskDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn labels(&self) -> Vec<u8> {
        self.records.iter().map(Record::binary_label).collect()
    }

    fn batch(&self, idx: &[usize], augment: Option<&mut dyn RngCore>) -> Result<InMemorySet> {
        let images: Vec<Arc<Vec<f32>>> = idx.par_iter().map(|&i| self.image(i)).collect::<Result<_>>()?;
        let c = self.color.channels();
        let mut data = Vec::with_capacity(idx.len() * c * INPUT_EXTENT * INPUT_EXTENT);
        let mut meta = Vec::with_capacity(idx.len() * 5);
        for (img, &i) in images.iter().zip(idx) {
            data.extend_from_slice(img);
            meta.extend(self.records[i].metadata()?.map(|v| v as f32));
        }
        let mut set = InMemorySet {
            images: Tensor::new(&[idx.len(), c, INPUT_EXTENT, INPUT_EXTENT], data)?,
            meta: Tensor::new(&[idx.len(), 5], meta)?,
            labels: idx.iter().map(|&i| self.records[i].binary_label()).collect(),
        };
        if let Some(rng) = augment {
            apply_augmentation(&mut set, rng);
        }
        Ok(set)
    }
}
