use asymgan_autograd::{Scalar, Tensor};
use rand::Rng;

use crate::error::Result;

/// History of generated images shown to a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool<S> {
    capacity: usize,
    images: Vec<Tensor<S>>,
}

impl<S: Scalar> ImagePool<S> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn from_images(capacity: usize, images: Vec<Tensor<S>>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<S>] {
        &self.images
    }

    /// Stores and returns `image` until full; afterwards returns it or, with
    /// probability 1/2, swaps it for a uniformly chosen stored image.
    pub fn query<R: Rng + ?Sized>(&mut self, image: Tensor<S>, rng: &mut R) -> Tensor<S> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.random::<f64>() < 0.5 {
            return image;
        }
        let i = rng.random_range(0..self.capacity);
        std::mem::replace(&mut self.images[i], image)
    }

    /// Queries every item of a batch independently.
    pub fn query_batch<R: Rng + ?Sized>(&mut self, batch: &Tensor<S>, rng: &mut R) -> Result<Tensor<S>> {
        let b = batch.shape()[0];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            out.push(self.query(batch.batch_slice(i, i + 1)?, rng));
        }
        Ok(Tensor::stack_batch(&out)?)
    }
}
