//! Minimal CPU network engine: tensors, kernels, the hourglass model and
//! its optimizer.

mod model;
pub mod ops;
mod optim;

pub use model::{Forward, ForwardCache, Mode, ModelConfig, ModelParameters, ParamEntry, PoseNetwork};
pub use optim::{Adam, OptimizerConfig};

/// Dense `[N, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Elements per leading index.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Batches CHW images; all must share one shape.
    pub fn from_images(images: &[&crate::data::Image]) -> Self {
        let first = images.first().expect("at least one image");
        let shape = [images.len(), first.channels, first.height, first.width];
        let mut data = Vec::with_capacity(shape.iter().product());
        for im in images {
            assert_eq!(
                (im.channels, im.height, im.width),
                (first.channels, first.height, first.width),
                "image shape mismatch"
            );
            data.extend(im.data.iter().map(|&v| v as f64));
        }
        Tensor { shape, data }
    }

    /// Stacks equally shaped items along the leading axis.
    pub fn stack(items: &[&[f64]], item_shape: [usize; 3]) -> Self {
        let len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * len);
        for it in items {
            assert_eq!(it.len(), len, "item length mismatch");
            data.extend_from_slice(it);
        }
        Tensor {
            shape: [items.len(), item_shape[0], item_shape[1], item_shape[2]],
            data,
        }
    }
}
