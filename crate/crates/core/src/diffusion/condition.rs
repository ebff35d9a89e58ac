use crate::data::ImageSample;
use crate::nn::Tensor;

/// Conditioning vector for the denoiser; the null condition is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    values: Vec<f64>,
    is_null: bool,
}

impl ConditionEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, is_null: false }
    }

    pub fn null(dim: usize) -> Self {
        Self { values: vec![0.0; dim], is_null: true }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `[1, dim]` row for the denoiser.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.values.len()], self.values.clone())
    }
}

/// Source of condition vectors for images.
pub trait ConditionProvider {
    fn dim(&self) -> usize;
    fn condition(&self, sample: &ImageSample) -> ConditionEmbedding;
}

/// Uses the sample's attribute vector (centered to `[-1, 1]`), null when absent.
#[derive(Clone, Copy, Debug)]
pub struct AttributeConditions {
    pub dim: usize,
}

impl ConditionProvider for AttributeConditions {
    fn dim(&self) -> usize {
        self.dim
    }

    fn condition(&self, sample: &ImageSample) -> ConditionEmbedding {
        match &sample.attributes {
            Some(a) => {
                let mut v: Vec<f64> = a.iter().map(|x| 2.0 * x - 1.0).collect();
                v.resize(self.dim, 0.0);
                ConditionEmbedding::new(v)
            }
            None => ConditionEmbedding::null(self.dim),
        }
    }
}

/// One-hot identity label folded into `dim` slots.
#[derive(Clone, Copy, Debug)]
pub struct LabelConditions {
    pub dim: usize,
}

impl ConditionProvider for LabelConditions {
    fn dim(&self) -> usize {
        self.dim
    }

    fn condition(&self, sample: &ImageSample) -> ConditionEmbedding {
        let mut v = vec![0.0; self.dim];
        v[sample.identity_id % self.dim] = 1.0;
        ConditionEmbedding::new(v)
    }
}

/// Always null; trains a purely unconditional model.
#[derive(Clone, Copy, Debug)]
pub struct NullConditions {
    pub dim: usize,
}

impl ConditionProvider for NullConditions {
    fn dim(&self) -> usize {
        self.dim
    }

    fn condition(&self, _: &ImageSample) -> ConditionEmbedding {
        ConditionEmbedding::null(self.dim)
    }
}
