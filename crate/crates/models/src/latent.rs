//! Latent-space containers shared by the three stages.

use xct_nn::Tensor;

use crate::trainer::TrainError;

/// An h x w x d grid of n_z-dimensional vectors, optionally quantized.
/// Sites are stored i-fastest (`site = i + h*(j + w*k)`), vectors
/// contiguously per site.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub dims: (usize, usize, usize),
    pub n_z: usize,
    /// `[site][channel]`
    pub values: Vec<f64>,
    /// Codebook index per site; present iff the grid is quantized.
    pub indices: Option<Vec<usize>>,
}

impl LatentGrid {
    pub fn new(
        dims: (usize, usize, usize),
        n_z: usize,
        values: Vec<f64>,
        indices: Option<Vec<usize>>,
    ) -> Result<Self, TrainError> {
        let sites = dims.0 * dims.1 * dims.2;
        if values.len() != sites * n_z {
            return Err(TrainError::shape(format!(
                "latent payload {} != {} sites x {} channels",
                values.len(),
                sites,
                n_z
            )));
        }
        if let Some(idx) = &indices {
            if idx.len() != sites {
                return Err(TrainError::shape("index count != site count"));
            }
        }
        Ok(LatentGrid { dims, n_z, values, indices })
    }

    pub fn sites(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn quantized(&self) -> bool {
        self.indices.is_some()
    }

    pub fn site_vec(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_z..(s + 1) * self.n_z]
    }

    /// `[sites, n_z]` matrix view for graph consumption.
    pub fn to_sites_tensor(&self) -> Tensor {
        Tensor::new(vec![self.sites(), self.n_z], self.values.clone())
            .expect("consistent by construction")
    }

    pub fn from_sites_tensor(
        dims: (usize, usize, usize),
        t: &Tensor,
        indices: Option<Vec<usize>>,
    ) -> Result<Self, TrainError> {
        let n_z = match *t.shape() {
            [_, c] => c,
            _ => return Err(TrainError::shape("sites tensor must be a matrix")),
        };
        LatentGrid::new(dims, n_z, t.data().to_vec(), indices)
    }
}

/// Flattened conditioning tokens in homogeneous space: one normalized
/// codebook vector (or the zero vector) per latent site, i-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTokens {
    pub grid_dims: (usize, usize, usize),
    pub n_z: usize,
    /// `[token][n_z]`
    pub values: Vec<f64>,
}

impl PriorTokens {
    pub fn count(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1 * self.grid_dims.2
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_z..(i + 1) * self.n_z]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.count(), self.n_z], self.values.clone())
            .expect("consistent by construction")
    }
}
