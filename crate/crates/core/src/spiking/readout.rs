use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::sparse_tensor::SparseTensor2D;

/// Fully connected layer applied to every timestep's flattened activations.
/// Weights are `[classes][features]`, features flattened as `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutLayer {
    classes: usize,
    features: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Option<Vec<f64>>,
}

impl ReadoutLayer {
    pub fn new(
        classes: usize,
        features: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if weights.len() != classes * features {
            return Err(Error::shape(format!(
                "readout expects {} weights, got {}",
                classes * features,
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != classes) {
            return Err(Error::shape("readout bias length must equal class count"));
        }
        Ok(ReadoutLayer {
            classes,
            features,
            weights,
            bias,
        })
    }

    /// `U(-s, s)` with `s = sqrt(1/features)` for weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        classes: usize,
        features: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / features.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = (0..classes * features).map(|_| dist.sample(rng)).collect();
        let bias = with_bias.then(|| (0..classes).map(|_| dist.sample(rng)).collect());
        Self::new(classes, features, weights, bias)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// `W·flatten(x) + bias`, accumulating only the columns of present
    /// entries.
    pub fn forward(&self, x: &SparseTensor2D) -> Result<Vec<f64>> {
        let shape = x.shape();
        let features = shape.channels * shape.height * shape.width * shape.batch;
        if features != self.features {
            return Err(Error::shape(format!(
                "readout expects {} features, got {features}",
                self.features
            )));
        }
        let mut logits = self.bias.clone().unwrap_or_else(|| vec![0.0; self.classes]);
        for (site, values) in x.iter() {
            for (c, v) in values.iter().enumerate() {
                if *v == 0.0 {
                    continue;
                }
                let j = shape.dense_index(site, c);
                for (k, logit) in logits.iter_mut().enumerate() {
                    *logit += self.weights[k * self.features + j] * v;
                }
            }
        }
        Ok(logits)
    }
}
