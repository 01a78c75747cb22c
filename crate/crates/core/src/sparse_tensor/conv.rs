use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Shape2D, Site, SparseTensor2D};
use crate::error::{Error, Result};

/// Bias-free 2D convolution kernel with weights laid out as
/// `[out_channels][in_channels][dx][dy]`.
///
/// The squared Frobenius norm of the whole weight tensor is cached and
/// recomputed every time the weights are mutated through this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel2D {
    out_channels: usize,
    in_channels: usize,
    kernel_size: usize,
    stride: usize,
    weights: Vec<f64>,
    norm_sq: f64,
}

impl ConvKernel2D {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::shape(format!("stride must be 1 or 2, got {stride}")));
        }
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        let mut kernel = ConvKernel2D {
            out_channels,
            in_channels,
            kernel_size,
            stride,
            weights,
            norm_sq: 0.0,
        };
        kernel.refresh_norm();
        Ok(kernel)
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel_size * kernel_size;
        Self::new(out_channels, in_channels, kernel_size, stride, vec![0.0; n])
    }

    /// Fan-in scaled uniform initialization, `U(-s, s)` with `s = sqrt(1/fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel_size * kernel_size) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = out_channels * in_channels * kernel_size * kernel_size;
        let weights = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(out_channels, in_channels, kernel_size, stride, weights)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Cached `‖W‖²` over all four axes.
    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        self.weights.copy_from_slice(weights);
        self.refresh_norm();
        Ok(())
    }

    /// Mutates the weights in place, then refreshes the cached norm.
    pub fn update_weights<F: FnOnce(&mut [f64])>(&mut self, f: F) {
        f(&mut self.weights);
        self.refresh_norm();
    }

    pub fn refresh_norm(&mut self) {
        self.norm_sq = self.weights.iter().map(|w| w * w).sum();
    }

    #[inline]
    pub fn weight_index(&self, co: usize, ci: usize, dx: usize, dy: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel_size + dx) * self.kernel_size + dy
    }

    /// Output geometry for an input geometry: `⌈H/s⌉ × ⌈W/s⌉`.
    pub fn output_shape(&self, input: Shape2D) -> Shape2D {
        Shape2D::new(
            input.batch,
            self.out_channels,
            input.height.div_ceil(self.stride),
            input.width.div_ceil(self.stride),
        )
    }
}

/// Coordinate map of a strided sparse convolution: every input site maps to
/// `(b, ⌊x/s⌋, ⌊y/s⌋)`, deduplicated and sorted.
pub fn out_coords(coords: &[Site], stride: usize) -> Vec<Site> {
    assert!(stride >= 1, "stride must be at least 1");
    let s = stride as u32;
    let mut out: Vec<Site> = coords
        .iter()
        .map(|site| Site::new(site.b, site.x / s, site.y / s))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Evaluates the convolution at the given output sites. Returns one
/// `out_channels` vector per site, flattened, without pruning zeros.
/// Taps that fall outside the input extent or on absent sites read 0.
pub fn conv_at_sites(
    input: &SparseTensor2D,
    kernel: &ConvKernel2D,
    sites: &[Site],
) -> Result<Vec<f64>> {
    let in_shape = input.shape();
    if in_shape.channels != kernel.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            in_shape.channels, kernel.in_channels
        )));
    }
    let k = kernel.kernel_size;
    let half = (k / 2) as i64;
    let stride = kernel.stride as i64;
    let cin = kernel.in_channels;
    let cout = kernel.out_channels;
    let lookup = input.site_lookup();
    let mut out = vec![0.0; sites.len() * cout];
    for (n, site) in sites.iter().enumerate() {
        let acc = &mut out[n * cout..(n + 1) * cout];
        for dx in 0..k {
            let ix = stride * site.x as i64 + dx as i64 - half;
            if ix < 0 || ix >= in_shape.width as i64 {
                continue;
            }
            for dy in 0..k {
                let iy = stride * site.y as i64 + dy as i64 - half;
                if iy < 0 || iy >= in_shape.height as i64 {
                    continue;
                }
                let tap = Site::new(site.b, ix as u32, iy as u32);
                let entry = lookup[in_shape.site_index(tap)];
                if entry == u32::MAX {
                    continue;
                }
                let values = input.entry_values(entry as usize);
                for (co, slot) in acc.iter_mut().enumerate() {
                    let mut sum = 0.0;
                    for (ci, v) in values.iter().enumerate().take(cin) {
                        sum += kernel.weights[kernel.weight_index(co, ci, dx, dy)] * v;
                    }
                    *slot += sum;
                }
            }
        }
    }
    Ok(out)
}

/// Generalized sparse convolution: the output exists only on
/// [`out_coords`] of the input's occupied sites.
pub fn sparse_conv2d(input: &SparseTensor2D, kernel: &ConvKernel2D) -> Result<SparseTensor2D> {
    let sites = out_coords(input.sites(), kernel.stride);
    let values = conv_at_sites(input, kernel, &sites)?;
    let mut out = SparseTensor2D::empty(kernel.output_shape(input.shape()));
    let cout = kernel.out_channels;
    for (n, site) in sites.iter().enumerate() {
        out.push_sorted(*site, &values[n * cout..(n + 1) * cout]);
    }
    Ok(out)
}
