//! Backpropagation through time over the unrolled network.
//!
//! [`record_forward`] runs a sample through a [`Network`] with dense
//! potentials and keeps every intermediate the reverse pass needs;
//! [`GradientTape::backward`] then walks the timesteps in reverse. Wherever
//! the forward pass applied `Θ`, the reverse pass uses
//! [`surrogate_grad`](crate::spiking::surrogate_grad) at the same normalized
//! argument `V/(‖W‖²+ε) − b`.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::event_io::BinaryVoxelGrid;
use crate::spiking::{
    dropout_per_timestep, surrogate_grad, DropoutMask, Network, ParamLayout, NORM_EPSILON,
};
use crate::sparse_tensor::{Shape2D, Site, SparseTensor2D};

/// Switches that change the gradient graph, not the forward values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TapeOptions {
    /// Treat `‖W‖²` in the threshold and reset as a constant.
    pub detach_norm: bool,
    /// Cut the recurrence every this many timesteps (truncated BPTT).
    pub truncation: Option<usize>,
}

/// Gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len];
        ParamGrads { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weights.clone()]
    }

    pub fn beta(&self, layer: usize) -> f64 {
        self.values[self.layout.layers[layer].beta]
    }

    pub fn threshold(&self, layer: usize) -> f64 {
        self.values[self.layout.layers[layer].threshold]
    }

    pub fn readout_weights(&self) -> &[f64] {
        &self.values[self.layout.readout_weights.clone()]
    }

    pub fn readout_bias(&self) -> Option<&[f64]> {
        self.layout.readout_bias.clone().map(|r| &self.values[r])
    }

    pub fn zero(&mut self) {
        self.values.fill(0.0);
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        assert_eq!(self.layout, other.layout, "gradient layouts differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One line per tensor with its gradient L2 norm.
    pub fn norms_report(&self) -> String {
        let norm = |r: Range<usize>| self.values[r].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = String::new();
        for (l, slots) in self.layout.layers.iter().enumerate() {
            let _ = writeln!(out, "layer{l}.weights {:.6e}", norm(slots.weights.clone()));
            let _ = writeln!(out, "layer{l}.beta {:.6e}", self.values[slots.beta].abs());
            let _ = writeln!(out, "layer{l}.threshold {:.6e}", self.values[slots.threshold].abs());
        }
        let _ = writeln!(out, "readout.weights {:.6e}", norm(self.layout.readout_weights.clone()));
        if let Some(r) = self.layout.readout_bias.clone() {
            let _ = writeln!(out, "readout.bias {:.6e}", norm(r));
        }
        out
    }
}

/// Softmax cross-entropy of `logits` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_sum = max + sum.ln();
    let loss = log_sum - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

struct StepRecord {
    /// Per layer: the layer's input, its LIF spikes and its trace.
    inputs: Vec<SparseTensor2D>,
    spikes: Vec<SparseTensor2D>,
    sites: Vec<Vec<Site>>,
    currents: Vec<Vec<f64>>,
    potentials: Vec<Vec<f64>>,
    readout_input: SparseTensor2D,
    mask: Option<DropoutMask>,
}

/// Record of one forward pass, consumed by a single reverse pass.
pub struct GradientTape<'a> {
    model: &'a Network,
    options: TapeOptions,
    steps: Vec<StepRecord>,
    logits: Vec<Vec<f64>>,
    mean_logits: Vec<f64>,
    spike_counts: Vec<usize>,
    label: usize,
    loss: f64,
    consumed: bool,
}

/// Runs `t_eval` timesteps of `grid` from zeroed states, recording for the
/// reverse pass, and applies the mean-logit cross-entropy loss. Dropout is
/// applied (with a fresh mask per timestep) only when `dropout_rng` is given.
pub fn record_forward<'a, R: Rng + ?Sized>(
    model: &'a Network,
    grid: &BinaryVoxelGrid,
    t_eval: usize,
    label: usize,
    dropout_rng: Option<&mut R>,
    options: TapeOptions,
) -> Result<GradientTape<'a>> {
    model.check_input(grid)?;
    if t_eval == 0 {
        return Err(Error::Usage("forward pass over zero timesteps".into()));
    }
    let mut states = model.fresh_states();
    let mut steps = Vec::with_capacity(t_eval);
    let mut logits = Vec::with_capacity(t_eval);
    let mut spike_counts = vec![0; model.layers.len()];
    let mut rng = dropout_rng;
    for t in 0..t_eval {
        let n = model.layers.len();
        let mut record = StepRecord {
            inputs: Vec::with_capacity(n),
            spikes: Vec::with_capacity(n),
            sites: Vec::with_capacity(n),
            currents: Vec::with_capacity(n),
            potentials: Vec::with_capacity(n),
            readout_input: SparseTensor2D::empty(Default::default()),
            mask: None,
        };
        let mut x = grid.frame(t);
        for (l, (layer, state)) in model.layers.iter().zip(states.iter_mut()).enumerate() {
            let out = layer.step_with(state, &x, true)?;
            let trace = out.trace.expect("traced step");
            spike_counts[l] += out.spikes.count_nonzero().count;
            record.inputs.push(x);
            record.spikes.push(out.spikes);
            record.sites.push(trace.sites);
            record.currents.push(trace.current);
            record.potentials.push(trace.potentials);
            x = out.output;
        }
        let (dropped, mask) = match rng.as_deref_mut() {
            Some(r) => dropout_per_timestep(&x, model.options().dropout, r, true),
            None => (x, None),
        };
        logits.push(model.readout.forward(&dropped)?);
        record.readout_input = dropped;
        record.mask = mask;
        steps.push(record);
    }
    let mean_logits = crate::spiking::mean_rows(&logits);
    let (loss, _) = softmax_cross_entropy(&mean_logits, label)?;
    Ok(GradientTape {
        model,
        options,
        steps,
        logits,
        mean_logits,
        spike_counts,
        label,
        loss,
        consumed: false,
    })
}

impl GradientTape<'_> {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn mean_logits(&self) -> &[f64] {
        &self.mean_logits
    }

    /// Spikes per layer summed over the recorded timesteps.
    pub fn spike_counts(&self) -> &[usize] {
        &self.spike_counts
    }

    /// Gradient of the recorded cross-entropy loss.
    pub fn backward(&mut self) -> Result<ParamGrads> {
        let (_, dmean) = softmax_cross_entropy(&self.mean_logits, self.label)?;
        let t = self.logits.len() as f64;
        let per_step: Vec<f64> = dmean.iter().map(|g| g / t).collect();
        let dlogits = vec![per_step; self.logits.len()];
        self.backward_from_logits(&dlogits)
    }

    /// Reverse pass seeded with an arbitrary gradient for each timestep's
    /// logits, for losses other than the built-in one.
    pub fn backward_from_logits(&mut self, dlogits: &[Vec<f64>]) -> Result<ParamGrads> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if dlogits.len() != self.logits.len()
            || dlogits.iter().any(|d| d.len() != self.model.num_classes())
        {
            return Err(Error::shape("logit gradients do not match the recorded logits"));
        }
        self.consumed = true;
        Ok(self.reverse(dlogits))
    }

    fn reverse(&self, dlogits: &[Vec<f64>]) -> ParamGrads {
        let model = self.model;
        let layout = model.param_layout();
        let mut grads = ParamGrads::zeros(layout.clone());
        let g = &mut grads.values;
        let readout = &model.readout;
        let features = readout.features();
        let classes = readout.classes();
        let n_layers = model.layers.len();

        let sizes: Vec<usize> = model.layers.iter().map(|l| l.spike_shape().dense_len()).collect();
        let mut carry_v: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
        let mut carry_s: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
        let mut dnorm = vec![0.0; n_layers];

        for t in (0..self.steps.len()).rev() {
            let step = &self.steps[t];
            let dl = &dlogits[t];

            // Readout.
            if let Some(range) = &layout.readout_bias {
                for (k, d) in dl.iter().enumerate() {
                    g[range.start + k] += d;
                }
            }
            let x = &step.readout_input;
            let shape = x.shape();
            for (site, values) in x.iter() {
                for (c, v) in values.iter().enumerate() {
                    if *v == 0.0 {
                        continue;
                    }
                    let j = shape.dense_index(site, c);
                    for k in 0..classes {
                        g[layout.readout_weights.start + k * features + j] += dl[k] * v;
                    }
                }
            }
            let mut d_out = vec![0.0; features];
            for (k, d) in dl.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &readout.weights()[k * features..(k + 1) * features];
                for (acc, w) in d_out.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            if let Some(mask) = &step.mask {
                let mut masked = vec![0.0; features];
                for &j in &mask.kept {
                    masked[j] = d_out[j] * mask.scale;
                }
                d_out = masked;
            }

            for l in (0..n_layers).rev() {
                let layer = &model.layers[l];
                let slots = &layout.layers[l];
                let spike_shape = layer.spike_shape();
                let n = sizes[l];
                let mut ds = if layer.pools() {
                    let mut ds = vec![0.0; n];
                    for (o, i) in pool_routes(&step.spikes[l].densify(), spike_shape) {
                        ds[i] += d_out[o];
                    }
                    ds
                } else {
                    d_out
                };
                for (a, b) in ds.iter_mut().zip(&carry_s[l]) {
                    *a += b;
                }

                let lif = layer.lif();
                let (beta, b) = (lif.beta, lif.threshold);
                let norm = layer.kernel().norm_sq() + NORM_EPSILON;
                let v = &step.potentials[l];
                let zeros = vec![0.0; n];
                let (v_prev, s_prev) = if t > 0 {
                    (&self.steps[t - 1].potentials[l], self.steps[t - 1].spikes[l].densify())
                } else {
                    (&zeros, zeros.clone())
                };
                let cout = layer.kernel().out_channels();
                let mut current = vec![0.0; n];
                for (k, site) in step.sites[l].iter().enumerate() {
                    for co in 0..cout {
                        current[spike_shape.dense_index(*site, co)] = step.currents[l][k * cout + co];
                    }
                }

                let mut dv = std::mem::take(&mut carry_v[l]);
                let (mut dbeta, mut db) = (0.0, 0.0);
                for i in 0..n {
                    if ds[i] != 0.0 {
                        let u = v[i] / norm - b;
                        let du = ds[i] * surrogate_grad(u, lif.alpha);
                        dv[i] += du / norm;
                        db -= du;
                        dnorm[l] -= du * v[i] / (norm * norm);
                    }
                }
                let cut = self
                    .options
                    .truncation
                    .is_some_and(|k| k > 0 && t % k == 0);
                let mut next_v = vec![0.0; n];
                let mut next_s = vec![0.0; n];
                let mut di = vec![0.0; n];
                for i in 0..n {
                    let d = dv[i];
                    if d == 0.0 {
                        continue;
                    }
                    let a = v_prev[i] - b * norm * s_prev[i];
                    dbeta += d * (a - current[i]);
                    db -= beta * norm * s_prev[i] * d;
                    dnorm[l] -= beta * b * s_prev[i] * d;
                    if !cut {
                        next_v[i] = beta * d;
                        next_s[i] = -beta * b * norm * d;
                    }
                    di[i] = (1.0 - beta) * d;
                }
                carry_v[l] = next_v;
                carry_s[l] = next_s;
                g[slots.beta] += dbeta;
                g[slots.threshold] += db;

                // Convolution at the map sites.
                let kernel = layer.kernel();
                let input = &step.inputs[l];
                let in_shape = input.shape();
                let lookup = input.site_lookup();
                let k = kernel.kernel_size();
                let half = (k / 2) as i64;
                let stride = kernel.stride() as i64;
                let cin = kernel.in_channels();
                let want_input_grad = l > 0;
                let mut dx = if want_input_grad {
                    vec![0.0; in_shape.dense_len()]
                } else {
                    Vec::new()
                };
                let w = kernel.weights();
                for site in &step.sites[l] {
                    for co in 0..cout {
                        let gi = di[spike_shape.dense_index(*site, co)];
                        if gi == 0.0 {
                            continue;
                        }
                        for tx in 0..k {
                            let ix = stride * site.x as i64 + tx as i64 - half;
                            if ix < 0 || ix >= in_shape.width as i64 {
                                continue;
                            }
                            for ty in 0..k {
                                let iy = stride * site.y as i64 + ty as i64 - half;
                                if iy < 0 || iy >= in_shape.height as i64 {
                                    continue;
                                }
                                let tap = Site::new(site.b, ix as u32, iy as u32);
                                let entry = lookup[in_shape.site_index(tap)];
                                for ci in 0..cin {
                                    let wi = kernel.weight_index(co, ci, tx, ty);
                                    if entry != u32::MAX {
                                        let xv = input.entry_values(entry as usize)[ci];
                                        g[slots.weights.start + wi] += gi * xv;
                                    }
                                    if want_input_grad {
                                        dx[in_shape.dense_index(tap, ci)] += gi * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                d_out = dx;
            }
        }

        if !self.options.detach_norm {
            for (l, layer) in model.layers.iter().enumerate() {
                let start = layout.layers[l].weights.start;
                for (i, w) in layer.kernel().weights().iter().enumerate() {
                    g[start + i] += 2.0 * w * dnorm[l];
                }
            }
        }
        grads
    }
}

/// Winner of every 2×2 pooling window as `(output index, input index)`,
/// first maximum in `(y, x)` order. All-zero windows route to their first
/// position, so gradients reach layers that are silent.
fn pool_routes(spikes: &[f64], shape: Shape2D) -> Vec<(usize, usize)> {
    let (ho, wo) = (shape.height.div_ceil(2), shape.width.div_ceil(2));
    let mut routes = Vec::with_capacity(shape.batch * shape.channels * ho * wo);
    for plane in 0..shape.batch * shape.channels {
        let base = plane * shape.height * shape.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (f64::NEG_INFINITY, 0);
                for y in 2 * oy..(2 * oy + 2).min(shape.height) {
                    for x in 2 * ox..(2 * ox + 2).min(shape.width) {
                        let i = base + y * shape.width + x;
                        if spikes[i] > best.0 {
                            best = (spikes[i], i);
                        }
                    }
                }
                routes.push(((plane * ho + oy) * wo + ox, best.1));
            }
        }
    }
    routes
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffCheck {
    pub max_relative_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grad` against central differences of `f` at the given
/// coordinates of `x`.
pub fn central_difference_check<F>(mut f: F, x: &[f64], grad: &[f64], h: f64, indices: &[usize]) -> DiffCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut worst = DiffCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for &i in indices {
        point[i] = x[i] + h;
        let plus = f(&point);
        point[i] = x[i] - h;
        let minus = f(&point);
        point[i] = x[i];
        let err = relative_error(grad[i], (plus - minus) / (2.0 * h));
        if err > worst.max_relative_error {
            worst.max_relative_error = err;
            worst.worst_index = i;
        }
    }
    worst
}

/// Checks [`GradientTape::backward`] against central differences of the
/// loss on one sample. Requires soft-forward mode and no dropout, so the
/// loss is a smooth deterministic function of the parameters. With
/// `subset`, a random sample of that many parameters is checked; otherwise
/// all of them.
pub fn finite_diff_check<R: Rng + ?Sized>(
    model: &Network,
    grid: &BinaryVoxelGrid,
    label: usize,
    t_eval: usize,
    h: f64,
    subset: Option<usize>,
    rng: &mut R,
) -> Result<DiffCheck> {
    if !model.soft_forward() {
        return Err(Error::Usage(
            "finite differences need soft-forward mode".into(),
        ));
    }
    if model.options().dropout > 0.0 {
        return Err(Error::Usage(
            "finite differences need a deterministic loss; dropout is active".into(),
        ));
    }
    let mut tape = record_forward::<R>(model, grid, t_eval, label, None, TapeOptions::default())?;
    let grads = tape.backward()?;
    let theta = model.params();
    let mut indices: Vec<usize> = (0..theta.len()).collect();
    if let Some(k) = subset {
        for i in 0..k.min(indices.len()) {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(k);
    }
    let mut probe = model.clone();
    let mut failure = None;
    let check = central_difference_check(
        |p| {
            probe.set_params(p).expect("same layout");
            match loss_of(&probe, grid, t_eval, label) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        &theta,
        grads.values(),
        h,
        &indices,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(check),
    }
}

fn loss_of(model: &Network, grid: &BinaryVoxelGrid, t_eval: usize, label: usize) -> Result<f64> {
    let mut states = model.fresh_states();
    let out = model.forward_with(&mut states, grid, 0..t_eval)?;
    Ok(softmax_cross_entropy(&out.mean_logits, label)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::{build_voxel_grid, Event, EventStream, Polarity};
    use crate::spiking::{Architecture, NetworkOptions, ReadoutLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(arch: &str, seed: u64, h: usize, w: usize, alpha: f64) -> Network {
        let arch: Architecture = arch.parse().unwrap();
        let options = NetworkOptions {
            dropout: 0.0,
            alpha,
            ..NetworkOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(&arch, 1, h, w, options, &mut rng).unwrap()
    }

    fn grid(seed: u64, h: usize, w: usize, t: usize, density: f64) -> BinaryVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        for bin in 0..t {
            for y in 0..h {
                for x in 0..w {
                    if rng.random::<f64>() < density {
                        let p = if rng.random() { Polarity::On } else { Polarity::Off };
                        events.push(Event::new(bin as u64 * 100 + 10, x as u16, y as u16, p));
                    }
                }
            }
        }
        let stream = EventStream::new(events, w as u16, h as u16).unwrap();
        build_voxel_grid(&stream, 100, t, 100 * t as u64).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 11], 3).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[800.0, 0.0, -3.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(matches!(softmax_cross_entropy(&[0.0; 3], 3), Err(Error::Index(_))));
    }

    #[test]
    fn quadratic_central_differences_are_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        let x = [0.7, -1.3];
        let grad = [6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + x[1]];
        let check = central_difference_check(f, &x, &grad, 1e-4, &[0, 1]);
        assert!(check.max_relative_error < 1e-8, "{check:?}");
    }

    #[test]
    fn soft_mode_gradients_match_finite_differences() {
        let mut model = toy("2sc3-3sc3-3", 1, 4, 4, 3.0);
        model.set_soft_forward(true);
        let g = grid(2, 4, 4, 3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let check = finite_diff_check(&model, &g, 1, 3, 1e-4, None, &mut rng).unwrap();
        assert_eq!(check.checked, model.num_params());
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn pooled_soft_gradients_match_finite_differences() {
        let mut model = toy("2sc3-mp-3sc3-3", 3, 6, 6, 3.0);
        model.set_soft_forward(true);
        let g = grid(4, 6, 6, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let check = finite_diff_check(&model, &g, 2, 3, 1e-4, None, &mut rng).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn check_refuses_hard_mode_and_dropout() {
        let model = toy("2sc3-3sc3-3", 1, 4, 4, 3.0);
        let g = grid(2, 4, 4, 3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            finite_diff_check(&model, &g, 0, 3, 1e-4, None, &mut rng),
            Err(Error::Usage(_))
        ));
        let arch: Architecture = "2sc3-3sc3-3".parse().unwrap();
        let mut with_dropout =
            Network::new(&arch, 1, 4, 4, NetworkOptions::default(), &mut rng).unwrap();
        with_dropout.set_soft_forward(true);
        assert!(matches!(
            finite_diff_check(&with_dropout, &g, 0, 3, 1e-4, None, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let model = toy("2sc3-3sc3-3", 1, 4, 4, 3.0);
        let g = grid(2, 4, 4, 3, 0.4);
        let mut tape =
            record_forward::<ChaCha8Rng>(&model, &g, 3, 0, None, TapeOptions::default()).unwrap();
        tape.backward().unwrap();
        assert!(matches!(tape.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_alpha_blocks_gradients_below_the_readout() {
        let model = toy("2sc3-3sc3-3", 1, 8, 8, 0.0);
        let g = grid(5, 8, 8, 4, 0.3);
        let mut tape =
            record_forward::<ChaCha8Rng>(&model, &g, 4, 1, None, TapeOptions::default()).unwrap();
        let grads = tape.backward().unwrap();
        for l in 0..2 {
            assert!(grads.layer_weights(l).iter().all(|v| *v == 0.0));
            assert_eq!(grads.beta(l), 0.0);
            assert_eq!(grads.threshold(l), 0.0);
        }
        assert!(grads.readout_bias().unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn readout_only_squared_loss_has_closed_form_gradient() {
        let model = toy("2sc3-3sc3-3", 6, 8, 8, 3.0);
        let g = grid(7, 8, 8, 3, 0.5);
        let mut tape =
            record_forward::<ChaCha8Rng>(&model, &g, 3, 0, None, TapeOptions::default()).unwrap();
        // L = ½ Σ_t ‖z_t − y‖², so dL/dz_t = z_t − y and dL/dW = Σ_t (z_t − y) x_tᵀ.
        let target = [1.0, -1.0, 0.5];
        let dl: Vec<Vec<f64>> = tape
            .logits()
            .iter()
            .map(|z| z.iter().zip(target).map(|(a, b)| a - b).collect())
            .collect();
        let inputs: Vec<Vec<f64>> = tape.steps.iter().map(|s| s.readout_input.densify()).collect();
        let grads = tape.backward_from_logits(&dl).unwrap();
        let r: &ReadoutLayer = model.readout();
        for k in 0..3 {
            let bias: f64 = dl.iter().map(|d| d[k]).sum();
            assert!((grads.readout_bias().unwrap()[k] - bias).abs() < 1e-12);
            for j in 0..r.features() {
                let expected: f64 = (0..3).map(|t| dl[t][k] * inputs[t][j]).sum();
                assert!((grads.readout_weights()[k * r.features() + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_loss_gradient_is_average_of_per_step_contributions() {
        let model = toy("2sc3-3sc3-3", 8, 8, 8, 3.0);
        let g = grid(9, 8, 8, 4, 0.3);
        let t = 4;
        let mut tape =
            record_forward::<ChaCha8Rng>(&model, &g, t, 2, None, TapeOptions::default()).unwrap();
        let (_, dmean) = softmax_cross_entropy(tape.mean_logits(), 2).unwrap();
        let full = tape.backward().unwrap();
        let mut sum = ParamGrads::zeros(model.param_layout());
        for step in 0..t {
            let mut tape =
                record_forward::<ChaCha8Rng>(&model, &g, t, 2, None, TapeOptions::default())
                    .unwrap();
            let mut dl = vec![vec![0.0; 3]; t];
            dl[step] = dmean.clone();
            sum.add_scaled(&tape.backward_from_logits(&dl).unwrap(), 1.0 / t as f64);
        }
        for (a, b) in full.values().iter().zip(sum.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_deterministic_and_shaped_like_params() {
        let arch: Architecture = "2sc5-4sc3-4".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Network::new(&arch, 1, 16, 16, NetworkOptions::default(), &mut rng).unwrap();
        let g = grid(1, 16, 16, 5, 0.1);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape =
                record_forward(&model, &g, 5, 3, Some(&mut rng), TapeOptions::default()).unwrap();
            tape.backward().unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.values().len(), model.params().len());
        assert!(!a.norms_report().is_empty());
    }

    #[test]
    fn detached_norm_drops_only_the_norm_path() {
        let model = toy("2sc3-3sc3-3", 1, 8, 8, 3.0);
        let g = grid(3, 8, 8, 3, 0.4);
        let grads = |detach_norm| {
            let options = TapeOptions {
                detach_norm,
                truncation: None,
            };
            let mut tape = record_forward::<ChaCha8Rng>(&model, &g, 3, 0, None, options).unwrap();
            tape.backward().unwrap()
        };
        let (a, b) = (grads(false), grads(true));
        assert_eq!(a.readout_weights(), b.readout_weights());
        assert_eq!(a.beta(1), b.beta(1));
    }

    #[test]
    fn recorded_forward_matches_inference() {
        let mut model = toy("2sc5-4sc3-4", 3, 16, 16, 3.0);
        let g = grid(1, 16, 16, 6, 0.1);
        let tape =
            record_forward::<ChaCha8Rng>(&model, &g, 6, 0, None, TapeOptions::default()).unwrap();
        let (logits, counts) = (tape.logits().to_vec(), tape.spike_counts().to_vec());
        let out = crate::spiking::network_forward(&mut model, &g, 6).unwrap();
        assert_eq!(logits, out.logits);
        assert_eq!(counts, out.spike_counts);
    }
}
