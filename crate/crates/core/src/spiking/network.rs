use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use super::{
    ConvMode, ExecutionMode, LifLayerState, LifParams, ReadoutLayer, SpikeFn, SpikingConvLayer,
};
use crate::error::{Error, Result};
use crate::event_io::BinaryVoxelGrid;
use crate::sparse_tensor::{ConvKernel2D, Shape2D};

/// One convolutional block of an architecture string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub conv_mode: ConvMode,
    /// Stride-1 convolution followed by 2×2 max pooling instead of a
    /// stride-2 convolution.
    pub pool: bool,
}

impl LayerSpec {
    pub fn stride(&self) -> usize {
        if self.pool {
            1
        } else {
            2
        }
    }
}

/// Parsed architecture string such as `4sc5-8sc5-8sc3-16sc3-11`.
///
/// Blocks are `{channels}sc{k}` (sparse convolution) or `{channels}c{k}`
/// (dense convolution), each with stride 2. A block followed by `mp` uses
/// stride 1 and 2×2 max pooling instead. The final number is the class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl Architecture {
    /// The same network with every block's stride replaced by pooling.
    pub fn pooled_variant(&self) -> Architecture {
        Architecture {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec { pool: true, ..*l })
                .collect(),
            classes: self.classes,
        }
    }

    /// The same network with every block strided.
    pub fn strided_variant(&self) -> Architecture {
        Architecture {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec { pool: false, ..*l })
                .collect(),
            classes: self.classes,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let fail = |message: String| Error::Architecture {
            spec: spec.to_string(),
            message,
        };
        let tokens: Vec<&str> = spec.trim().split('-').collect();
        let (last, blocks) = tokens.split_last().expect("split yields at least one token");
        let classes: usize = last
            .parse()
            .map_err(|_| fail(format!("last token `{last}` is not a class count")))?;
        if classes < 2 {
            return Err(fail("need at least two classes".into()));
        }
        let mut layers: Vec<LayerSpec> = Vec::new();
        for token in blocks {
            if *token == "mp" {
                match layers.last_mut() {
                    Some(l) if !l.pool => l.pool = true,
                    _ => return Err(fail("`mp` must follow a convolution".into())),
                }
                continue;
            }
            let split = token
                .find(|c: char| !c.is_ascii_digit())
                .ok_or_else(|| fail(format!("`{token}` is not a layer")))?;
            let (channels, rest) = token.split_at(split);
            let (conv_mode, kernel) = if let Some(k) = rest.strip_prefix("sc") {
                (ConvMode::Sparse, k)
            } else if let Some(k) = rest.strip_prefix('c') {
                (ConvMode::Dense, k)
            } else {
                return Err(fail(format!("`{token}` is not a convolution")));
            };
            let channels: usize = channels
                .parse()
                .map_err(|_| fail(format!("`{token}` has no channel count")))?;
            let kernel_size: usize = kernel
                .parse()
                .map_err(|_| fail(format!("`{token}` has no kernel size")))?;
            if channels == 0 || kernel_size.is_multiple_of(2) {
                return Err(fail(format!(
                    "`{token}` needs positive channels and an odd kernel"
                )));
            }
            layers.push(LayerSpec {
                channels,
                kernel_size,
                conv_mode,
                pool: false,
            });
        }
        if layers.is_empty() {
            return Err(fail("no convolutional layers".into()));
        }
        Ok(Architecture { layers, classes })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let tag = match l.conv_mode {
                ConvMode::Sparse => "sc",
                ConvMode::Dense => "c",
            };
            write!(f, "{}{tag}{}-", l.channels, l.kernel_size)?;
            if l.pool {
                f.write_str("mp-")?;
            }
        }
        write!(f, "{}", self.classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOptions {
    pub beta_init: f64,
    pub threshold_init: f64,
    pub alpha: f64,
    /// Dropout probability before the readout, used only in training.
    pub dropout: f64,
    pub readout_bias: bool,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            beta_init: 0.7,
            threshold_init: 0.3,
            alpha: 3.0,
            dropout: 0.5,
            readout_bias: true,
        }
    }
}

/// Position of every trainable tensor in the flat parameter vector: per
/// layer its weights, `β` and `b`, then the readout weights and bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerSlots>,
    pub readout_weights: Range<usize>,
    pub readout_bias: Option<Range<usize>>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub weights: Range<usize>,
    pub beta: usize,
    pub threshold: usize,
}

/// Per-call results of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Readout logits for each processed timestep.
    pub logits: Vec<Vec<f64>>,
    /// Arithmetic mean of `logits`.
    pub mean_logits: Vec<f64>,
    /// Spikes emitted by each layer's neurons, summed over the timesteps.
    pub spike_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    architecture: Architecture,
    options: NetworkOptions,
    input_shape: Shape2D,
    pub(crate) layers: Vec<SpikingConvLayer>,
    pub(crate) readout: ReadoutLayer,
}

impl Network {
    /// Builds a network for `in_channels × height × width` inputs with
    /// fan-in scaled uniform weights.
    pub fn new<R: Rng + ?Sized>(
        architecture: &Architecture,
        in_channels: usize,
        height: usize,
        width: usize,
        options: NetworkOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&options.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                options.dropout
            )));
        }
        let lif = LifParams {
            beta: options.beta_init,
            threshold: options.threshold_init,
            alpha: options.alpha,
        };
        let mut shape = Shape2D::new(1, in_channels, height, width);
        let mut layers = Vec::with_capacity(architecture.layers.len());
        for spec in &architecture.layers {
            let kernel = ConvKernel2D::init_uniform(
                spec.channels,
                shape.channels,
                spec.kernel_size,
                spec.stride(),
                rng,
            )?;
            let layer = SpikingConvLayer::new(kernel, lif, shape, spec.conv_mode, spec.pool);
            shape = layer.output_shape();
            layers.push(layer);
        }
        let features = shape.channels * shape.height * shape.width;
        let readout =
            ReadoutLayer::init_uniform(architecture.classes, features, options.readout_bias, rng)?;
        Ok(Network {
            architecture: architecture.clone(),
            options,
            input_shape: Shape2D::new(1, in_channels, height, width),
            layers,
            readout,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn options(&self) -> &NetworkOptions {
        &self.options
    }

    pub fn input_shape(&self) -> Shape2D {
        self.input_shape
    }

    pub fn layers(&self) -> &[SpikingConvLayer] {
        &self.layers
    }

    pub fn readout(&self) -> &ReadoutLayer {
        &self.readout
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.classes
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut offset = 0;
        let mut layers = Vec::new();
        for layer in &self.layers {
            let n = layer.kernel.weights().len();
            layers.push(LayerSlots {
                weights: offset..offset + n,
                beta: offset + n,
                threshold: offset + n + 1,
            });
            offset += n + 2;
        }
        let n = self.readout.weights.len();
        let readout_weights = offset..offset + n;
        offset += n;
        let readout_bias = self.readout.bias.as_ref().map(|b| {
            let r = offset..offset + b.len();
            offset += b.len();
            r
        });
        ParamLayout {
            layers,
            readout_weights,
            readout_bias,
            len: offset,
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().len
    }

    /// All trainable parameters in [`ParamLayout`] order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.kernel.weights());
            out.push(layer.lif.beta);
            out.push(layer.lif.threshold);
        }
        out.extend_from_slice(&self.readout.weights);
        if let Some(b) = &self.readout.bias {
            out.extend_from_slice(b);
        }
        out
    }

    /// Replaces every parameter and refreshes the cached weight norms.
    /// Lazily decayed potentials are brought up to date first so they are
    /// not later advanced with the new parameters.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let layout = self.param_layout();
        if params.len() != layout.len {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        for (layer, slots) in self.layers.iter_mut().zip(&layout.layers) {
            layer.sync_state();
            layer.kernel.set_weights(&params[slots.weights.clone()])?;
            layer.lif.beta = params[slots.beta];
            layer.lif.threshold = params[slots.threshold];
        }
        self.readout
            .weights
            .copy_from_slice(&params[layout.readout_weights.clone()]);
        if let (Some(bias), Some(range)) = (self.readout.bias.as_mut(), layout.readout_bias) {
            bias.copy_from_slice(&params[range]);
        }
        Ok(())
    }

    /// Replaces the Heaviside by `sig_α` in every layer. Sparse execution is
    /// bypassed while enabled since activations become real-valued.
    pub fn set_soft_forward(&mut self, enabled: bool) {
        let spike_fn = if enabled {
            SpikeFn::Sigmoid
        } else {
            SpikeFn::Heaviside
        };
        for layer in &mut self.layers {
            layer.sync_state();
            layer.spike_fn = spike_fn;
        }
    }

    pub fn soft_forward(&self) -> bool {
        self.layers.iter().any(|l| l.spike_fn == SpikeFn::Sigmoid)
    }

    pub fn set_execution_mode(&mut self, mode: ExecutionMode) {
        for layer in &mut self.layers {
            layer.set_execution_mode(mode);
        }
    }

    pub fn reset(&mut self) {
        for layer in &mut self.layers {
            layer.reset();
        }
    }

    /// Zeroed states for running a sample alongside others.
    pub fn fresh_states(&self) -> Vec<LifLayerState> {
        self.layers.iter().map(|l| l.fresh_state()).collect()
    }

    /// Runs timesteps `range` of `grid` on the network's own state,
    /// continuing from wherever the previous call stopped.
    pub fn forward_segment(
        &mut self,
        grid: &BinaryVoxelGrid,
        range: Range<usize>,
    ) -> Result<ForwardOutput> {
        let mut states: Vec<LifLayerState> = self
            .layers
            .iter_mut()
            .map(|l| std::mem::replace(&mut l.state, LifLayerState::new(Shape2D::default())))
            .collect();
        let out = self.forward_with(&mut states, grid, range);
        for (layer, state) in self.layers.iter_mut().zip(states) {
            layer.state = state;
        }
        out
    }

    /// Runs timesteps `range` of `grid` against caller-owned states, in
    /// inference mode (no dropout).
    pub fn forward_with(
        &self,
        states: &mut [LifLayerState],
        grid: &BinaryVoxelGrid,
        range: Range<usize>,
    ) -> Result<ForwardOutput> {
        self.check_input(grid)?;
        if range.is_empty() {
            return Err(Error::Usage("forward pass over zero timesteps".into()));
        }
        let mut logits = Vec::with_capacity(range.len());
        let mut spike_counts = vec![0; self.layers.len()];
        for t in range {
            let mut x = grid.frame(t);
            for (l, (layer, state)) in self.layers.iter().zip(states.iter_mut()).enumerate() {
                let out = layer.step_with(state, &x, false)?;
                spike_counts[l] += out.spikes.count_nonzero().count;
                x = out.output;
            }
            logits.push(self.readout.forward(&x)?);
        }
        let mean_logits = mean_rows(&logits);
        Ok(ForwardOutput {
            logits,
            mean_logits,
            spike_counts,
        })
    }

    pub(crate) fn check_input(&self, grid: &BinaryVoxelGrid) -> Result<()> {
        let s = self.input_shape;
        if grid.channels() != s.channels || grid.height() != s.height || grid.width() != s.width {
            return Err(Error::shape(format!(
                "network expects {}x{}x{} input, grid is {}x{}x{}",
                s.channels,
                s.height,
                s.width,
                grid.channels(),
                grid.height(),
                grid.width()
            )));
        }
        Ok(())
    }
}

pub(crate) fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; rows.first().map_or(0, |r| r.len())];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Resets `model` and runs the first `t_eval` timesteps of `grid`.
/// Timesteps beyond the grid's length see empty frames.
pub fn network_forward(
    model: &mut Network,
    grid: &BinaryVoxelGrid,
    t_eval: usize,
) -> Result<ForwardOutput> {
    model.reset();
    model.forward_segment(grid, 0..t_eval)
}
