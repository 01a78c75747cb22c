use super::lif::lazy_applicable;
use super::{lif_step, lif_step_sparse, LifLayerState, LifParams, SpikeFn};
use crate::error::Result;
use crate::sparse_tensor::{
    conv_at_sites, out_coords, sparse_max_pool2d, ConvKernel2D, Shape2D, Site,
    SparseTensor2D,
};

/// Where a convolution produces outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    /// Only at the coordinate map of the occupied input sites.
    #[default]
    Sparse,
    /// At every output position.
    Dense,
}

/// How the LIF update visits neurons at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    /// Only neurons with input or a spike on the previous step; the rest
    /// decay lazily.
    #[default]
    Sparse,
    /// Every neuron, every step.
    Dense,
}

/// Result of one layer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// Spikes emitted by the LIF neurons.
    pub spikes: SparseTensor2D,
    /// What the next layer sees: `spikes`, max-pooled when the layer pools.
    pub output: SparseTensor2D,
    pub(crate) trace: Option<LayerTrace>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerTrace {
    /// Output sites the convolution was evaluated at.
    pub sites: Vec<Site>,
    /// Convolution output at `sites`, `out_channels` per site.
    pub current: Vec<f64>,
    /// Dense potentials after the update.
    pub potentials: Vec<f64>,
}

/// Convolution followed by LIF neurons, optionally followed by 2×2 max
/// pooling. Carries its own state for stateful use; [`SpikingConvLayer::step_with`]
/// runs against an external state instead.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingConvLayer {
    pub(crate) kernel: ConvKernel2D,
    pub(crate) lif: LifParams,
    pub(crate) conv_mode: ConvMode,
    pub(crate) pool: bool,
    pub(crate) execution: ExecutionMode,
    pub(crate) spike_fn: SpikeFn,
    input_shape: Shape2D,
    pub(crate) state: LifLayerState,
}

impl SpikingConvLayer {
    pub fn new(
        kernel: ConvKernel2D,
        lif: LifParams,
        input_shape: Shape2D,
        conv_mode: ConvMode,
        pool: bool,
    ) -> Self {
        let state = LifLayerState::new(kernel.output_shape(input_shape));
        SpikingConvLayer {
            kernel,
            lif,
            conv_mode,
            pool,
            execution: ExecutionMode::Sparse,
            spike_fn: SpikeFn::Heaviside,
            input_shape,
            state,
        }
    }

    pub fn kernel(&self) -> &ConvKernel2D {
        &self.kernel
    }

    pub fn lif(&self) -> &LifParams {
        &self.lif
    }

    pub fn conv_mode(&self) -> ConvMode {
        self.conv_mode
    }

    pub fn pools(&self) -> bool {
        self.pool
    }

    pub fn input_shape(&self) -> Shape2D {
        self.input_shape
    }

    /// Geometry of the LIF neurons.
    pub fn spike_shape(&self) -> Shape2D {
        self.kernel.output_shape(self.input_shape)
    }

    /// Geometry seen by the next layer.
    pub fn output_shape(&self) -> Shape2D {
        let s = self.spike_shape();
        if self.pool {
            Shape2D::new(s.batch, s.channels, s.height.div_ceil(2), s.width.div_ceil(2))
        } else {
            s
        }
    }

    pub fn execution_mode(&self) -> ExecutionMode {
        self.execution
    }

    pub fn set_execution_mode(&mut self, mode: ExecutionMode) {
        self.sync_state();
        self.execution = mode;
    }

    pub fn spike_fn(&self) -> SpikeFn {
        self.spike_fn
    }

    pub fn state(&self) -> &LifLayerState {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    pub fn fresh_state(&self) -> LifLayerState {
        LifLayerState::new(self.spike_shape())
    }

    /// Brings lazily decayed potentials up to date, e.g. before the
    /// parameters change.
    pub(crate) fn sync_state(&mut self) {
        self.state.sync(&self.lif, self.kernel.norm_sq());
    }

    /// Advances the layer's own state by one timestep.
    pub fn step(&mut self, input: &SparseTensor2D) -> Result<LayerOutput> {
        let mut state = std::mem::replace(&mut self.state, LifLayerState::new(Shape2D::default()));
        let out = self.step_with(&mut state, input, false);
        self.state = state;
        out
    }

    /// Advances `state` by one timestep. With `trace`, the dense update is
    /// used and intermediates for differentiation are kept.
    pub fn step_with(
        &self,
        state: &mut LifLayerState,
        input: &SparseTensor2D,
        trace: bool,
    ) -> Result<LayerOutput> {
        let out_shape = self.spike_shape();
        let sites = match self.conv_mode {
            ConvMode::Sparse => out_coords(input.sites(), self.kernel.stride()),
            ConvMode::Dense => all_sites(out_shape),
        };
        let current = conv_at_sites(input, &self.kernel, &sites)?;
        let cout = self.kernel.out_channels();
        let mut current_tensor = SparseTensor2D::empty(out_shape);
        for (n, site) in sites.iter().enumerate() {
            current_tensor.push_sorted(*site, &current[n * cout..(n + 1) * cout]);
        }
        let wnorm2 = self.kernel.norm_sq();
        let lazy = !trace
            && self.execution == ExecutionMode::Sparse
            && lazy_applicable(&self.lif, self.spike_fn);
        let spikes = if lazy {
            lif_step_sparse(state, &current_tensor, &self.lif, wnorm2)?
        } else {
            lif_step(state, &current_tensor, &self.lif, wnorm2, self.spike_fn)?
        };
        let output = if self.pool {
            sparse_max_pool2d(&spikes)
        } else {
            spikes.clone()
        };
        let trace = trace.then(|| LayerTrace {
            sites,
            current,
            potentials: state.raw_potentials().to_vec(),
        });
        Ok(LayerOutput {
            spikes,
            output,
            trace,
        })
    }
}

fn all_sites(shape: Shape2D) -> Vec<Site> {
    let mut sites = Vec::with_capacity(shape.batch * shape.height * shape.width);
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                sites.push(Site::new(b as u32, x as u32, y as u32));
            }
        }
    }
    sites
}
