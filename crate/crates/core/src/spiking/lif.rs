use super::{lif_potential, spike_output, LifParams, SpikeFn, NORM_EPSILON};
use crate::error::{Error, Result};
use crate::sparse_tensor::{Shape2D, Site, SparseTensor2D};

/// Membrane potentials and previous spikes of one layer.
///
/// Potentials are dense over the layer's output geometry. In the lazy
/// (sparse) execution path a neuron's potential is only brought up to date
/// when it next receives input or has just spiked; `synced` records how many
/// steps each stored potential already reflects.
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerState {
    shape: Shape2D,
    potentials: Vec<f64>,
    last_spikes: SparseTensor2D,
    synced: Vec<u32>,
    steps: u32,
    lagging: bool,
}

impl LifLayerState {
    pub fn new(shape: Shape2D) -> Self {
        LifLayerState {
            shape,
            potentials: vec![0.0; shape.dense_len()],
            last_spikes: SparseTensor2D::empty(shape),
            synced: vec![0; shape.dense_len()],
            steps: 0,
            lagging: false,
        }
    }

    /// Builds a state from explicit potentials and previous spikes.
    pub fn from_parts(potentials: Vec<f64>, last_spikes: SparseTensor2D) -> Result<Self> {
        let shape = last_spikes.shape();
        if potentials.len() != shape.dense_len() {
            return Err(Error::shape(format!(
                "expected {} potentials, got {}",
                shape.dense_len(),
                potentials.len()
            )));
        }
        Ok(LifLayerState {
            shape,
            synced: vec![0; potentials.len()],
            potentials,
            last_spikes,
            steps: 0,
            lagging: false,
        })
    }

    pub fn reset(&mut self) {
        self.potentials.fill(0.0);
        self.synced.fill(0);
        self.last_spikes = SparseTensor2D::empty(self.shape);
        self.steps = 0;
        self.lagging = false;
    }

    pub fn shape(&self) -> Shape2D {
        self.shape
    }

    /// Number of steps applied since the last reset.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn last_spikes(&self) -> &SparseTensor2D {
        &self.last_spikes
    }

    /// Stored potentials. After lazy steps some entries may be behind; see
    /// [`LifLayerState::sync`].
    pub fn raw_potentials(&self) -> &[f64] {
        &self.potentials
    }

    pub fn is_synced(&self) -> bool {
        !self.lagging
    }

    /// Brings every lagging potential up to the current step.
    pub fn sync(&mut self, params: &LifParams, wnorm2: f64) {
        if !self.lagging {
            return;
        }
        let norm = wnorm2 + NORM_EPSILON;
        for (v, synced) in self.potentials.iter_mut().zip(&mut self.synced) {
            *v = decay(*v, self.steps - *synced, params, norm);
            *synced = self.steps;
        }
        self.lagging = false;
    }

    /// Up-to-date potentials, without modifying the state.
    pub fn potentials(&self, params: &LifParams, wnorm2: f64) -> Vec<f64> {
        let mut copy = self.clone();
        copy.sync(params, wnorm2);
        copy.potentials
    }

    fn check(&self, current: &SparseTensor2D) -> Result<()> {
        if current.shape() != self.shape {
            return Err(Error::shape(format!(
                "input current has shape {:?}, state has {:?}",
                current.shape(),
                self.shape
            )));
        }
        Ok(())
    }
}

#[inline]
fn decay(mut v: f64, gap: u32, params: &LifParams, norm: f64) -> f64 {
    for _ in 0..gap {
        v = lif_potential(v, 0.0, 0.0, params.beta, params.threshold, norm);
    }
    v
}

/// Advances a silent neuron's potential over `gap` steps without input.
///
/// This is the zero-input update applied `gap` times, so the result is
/// bit-identical to stepping one timestep at a time. With `b > 0` and
/// `β ∈ [0, 1]` a neuron that did not spike on the step before the gap
/// cannot spike during it.
pub fn lazy_decay_advance(potential: f64, gap: u32, params: &LifParams, wnorm2: f64) -> f64 {
    decay(potential, gap, params, wnorm2 + NORM_EPSILON)
}

/// One dense update over every neuron of the layer. `current` is the
/// layer's convolution output for this timestep.
pub fn lif_step(
    state: &mut LifLayerState,
    current: &SparseTensor2D,
    params: &LifParams,
    wnorm2: f64,
    spike_fn: SpikeFn,
) -> Result<SparseTensor2D> {
    state.check(current)?;
    state.sync(params, wnorm2);
    let shape = state.shape;
    let norm = wnorm2 + NORM_EPSILON;
    let prev = state.last_spikes.densify();
    let input = current.densify();
    let mut out = vec![0.0; shape.dense_len()];
    for i in 0..out.len() {
        let v = lif_potential(
            state.potentials[i],
            prev[i],
            input[i],
            params.beta,
            params.threshold,
            norm,
        );
        state.potentials[i] = v;
        out[i] = spike_output(v, norm, params, spike_fn);
    }
    state.steps += 1;
    state.synced.fill(state.steps);
    state.last_spikes = SparseTensor2D::sparsify(&out, shape)?;
    Ok(state.last_spikes.clone())
}

/// Whether the lazy path is valid for these parameters.
pub(crate) fn lazy_applicable(params: &LifParams, spike_fn: SpikeFn) -> bool {
    spike_fn == SpikeFn::Heaviside
        && params.threshold > 0.0
        && (0.0..=1.0).contains(&params.beta)
}

/// Same result as [`lif_step`] with Heaviside spikes, touching only sites
/// that receive current or spiked on the previous step. Other neurons decay
/// lazily. Falls back to the dense update when `b ≤ 0` or `β ∉ [0, 1]`.
pub fn lif_step_sparse(
    state: &mut LifLayerState,
    current: &SparseTensor2D,
    params: &LifParams,
    wnorm2: f64,
) -> Result<SparseTensor2D> {
    if !lazy_applicable(params, SpikeFn::Heaviside) {
        return lif_step(state, current, params, wnorm2, SpikeFn::Heaviside);
    }
    state.check(current)?;
    let shape = state.shape;
    let channels = shape.channels;
    let norm = wnorm2 + NORM_EPSILON;
    let step = state.steps;
    let zeros = vec![0.0; channels];
    let mut out = SparseTensor2D::empty(shape);
    let mut spikes = vec![0.0; channels];

    let mut update = |state: &mut LifLayerState, site: Site, input: &[f64], prev: &[f64]| {
        for c in 0..channels {
            let i = shape.dense_index(site, c);
            let caught_up = decay(state.potentials[i], step - state.synced[i], params, norm);
            let v = lif_potential(caught_up, prev[c], input[c], params.beta, params.threshold, norm);
            state.potentials[i] = v;
            state.synced[i] = step + 1;
            spikes[c] = spike_output(v, norm, params, SpikeFn::Heaviside);
        }
        out.push_sorted(site, &spikes);
    };

    // Merge the sites with current and the sites that spiked last step, both
    // sorted, visiting each site once.
    let previous = std::mem::replace(&mut state.last_spikes, SparseTensor2D::empty(shape));
    let mut a = current.iter().peekable();
    let mut b = previous.iter().peekable();
    loop {
        match (a.peek(), b.peek()) {
            (None, None) => break,
            (Some(&(sa, va)), Some(&(sb, vb))) if sa == sb => {
                update(state, sa, va, vb);
                a.next();
                b.next();
            }
            (Some(&(sa, va)), Some(&(sb, _))) if sa < sb => {
                update(state, sa, va, &zeros);
                a.next();
            }
            (Some(&(sa, va)), None) => {
                update(state, sa, va, &zeros);
                a.next();
            }
            (_, Some(&(sb, vb))) => {
                update(state, sb, &zeros, vb);
                b.next();
            }
        }
    }
    state.steps += 1;
    state.lagging = true;
    state.last_spikes = out;
    Ok(state.last_spikes.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape() -> Shape2D {
        Shape2D::new(1, 2, 3, 4)
    }

    fn random_current(rng: &mut ChaCha8Rng, density: f64) -> SparseTensor2D {
        let s = shape();
        let mut dense = vec![0.0; s.dense_len()];
        for y in 0..s.height {
            for x in 0..s.width {
                if rng.random::<f64>() < density {
                    for c in 0..s.channels {
                        dense[s.dense_index(Site::new(0, x as u32, y as u32), c)] =
                            rng.random_range(-1.0..2.0);
                    }
                }
            }
        }
        SparseTensor2D::sparsify(&dense, s).unwrap()
    }

    #[test]
    fn step_examples() {
        let params = LifParams::default();
        let s = Shape2D::new(1, 1, 1, 1);
        let site = Site::new(0, 0, 0);
        let mut state = LifLayerState::from_parts(vec![0.5], SparseTensor2D::empty(s)).unwrap();
        let current = SparseTensor2D::from_entries(s, vec![(site, vec![1.0])]).unwrap();
        let wnorm2 = 1.0 - NORM_EPSILON;
        lif_step(&mut state, &current, &params, wnorm2, SpikeFn::Heaviside).unwrap();
        assert!((state.raw_potentials()[0] - 0.65).abs() < 1e-12);

        let spiked = SparseTensor2D::from_entries(s, vec![(site, vec![1.0])]).unwrap();
        let mut state = LifLayerState::from_parts(vec![0.9], spiked).unwrap();
        let out =
            lif_step(&mut state, &SparseTensor2D::empty(s), &params, wnorm2, SpikeFn::Heaviside)
                .unwrap();
        assert!((state.raw_potentials()[0] - 0.42).abs() < 1e-12);
        assert_eq!(out.get(site), Some(&[1.0][..]));
    }

    #[test]
    fn silent_neuron_stays_silent() {
        let mut state = LifLayerState::new(shape());
        let out = lif_step(
            &mut state,
            &SparseTensor2D::empty(shape()),
            &LifParams::default(),
            0.5,
            SpikeFn::Heaviside,
        )
        .unwrap();
        assert!(out.is_empty());
        assert!(state.raw_potentials().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = LifLayerState::new(shape());
        let wrong = SparseTensor2D::empty(Shape2D::new(1, 2, 3, 3));
        let params = LifParams::default();
        assert!(lif_step(&mut state, &wrong, &params, 1.0, SpikeFn::Heaviside).is_err());
        assert!(lif_step_sparse(&mut state, &wrong, &params, 1.0).is_err());
    }

    #[test]
    fn lazy_decay_examples() {
        let params = LifParams {
            beta: 0.5,
            ..LifParams::default()
        };
        assert_eq!(lazy_decay_advance(0.4, 2, &params, 1.0), 0.1);
        assert_eq!(lazy_decay_advance(0.4, 0, &params, 1.0), 0.4);
    }

    #[test]
    fn lazy_decay_equals_explicit_zero_input_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let params = LifParams {
                beta: rng.random(),
                threshold: rng.random_range(0.01..1.0),
                alpha: 3.0,
            };
            let wnorm2 = rng.random_range(0.1..4.0);
            let v0: Vec<f64> = (0..shape().dense_len())
                .map(|_| rng.random_range(-1.0..0.1))
                .collect();
            let mut state =
                LifLayerState::from_parts(v0.clone(), SparseTensor2D::empty(shape())).unwrap();
            for _ in 0..5 {
                let out = lif_step(
                    &mut state,
                    &SparseTensor2D::empty(shape()),
                    &params,
                    wnorm2,
                    SpikeFn::Heaviside,
                )
                .unwrap();
                assert!(out.is_empty());
            }
            for (v, expected) in v0.iter().zip(state.raw_potentials()) {
                assert_eq!(lazy_decay_advance(*v, 5, &params, wnorm2), *expected);
            }
        }
    }

    #[test]
    fn sparse_and_dense_steps_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let params = LifParams {
                beta: rng.random(),
                threshold: rng.random_range(0.05..0.6),
                alpha: 3.0,
            };
            let wnorm2 = rng.random_range(0.2..2.0);
            let mut dense = LifLayerState::new(shape());
            let mut lazy = LifLayerState::new(shape());
            for _ in 0..12 {
                let density = rng.random_range(0.0..0.5);
                let current = random_current(&mut rng, density);
                let a = lif_step(&mut dense, &current, &params, wnorm2, SpikeFn::Heaviside).unwrap();
                let b = lif_step_sparse(&mut lazy, &current, &params, wnorm2).unwrap();
                assert_eq!(a, b);
            }
            assert_eq!(
                dense.raw_potentials(),
                &lazy.potentials(&params, wnorm2)[..]
            );
        }
    }

    #[test]
    fn zero_threshold_falls_back_to_dense() {
        let params = LifParams {
            threshold: 0.0,
            ..LifParams::default()
        };
        let mut dense = LifLayerState::new(shape());
        let mut lazy = LifLayerState::new(shape());
        let empty = SparseTensor2D::empty(shape());
        let a = lif_step(&mut dense, &empty, &params, 1.0, SpikeFn::Heaviside).unwrap();
        let b = lif_step_sparse(&mut lazy, &empty, &params, 1.0).unwrap();
        // V = 0 sits exactly on a zero threshold, so every neuron fires.
        assert_eq!(a.num_sites(), shape().sites_len());
        assert_eq!(a, b);
    }

    #[test]
    fn reset_clears_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = LifLayerState::new(shape());
        let params = LifParams::default();
        lif_step_sparse(&mut state, &random_current(&mut rng, 0.8), &params, 0.3).unwrap();
        state.reset();
        assert_eq!(state, LifLayerState::new(shape()));
    }
}
