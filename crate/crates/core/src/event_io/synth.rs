//! Synthetic moving-edge event data.
//!
//! Each class is a bright bar moving in one of four directions (right, left,
//! down, up) at one of two speeds; classes 0–3 are slow, 4–7 fast. The
//! leading edge of the bar emits ON events over a narrow band of pixels
//! around it, the trailing edge OFF events. Sensor noise is added as a
//! Poisson number of uniformly placed events per bin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use super::{build_voxel_grid, Event, EventStream, LabeledGrid, LabeledStream, Polarity};
use crate::error::{Error, Result};

const SLOW_PX_PER_BIN: f64 = 0.8;
const FAST_PX_PER_BIN: f64 = 1.6;
const EDGE_FIRE_PROBABILITY: f64 = 0.9;
/// Width in pixels of the band around an edge that emits events.
const EDGE_BAND: f64 = 3.0;
const MIN_EXTENT: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of classes, 2 to 8.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    pub bin_width_us: u64,
    pub seed: u64,
    /// Expected noise events per pixel per bin.
    pub noise_rate: f64,
    /// Motion starts after a uniform delay of `0..=max_onset_bins` bins.
    pub max_onset_bins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            height: 64,
            width: 64,
            timesteps: 20,
            bin_width_us: 10_000,
            seed: 0,
            noise_rate: 1e-3,
            max_onset_bins: 3,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.classes) {
            return Err(Error::Config(format!(
                "synthetic classes must be in 2..=8, got {}",
                self.classes
            )));
        }
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return Err(Error::Config(format!(
                "synthetic sensor must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {}x{}",
                self.width, self.height
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("synthetic sensor too large".into()));
        }
        if self.timesteps == 0 || self.bin_width_us == 0 {
            return Err(Error::Config("timesteps and bin width must be positive".into()));
        }
        if !(0.0..0.01).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate must be in [0, 0.01), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.bin_width_us * self.timesteps as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

/// Generates labeled event streams. Sample `i` of a split has label
/// `i % classes`; train and test draw from disjoint random streams.
pub fn synth_event_dataset(config: &SynthConfig) -> Result<SynthDataset<LabeledStream>> {
    config.validate()?;
    let split = |stream_id: u64, per_class: usize| -> Result<Vec<LabeledStream>> {
        (0..per_class * config.classes)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((stream_id << 32) | i as u64);
                let label = i % config.classes;
                let stream = render_sample(config, label, &mut rng)?;
                Ok(LabeledStream { stream, label })
            })
            .collect()
    };
    Ok(SynthDataset {
        train: split(TRAIN_STREAM, config.train_per_class)?,
        test: split(TEST_STREAM, config.test_per_class)?,
    })
}

/// Same samples as [`synth_event_dataset`], voxelized over the configured
/// timesteps.
pub fn synth_dataset(config: &SynthConfig) -> Result<SynthDataset<LabeledGrid>> {
    let events = synth_event_dataset(config)?;
    let voxelize = |samples: Vec<LabeledStream>| -> Result<Vec<LabeledGrid>> {
        samples
            .into_par_iter()
            .map(|s| {
                let grid = build_voxel_grid(
                    &s.stream,
                    config.bin_width_us,
                    config.timesteps,
                    config.duration_us(),
                )?;
                Ok(LabeledGrid {
                    grid,
                    label: s.label,
                })
            })
            .collect()
    };
    Ok(SynthDataset {
        train: voxelize(events.train)?,
        test: voxelize(events.test)?,
    })
}

fn render_sample(config: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Result<EventStream> {
    let direction = label % 4;
    let base_speed = if label < 4 {
        SLOW_PX_PER_BIN
    } else {
        FAST_PX_PER_BIN
    };
    let speed = base_speed * rng.random_range(0.85..1.15);
    let horizontal = direction < 2;
    let reversed = direction == 1 || direction == 3;
    let (along, across) = if horizontal {
        (config.width, config.height)
    } else {
        (config.height, config.width)
    };

    let thickness = rng.random_range(3..=5) as f64;
    // Both edge bands together stay under 4% of the sensor.
    let max_length = ((across * 2) / 5).min((0.04 * (config.height * config.width) as f64 / (2.0 * EDGE_BAND)) as usize);
    let length = rng.random_range(across / 5..=max_length);
    // Paths are jittered around the sensor centre, the way a subject
    // stays roughly centred in front of the camera.
    let jitter_across = (across / 8) as i64;
    let offset = ((across - length) as i64 / 2 + rng.random_range(-jitter_across..=jitter_across))
        .clamp(0, (across - length) as i64) as usize;
    let onset = rng.random_range(0..=config.max_onset_bins) as f64;
    let active_bins = (config.timesteps as f64 - onset).max(0.0);
    let travel = speed * active_bins;
    let slack = (along as f64 - thickness - travel).max(1.0);
    let jitter_along = along as f64 / 8.0;
    let trail0 = (slack / 2.0 + rng.random_range(-jitter_along..jitter_along)).clamp(0.0, slack);
    let lead0 = trail0 + thickness;

    let bin = config.bin_width_us as f64;
    let horizon = config.duration_us();
    let mut events = Vec::new();
    let emit = |events: &mut Vec<Event>, rng: &mut ChaCha8Rng, edge0: f64, polarity: Polarity| {
        // Every bin, pixels whose centre lies within half a band of the
        // edge fire once; a pixel keeps firing for several bins while the
        // contrast gradient passes over it.
        for k in 0..active_bins as usize {
            let edge = edge0 + speed * (k as f64 + 0.5);
            let first = (edge - EDGE_BAND / 2.0 - 0.5).ceil().max(0.0) as usize;
            let last = (edge + EDGE_BAND / 2.0 - 0.5).floor();
            if last < 0.0 {
                continue;
            }
            for pixel in first..=(last as usize).min(along - 1) {
                for row in offset..offset + length {
                    if rng.random::<f64>() >= EDGE_FIRE_PROBABILITY {
                        continue;
                    }
                    let t = ((onset + k as f64 + rng.random::<f64>()) * bin) as u64;
                    if t >= horizon {
                        continue;
                    }
                    let along_px = if reversed { along - 1 - pixel } else { pixel };
                    let (x, y) = if horizontal {
                        (along_px, row)
                    } else {
                        (row, along_px)
                    };
                    events.push(Event::new(t, x as u16, y as u16, polarity));
                }
            }
        }
    };
    emit(&mut events, rng, lead0, Polarity::On);
    emit(&mut events, rng, trail0, Polarity::Off);

    if config.noise_rate > 0.0 {
        let lambda = config.noise_rate * (config.height * config.width) as f64;
        let poisson = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?;
        for t in 0..config.timesteps {
            let count = poisson.sample(rng) as usize;
            for _ in 0..count {
                let ts = t as u64 * config.bin_width_us + rng.random_range(0..config.bin_width_us);
                let x = rng.random_range(0..config.width) as u16;
                let y = rng.random_range(0..config.height) as u16;
                let polarity = if rng.random::<bool>() {
                    Polarity::On
                } else {
                    Polarity::Off
                };
                events.push(Event::new(ts, x, y, polarity));
            }
        }
    }
    Ok(EventStream::new(events, config.width as u16, config.height as u16)?.with_duration(horizon))
}
