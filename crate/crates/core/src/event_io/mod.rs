//! Event streams, file formats, binary voxel grids, and datasets.

mod aedat;
mod dataset;
mod portable;
mod synth;
mod voxel;

pub use aedat::{parse_aedat, write_aedat, AEDAT_POLARITY_EVENT};
pub use dataset::{
    dvs128_index_from_dir, load_labeled_grids, split_dvs128, DatasetIndex, SampleRecord, Split,
    DVS128_CLASSES, DVS128_LAST_TRAIN_SUBJECT, DVS128_SUBJECTS,
};
pub use portable::{parse_portable_events, write_portable_events};
pub use synth::{synth_dataset, synth_event_dataset, SynthConfig, SynthDataset};
pub use voxel::{build_voxel_grid, read_grid_cache, write_grid_cache, BinaryVoxelGrid, Voxel, GRID_CACHE_MAGIC};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    /// Value stored in a voxel grid: `+1` for ON, `-1` for OFF.
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds since the start of the recording.
    pub timestamp: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(timestamp: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Event {
            timestamp,
            x,
            y,
            polarity,
        }
    }
}

/// Events sorted by timestamp, all inside the sensor bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
    duration: u64,
    origin: u64,
}

impl EventStream {
    /// Sorts the events (stably) and checks their coordinates. The duration
    /// is the last timestamp, or 0 for an empty stream.
    pub fn new(mut events: Vec<Event>, width: u16, height: u16) -> Result<Self> {
        if let Some(bad) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::format(
                "event coordinates",
                format!(
                    "event at ({}, {}) outside a {}x{} sensor",
                    bad.x, bad.y, width, height
                ),
            ));
        }
        events.sort_by_key(|e| e.timestamp);
        let duration = events.last().map_or(0, |e| e.timestamp);
        Ok(EventStream {
            events,
            width,
            height,
            duration,
            origin: 0,
        })
    }

    pub fn with_duration(mut self, duration: u64) -> Self {
        self.duration = duration.max(self.duration);
        self
    }

    /// Shifts timestamps so the first event is at 0, remembering the offset.
    pub fn rebased(mut self) -> Self {
        if let Some(first) = self.events.first().map(|e| e.timestamp) {
            for event in &mut self.events {
                event.timestamp -= first;
            }
            self.duration -= first;
            self.origin += first;
        }
        self
    }

    /// Events with timestamps in `[start, start + length)`, re-timed so that
    /// `start` becomes 0. `start` is in the stream's own (rebased) clock.
    pub fn window(&self, start: u64, length: u64) -> EventStream {
        let end = start.saturating_add(length);
        let events = self
            .events
            .iter()
            .filter(|e| e.timestamp >= start && e.timestamp < end)
            .map(|e| Event {
                timestamp: e.timestamp - start,
                ..*e
            })
            .collect::<Vec<_>>();
        let duration = events.last().map_or(0, |e| e.timestamp);
        EventStream {
            events,
            width: self.width,
            height: self.height,
            duration,
            origin: self.origin + start,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    /// Offset subtracted from the original device timestamps.
    pub fn origin(&self) -> u64 {
        self.origin
    }
}

/// A voxel grid paired with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGrid {
    pub grid: BinaryVoxelGrid,
    pub label: usize,
}

/// An event stream paired with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStream {
    pub stream: EventStream,
    pub label: usize,
}
