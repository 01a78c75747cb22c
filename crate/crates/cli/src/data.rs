use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use spikesparse::event_io::{
    dvs128_index_from_dir, load_labeled_grids, parse_aedat, parse_portable_events,
    write_grid_cache, DatasetIndex, EventStream, LabeledGrid, SampleRecord, Split, SynthDataset,
};

use crate::exit::ExitError;

pub const MANIFEST: &str = "index.csv";

/// Reads an AEDAT 3.1 recording or a portable text event file, told apart
/// by the AEDAT header line.
pub fn read_events(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path)
        .map_err(|e| ExitError::missing(format!("cannot read {}: {e}", path.display())))?;
    let stream = if bytes.starts_with(b"#!AER-DAT") {
        parse_aedat(&bytes)?
    } else {
        let text = String::from_utf8(bytes)
            .with_context(|| format!("{} is neither AEDAT nor text", path.display()))?;
        parse_portable_events(&text)?
    };
    Ok(stream)
}

/// Writes grids under `dir/train` and `dir/test` plus a manifest.
pub fn write_dataset(dir: &Path, data: &SynthDataset<LabeledGrid>) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    for (split, name, samples) in [
        (Split::Train, "train", &data.train),
        (Split::Test, "test", &data.test),
    ] {
        fs::create_dir_all(dir.join(name))
            .with_context(|| format!("cannot create {}", dir.display()))?;
        for (i, sample) in samples.iter().enumerate() {
            let path = format!("{name}/{i:05}.grid");
            fs::write(dir.join(&path), write_grid_cache(&sample.grid))?;
            index.records.push(SampleRecord {
                path,
                subject: 0,
                label: sample.label,
                illumination: "synthetic".into(),
                start_us: None,
                split,
            });
        }
    }
    fs::write(dir.join(MANIFEST), index.to_csv()?)?;
    Ok(index)
}

/// Loads one split of a dataset directory: a manifest directory written by
/// `synth` (or by hand), or an extracted DVS128 Gesture directory.
pub fn load_split(
    dir: &Path,
    split: Split,
    bin_width_us: u64,
    timesteps: usize,
) -> Result<Vec<LabeledGrid>> {
    if !dir.is_dir() {
        return Err(
            ExitError::missing(format!("data directory {} not found", dir.display())).into(),
        );
    }
    let manifest = dir.join(MANIFEST);
    let index = if manifest.is_file() {
        DatasetIndex::from_csv(&fs::read_to_string(&manifest)?)?
    } else {
        dvs128_index_from_dir(dir)?
    };
    let samples = load_labeled_grids(&index, dir, split, bin_width_us, timesteps)
        .with_context(|| format!("loading {} split of {}", split_name(split), dir.display()))?;
    if samples.is_empty() {
        return Err(ExitError::missing(format!(
            "no {} samples in {}",
            split_name(split),
            dir.display()
        ))
        .into());
    }
    Ok(samples)
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}
