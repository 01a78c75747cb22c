//! Dataset manifests and the DVS128 Gesture subject split.
//!
//! A manifest is a CSV file with columns
//! `path,subject,label,illumination,start_us,split`. `start_us` may be empty
//! (the sample starts at the first event of its file) and `split` is
//! `train` or `test`. Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_voxel_grid, parse_aedat, parse_portable_events, read_grid_cache, LabeledGrid};
use crate::error::{Error, Result};

pub const DVS128_SUBJECTS: u32 = 29;
pub const DVS128_LAST_TRAIN_SUBJECT: u32 = 23;
pub const DVS128_CLASSES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub subject: u32,
    pub label: usize,
    pub illumination: String,
    /// Gesture start in the recording's original device clock.
    pub start_us: Option<u64>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in reader.deserialize() {
            let record: SampleRecord = row?;
            records.push(record);
        }
        Ok(DatasetIndex { records })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for record in &self.records {
            writer.serialize(record)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }
}

/// Reads a listing with columns `path,subject,label,illumination[,start_us]`
/// (header optional) and assigns subjects 1–23 to train and 24–29 to test.
pub fn split_dvs128(listing: &str) -> Result<DatasetIndex> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(listing.as_bytes());
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 1;
        if i == 0 && row.get(0) == Some("path") {
            continue;
        }
        if row.len() < 4 || row.len() > 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 or 5 fields, found {}", row.len()),
            });
        }
        let number = |idx: usize, name: &str| -> Result<u64> {
            row[idx].parse().map_err(|_| Error::Parse {
                line,
                message: format!("field `{name}` is not a number: `{}`", &row[idx]),
            })
        };
        let subject = number(1, "subject")? as u32;
        let label = number(2, "label")? as usize;
        if !(1..=DVS128_SUBJECTS).contains(&subject) {
            return Err(Error::Index(format!(
                "line {line}: subject {subject} outside 1..={DVS128_SUBJECTS}"
            )));
        }
        if label >= DVS128_CLASSES {
            return Err(Error::Index(format!(
                "line {line}: label {label} outside 0..{DVS128_CLASSES}"
            )));
        }
        let start_us = match row.get(4) {
            Some(s) if !s.is_empty() => Some(number(4, "start_us")?),
            _ => None,
        };
        let split = if subject <= DVS128_LAST_TRAIN_SUBJECT {
            Split::Train
        } else {
            Split::Test
        };
        records.push(SampleRecord {
            path: row[0].to_string(),
            subject,
            label,
            illumination: row[3].to_string(),
            start_us,
            split,
        });
    }
    Ok(DatasetIndex { records })
}

/// Builds a split listing for an extracted DVS128 Gesture directory: every
/// `userNN_<illumination>.aedat` next to a `userNN_<illumination>_labels.csv`
/// (`class,startTime_usec,endTime_usec`, classes 1–11) yields one record per
/// gesture.
pub fn dvs128_index_from_dir(root: &Path) -> Result<DatasetIndex> {
    let mut listing = String::new();
    let mut names: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "aedat"))
        .collect();
    names.sort();
    for path in names {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Index(format!("bad file name {}", path.display())))?;
        let Some((user, illumination)) = stem.split_once('_') else {
            return Err(Error::Index(format!("`{stem}` is not userNN_<illumination>")));
        };
        let subject: u32 = user
            .strip_prefix("user")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Index(format!("`{stem}` has no subject number")))?;
        let labels_path = root.join(format!("{stem}_labels.csv"));
        let labels = fs::read_to_string(&labels_path)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(labels.as_bytes());
        for row in reader.records() {
            let row = row?;
            let class: usize = row[0]
                .parse()
                .map_err(|_| Error::Index(format!("bad class `{}` in {}", &row[0], labels_path.display())))?;
            if class == 0 {
                return Err(Error::Index(format!("class 0 in {}", labels_path.display())));
            }
            listing.push_str(&format!(
                "{},{},{},{},{}\n",
                path.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
                subject,
                class - 1,
                illumination,
                &row[1]
            ));
        }
    }
    split_dvs128(&listing)
}

/// Loads the grids of one split. `.aedat` files are read as AEDAT 3.1,
/// `.grid` files as voxel-grid caches, anything else as portable text.
/// Each sample covers `timesteps × bin_width_us` from its start.
pub fn load_labeled_grids(
    index: &DatasetIndex,
    root: &Path,
    split: Split,
    bin_width_us: u64,
    timesteps: usize,
) -> Result<Vec<LabeledGrid>> {
    let mut by_path: BTreeMap<&str, Vec<(usize, &SampleRecord)>> = BTreeMap::new();
    for (i, record) in index.records.iter().enumerate().filter(|(_, r)| r.split == split) {
        by_path.entry(record.path.as_str()).or_default().push((i, record));
    }
    let groups: Vec<(&str, Vec<(usize, &SampleRecord)>)> = by_path.into_iter().collect();
    let loaded: Vec<Vec<(usize, LabeledGrid)>> = groups
        .par_iter()
        .map(|(path, records)| load_file_samples(root, path, records, bin_width_us, timesteps))
        .collect::<Result<_>>()?;
    let mut samples: Vec<(usize, LabeledGrid)> = loaded.into_iter().flatten().collect();
    samples.sort_by_key(|(i, _)| *i);
    Ok(samples.into_iter().map(|(_, s)| s).collect())
}

fn load_file_samples(
    root: &Path,
    path: &str,
    records: &[(usize, &SampleRecord)],
    bin_width_us: u64,
    timesteps: usize,
) -> Result<Vec<(usize, LabeledGrid)>> {
    let full = root.join(path);
    let length = bin_width_us * timesteps as u64;
    if full.extension().is_some_and(|e| e == "grid") {
        let grid = read_grid_cache(&fs::read(&full)?)?.with_timesteps(timesteps);
        return Ok(records
            .iter()
            .map(|(i, r)| {
                (
                    *i,
                    LabeledGrid {
                        grid: grid.clone(),
                        label: r.label,
                    },
                )
            })
            .collect());
    }
    let stream = if full.extension().is_some_and(|e| e == "aedat") {
        parse_aedat(&fs::read(&full)?)?
    } else {
        parse_portable_events(&fs::read_to_string(&full)?)?
    };
    records
        .iter()
        .map(|(i, r)| {
            let start = r.start_us.map_or(0, |s| s.saturating_sub(stream.origin()));
            let window = stream.window(start, length);
            let grid = build_voxel_grid(&window, bin_width_us, timesteps, length)?;
            Ok((*i, LabeledGrid { grid, label: r.label }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_split_boundary() {
        let index = split_dvs128("a.aedat,23,0,led\nb.aedat,24,3,natural,5000\n").unwrap();
        assert_eq!(index.records[0].split, Split::Train);
        assert_eq!(index.records[1].split, Split::Test);
        assert_eq!(index.records[1].start_us, Some(5000));
    }

    #[test]
    fn unknown_subject_is_an_index_error() {
        assert!(matches!(split_dvs128("a.aedat,30,0,led\n"), Err(Error::Index(_))));
        assert!(matches!(split_dvs128("a.aedat,0,0,led\n"), Err(Error::Index(_))));
        assert!(matches!(split_dvs128("a.aedat,3,11,led\n"), Err(Error::Index(_))));
    }

    #[test]
    fn header_row_is_skipped() {
        let index = split_dvs128("path,subject,label,illumination\nx.aedat,1,2,fluorescent\n").unwrap();
        assert_eq!(index.records.len(), 1);
    }

    #[test]
    fn train_and_test_subjects_are_disjoint() {
        let mut listing = String::new();
        for subject in 1..=29 {
            listing.push_str(&format!("u{subject}.aedat,{subject},{},led\n", subject % 11));
        }
        let index = split_dvs128(&listing).unwrap();
        let train: Vec<u32> = index.train().map(|r| r.subject).collect();
        let test: Vec<u32> = index.test().map(|r| r.subject).collect();
        assert_eq!(train.len(), 23);
        assert_eq!(test, (24..=29).collect::<Vec<_>>());
        assert!(train.iter().all(|s| !test.contains(s)));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let index = split_dvs128("a.aedat,2,1,led,100\nb.aedat,25,3,natural\n").unwrap();
        let back = DatasetIndex::from_csv(&index.to_csv().unwrap()).unwrap();
        assert_eq!(back, index);
    }
}
