use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::event_io::LabeledGrid;
use crate::spiking::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: String,
    /// Mean spikes per sample, summed over the evaluated timesteps.
    pub count: f64,
    /// `count` as a percentage of `timesteps × C·H·W` neurons.
    pub percent: f64,
}

/// Spike counts of every layer during inference, averaged over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityAudit {
    pub timesteps: usize,
    pub samples: usize,
    pub layers: Vec<LayerSparsity>,
    pub total: f64,
}

impl SparsityAudit {
    /// `layer,count,percent` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.layers {
            w.serialize(row).expect("in-memory write");
        }
        w.write_record(["total", &self.total.to_string(), ""]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Counts the spikes each layer emits over `t_eval` timesteps per sample.
pub fn sparsity_audit(model: &Network, data: &[LabeledGrid], t_eval: usize) -> Result<SparsityAudit> {
    if data.is_empty() {
        return Err(Error::Usage("audit needs at least one sample".into()));
    }
    let per_sample: Vec<Vec<usize>> = data
        .par_iter()
        .map(|s| {
            let mut states = model.fresh_states();
            Ok(model.forward_with(&mut states, &s.grid, 0..t_eval)?.spike_counts)
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let layers: Vec<LayerSparsity> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let total: usize = per_sample.iter().map(|c| c[l]).sum();
            let count = total as f64 / n;
            let shape = layer.spike_shape();
            let neurons = (t_eval * shape.channels * shape.height * shape.width) as f64;
            LayerSparsity {
                layer: format!("conv{}", l + 1),
                count,
                percent: 100.0 * count / neurons,
            }
        })
        .collect();
    let total = layers.iter().map(|l| l.count).sum();
    Ok(SparsityAudit {
        timesteps: t_eval,
        samples: data.len(),
        layers,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnytimePoint {
    pub timesteps: usize,
    pub accuracy: f64,
}

/// Accuracy of the same model when each sample is cut after `T` timesteps,
/// for every `T` in `t_values`.
pub fn anytime_eval(model: &Network, data: &[LabeledGrid], t_values: &[usize]) -> Result<Vec<AnytimePoint>> {
    if t_values.contains(&0) {
        return Err(Error::Config("anytime evaluation needs T ≥ 1".into()));
    }
    t_values
        .iter()
        .map(|&t| {
            Ok(AnytimePoint {
                timesteps: t,
                accuracy: evaluate(model, data, t)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub variant: String,
    pub architecture: String,
    pub seed: u64,
    pub test_accuracy: f64,
    /// Mean spikes per test sample, all layers.
    pub total_spikes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub row: StudyRow,
    pub audit: SparsityAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    /// Strided and pooled run for each seed, in that order.
    pub runs: Vec<StudyRun>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for run in &self.runs {
            w.serialize(&run.row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn variant<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a StudyRow> {
        self.runs.iter().map(|r| &r.row).filter(move |r| r.variant == variant)
    }

    /// `(seed, strided spikes, pooled spikes)` per seed.
    pub fn spike_pairs(&self) -> Vec<(u64, f64, f64)> {
        self.variant("strided")
            .filter_map(|s| {
                self.variant("pooled")
                    .find(|p| p.seed == s.seed)
                    .map(|p| (s.seed, s.total_spikes, p.total_spikes))
            })
            .collect()
    }
}

/// Trains the configured architecture twice per seed, once with stride-2
/// convolutions and once with stride-1 convolutions followed by 2×2 max
/// pooling, under the same budget, and audits every run on `test`.
pub fn stride_vs_pool_study(
    config: &TrainConfig,
    seeds: &[u64],
    train_set: &[LabeledGrid],
    test: &[LabeledGrid],
) -> Result<StudyReport> {
    let arch = config.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("study needs at least one seed".into()));
    }
    let variants = [
        ("strided", arch.strided_variant().to_string()),
        ("pooled", arch.pooled_variant().to_string()),
    ];
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for (variant, architecture) in &variants {
            let cfg = TrainConfig {
                architecture: architecture.clone(),
                seed,
                ..config.clone()
            };
            let outcome = train(&cfg, train_set, test)?;
            let audit = sparsity_audit(&outcome.model, test, config.timesteps)?;
            runs.push(StudyRun {
                row: StudyRow {
                    variant: (*variant).into(),
                    architecture: architecture.clone(),
                    seed,
                    test_accuracy: outcome.best_test_acc,
                    total_spikes: audit.total,
                },
                audit,
            });
        }
    }
    Ok(StudyReport { runs })
}

/// History as CSV with one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for record in history {
        w.serialize(record).expect("in-memory write");
    }
    if history.is_empty() {
        w.write_record([
            "epoch",
            "lr",
            "train_loss",
            "train_acc",
            "test_acc",
            "epoch_seconds",
            "train_spikes",
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::{synth_dataset, SynthConfig};
    use crate::training::init_model;

    fn data() -> Vec<LabeledGrid> {
        let config = SynthConfig {
            classes: 2,
            train_per_class: 2,
            test_per_class: 3,
            height: 40,
            width: 40,
            timesteps: 8,
            ..SynthConfig::default()
        };
        synth_dataset(&config).unwrap().test
    }

    fn config() -> TrainConfig {
        TrainConfig {
            architecture: "2sc5-4sc3-2".into(),
            timesteps: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn audit_matches_brute_force_tally() {
        let samples = data();
        let mut model = init_model(&config(), 40, 40).unwrap();
        model.set_execution_mode(crate::spiking::ExecutionMode::Dense);
        let audit = sparsity_audit(&model, &samples, 8).unwrap();
        // Step every layer by hand and count nonzero scalars of the
        // densified spike tensors.
        let mut totals = vec![0usize; model.layers().len()];
        for s in &samples {
            let mut layers: Vec<_> = model.layers().to_vec();
            for l in &mut layers {
                l.reset();
            }
            for t in 0..8 {
                let mut x = s.grid.frame(t);
                for (l, layer) in layers.iter_mut().enumerate() {
                    let out = layer.step(&x).unwrap();
                    totals[l] += out.spikes.densify().iter().filter(|v| **v != 0.0).count();
                    x = out.output;
                }
            }
        }
        for (row, total) in audit.layers.iter().zip(&totals) {
            assert_eq!(row.count, *total as f64 / samples.len() as f64);
        }
        let sum: f64 = audit.layers.iter().map(|l| l.count).sum();
        assert_eq!(audit.total, sum);
        assert!(audit.to_csv().starts_with("layer,count,percent\n"));
        assert!(audit.to_json().contains("\"total\""));
    }

    #[test]
    fn silent_network_audits_to_zero() {
        let samples = data();
        let mut model = init_model(&config(), 40, 40).unwrap();
        let layout = model.param_layout();
        let mut p = model.params();
        for slots in &layout.layers {
            p[slots.threshold] = 1e9;
        }
        model.set_params(&p).unwrap();
        let audit = sparsity_audit(&model, &samples, 8).unwrap();
        assert_eq!(audit.total, 0.0);
    }

    #[test]
    fn anytime_rejects_zero_and_emits_one_row_per_t() {
        let samples = data();
        let model = init_model(&config(), 40, 40).unwrap();
        assert!(anytime_eval(&model, &samples, &[0, 4]).is_err());
        let curve = anytime_eval(&model, &samples, &[1, 4, 8, 12]).unwrap();
        assert_eq!(curve.iter().map(|p| p.timesteps).collect::<Vec<_>>(), vec![1, 4, 8, 12]);
    }

    #[test]
    fn study_pairs_variants_by_seed() {
        let samples = data();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 3,
            ..config()
        };
        let report = stride_vs_pool_study(&cfg, &[4, 9], &samples, &samples).unwrap();
        assert_eq!(report.runs.len(), 4);
        assert_eq!(report.runs[1].row.architecture, "2sc5-mp-4sc3-mp-2");
        let pairs = report.spike_pairs();
        assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![4, 9]);
        assert!(report
            .to_csv()
            .starts_with("variant,architecture,seed,test_accuracy,total_spikes\n"));
        assert!(stride_vs_pool_study(&cfg, &[], &samples, &samples).is_err());
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let csv = history_csv(&[]);
        assert_eq!(
            csv.trim(),
            "epoch,lr,train_loss,train_acc,test_acc,epoch_seconds,train_spikes"
        );
    }
}
