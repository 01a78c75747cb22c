use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use serde::Serialize;
use spikesparse::event_io::{
    build_voxel_grid, synth_dataset, write_grid_cache, LabeledGrid, Split, SynthConfig,
};
use spikesparse::spiking::{load_checkpoint, save_checkpoint, Network};
use spikesparse::training::{
    anytime_eval, evaluate, sparsity_audit, stride_vs_pool_study, train_with_progress, EpochRecord,
};

use crate::config::RunConfigFile;
use crate::data::{load_split, read_events, split_name, write_dataset};
use crate::exit::ExitError;

pub struct Context {
    pub config: RunConfigFile,
    hash: String,
    out: PathBuf,
    seed_flag: Option<u64>,
}

pub struct EvalTarget {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub timesteps: Option<usize>,
}

/// History row as written to `history.csv`. Wall-clock time lives in
/// `epoch_times.csv` so that two runs with the same seed produce identical
/// histories.
#[derive(Serialize)]
struct HistoryRow<'a> {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_acc: f64,
    test_acc: f64,
    train_spikes: f64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    epochs: usize,
    best_epoch: usize,
    best_test_acc: f64,
    final_test_acc: f64,
    total_seconds: f64,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config_hash: &'a str,
    checkpoint: String,
    split: &'a str,
    timesteps: usize,
    samples: usize,
    accuracy: f64,
}

impl Context {
    pub fn new(config: RunConfigFile, out: PathBuf, seed_flag: Option<u64>) -> Self {
        Context {
            hash: config.hash(),
            config,
            out,
            seed_flag,
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_file(name)?;
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    fn data_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map_or_else(|| PathBuf::from(&self.config.data.dir), Path::to_path_buf)
    }

    pub fn convert(
        &self,
        input: &Path,
        output: &Path,
        bin_width_us: Option<u64>,
        timesteps: Option<usize>,
        clip_us: Option<u64>,
    ) -> Result<()> {
        let bin = bin_width_us.unwrap_or(self.config.data.bin_width_us);
        let t = timesteps.unwrap_or(self.config.data.timesteps);
        let stream = read_events(input)?;
        let clip = clip_us.unwrap_or(bin.saturating_mul(t as u64));
        let grid = build_voxel_grid(&stream, bin, t, clip)?;
        fs::write(output, write_grid_cache(&grid))
            .with_context(|| format!("cannot write {}", output.display()))?;
        println!(
            "{} events -> {} nonzero voxels in {}x{}x{}x{} ({:.4}% sparse)",
            stream.len(),
            grid.nonzero_count(),
            grid.timesteps(),
            grid.channels(),
            grid.height(),
            grid.width(),
            100.0 * grid.sparsity()
        );
        Ok(())
    }

    pub fn synth(&self, config: SynthConfig) -> Result<()> {
        let data = synth_dataset(&config)?;
        write_dataset(&self.out, &data)?;
        println!(
            "wrote {} train and {} test samples ({} classes) to {}",
            data.train.len(),
            data.test.len(),
            config.classes,
            self.out.display()
        );
        Ok(())
    }

    fn load(&self, dir: &Path, split: Split, timesteps: usize) -> Result<Vec<LabeledGrid>> {
        load_split(dir, split, self.config.data.bin_width_us, timesteps)
    }

    pub fn train(&self) -> Result<()> {
        let config = self.config.train_config()?;
        let dir = self.data_dir(None);
        let train = self.load(&dir, Split::Train, config.timesteps)?;
        let test = self.load(&dir, Split::Test, config.timesteps)?;
        println!(
            "config {} | {} train / {} test samples | {}",
            self.hash,
            train.len(),
            test.len(),
            config.architecture
        );
        self.write("config.toml", self.config.to_toml())?;
        let started = Instant::now();
        let outcome = train_with_progress(&config, &train, &test, |r: &EpochRecord| {
            println!(
                "epoch {:>3}/{} lr {:.2e} loss {:.4} train_acc {:.4} test_acc {:.4} spikes {:.1} {:.1}s",
                r.epoch + 1,
                config.max_epochs,
                r.lr,
                r.train_loss,
                r.train_acc,
                r.test_acc,
                r.train_spikes,
                r.epoch_seconds
            );
        })?;

        let mut history = csv::Writer::from_writer(Vec::new());
        let mut times = csv::Writer::from_writer(Vec::new());
        times.write_record(["epoch", "epoch_seconds"])?;
        for r in &outcome.history {
            history.serialize(HistoryRow {
                epoch: r.epoch,
                lr: r.lr,
                train_loss: r.train_loss,
                train_acc: r.train_acc,
                test_acc: r.test_acc,
                train_spikes: r.train_spikes,
                config_hash: &self.hash,
            })?;
            times.write_record([r.epoch.to_string(), r.epoch_seconds.to_string()])?;
        }
        self.write("history.csv", history.into_inner()?)?;
        self.write("epoch_times.csv", times.into_inner()?)?;
        self.write("best.ckpt", save_checkpoint(&outcome.model))?;
        self.write("final.ckpt", save_checkpoint(&outcome.final_model))?;
        let summary = TrainSummary {
            config_hash: &self.hash,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            best_test_acc: outcome.best_test_acc,
            final_test_acc: outcome.history.last().map_or(0.0, |r| r.test_acc),
            total_seconds: started.elapsed().as_secs_f64(),
        };
        self.write("train.json", serde_json::to_string_pretty(&summary)?)?;
        println!(
            "best test accuracy {:.4} at epoch {}; outputs in {}",
            outcome.best_test_acc,
            outcome.best_epoch + 1,
            self.out.display()
        );
        Ok(())
    }

    fn load_model(&self, path: &Path) -> Result<Network> {
        let bytes = fs::read(path).map_err(|e| {
            ExitError::missing(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    fn eval_setup(
        &self,
        target: &EvalTarget,
        timesteps: usize,
    ) -> Result<(Network, Vec<LabeledGrid>)> {
        if timesteps == 0 {
            return Err(ExitError::config("evaluation needs at least one timestep").into());
        }
        let model = self.load_model(&target.checkpoint)?;
        let data = self.load(
            &self.data_dir(target.data.as_deref()),
            target.split,
            timesteps,
        )?;
        Ok((model, data))
    }

    pub fn eval(&self, target: &EvalTarget) -> Result<()> {
        let t = target.timesteps.unwrap_or(self.config.eval.timesteps);
        let (model, data) = self.eval_setup(target, t)?;
        let accuracy = evaluate(&model, &data, t)?;
        let report = EvalReport {
            config_hash: &self.hash,
            checkpoint: target.checkpoint.display().to_string(),
            split: split_name(target.split),
            timesteps: t,
            samples: data.len(),
            accuracy,
        };
        self.write("eval.json", serde_json::to_string_pretty(&report)?)?;
        println!(
            "{} accuracy {:.4} over {} samples at T = {t}",
            report.split, accuracy, report.samples
        );
        Ok(())
    }

    pub fn sparsity(&self, target: &EvalTarget) -> Result<()> {
        let t = target.timesteps.unwrap_or(self.config.eval.timesteps);
        let (model, data) = self.eval_setup(target, t)?;
        let audit = sparsity_audit(&model, &data, t)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(["layer", "count", "percent", "config_hash"])?;
        for l in &audit.layers {
            csv.write_record([
                l.layer.clone(),
                l.count.to_string(),
                l.percent.to_string(),
                self.hash.clone(),
            ])?;
        }
        csv.write_record([
            "total".into(),
            audit.total.to_string(),
            String::new(),
            self.hash.clone(),
        ])?;
        self.write("sparsity.csv", csv.into_inner()?)?;
        let mut json: serde_json::Value = serde_json::from_str(&audit.to_json())?;
        json["config_hash"] = self.hash.clone().into();
        self.write("sparsity.json", serde_json::to_string_pretty(&json)?)?;
        for l in &audit.layers {
            println!(
                "{:<8} {:>12.1} spikes {:>8.3}%",
                l.layer, l.count, l.percent
            );
        }
        println!(
            "{:<8} {:>12.1} spikes per sample at T = {t}",
            "total", audit.total
        );
        Ok(())
    }

    pub fn anytime(&self, target: &EvalTarget, t_list: Option<Vec<usize>>) -> Result<()> {
        let t_values = t_list.unwrap_or_else(|| self.config.eval.anytime.clone());
        let Some(&t_max) = t_values.iter().max() else {
            return Err(ExitError::config("anytime needs at least one T").into());
        };
        let (model, data) = self.eval_setup(target, t_max)?;
        let points = anytime_eval(&model, &data, &t_values)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(["timesteps", "accuracy", "config_hash"])?;
        for p in &points {
            csv.write_record([
                p.timesteps.to_string(),
                p.accuracy.to_string(),
                self.hash.clone(),
            ])?;
            println!("T = {:>4}  accuracy {:.4}", p.timesteps, p.accuracy);
        }
        self.write("anytime.csv", csv.into_inner()?)?;
        let json = serde_json::json!({ "config_hash": self.hash, "points": points });
        self.write("anytime.json", serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }

    pub fn study_stride(&self, seeds: Option<Vec<u64>>) -> Result<()> {
        let seeds = seeds.unwrap_or_else(|| match self.seed_flag {
            Some(s) => vec![s],
            None => self.config.eval.study_seeds.clone(),
        });
        let config = self.config.train_config()?;
        let dir = self.data_dir(None);
        let train = self.load(&dir, Split::Train, config.timesteps)?;
        let test = self.load(&dir, Split::Test, config.timesteps)?;
        let report = stride_vs_pool_study(&config, &seeds, &train, &test)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record([
            "variant",
            "architecture",
            "seed",
            "test_accuracy",
            "total_spikes",
            "config_hash",
        ])?;
        for run in &report.runs {
            let r = &run.row;
            csv.write_record([
                r.variant.clone(),
                r.architecture.clone(),
                r.seed.to_string(),
                r.test_accuracy.to_string(),
                r.total_spikes.to_string(),
                self.hash.clone(),
            ])?;
            println!(
                "{:<8} {:<28} seed {:>3} accuracy {:.4} spikes {:.1}",
                r.variant, r.architecture, r.seed, r.test_accuracy, r.total_spikes
            );
        }
        self.write("study.csv", csv.into_inner()?)?;
        let mut json: serde_json::Value = serde_json::from_str(&report.to_json())?;
        json["config_hash"] = self.hash.clone().into();
        self.write("study.json", serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }
}
