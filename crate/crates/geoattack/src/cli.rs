//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use geoattack_core::ga::AttackResources;
use geoattack_core::metrics::score_batch;
use geoattack_core::partition::{self, PartitionEvaluation};
use geoattack_core::zoo::Classifier;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Family};
use crate::container::{self, Container};
use crate::output::{self, ScoreSummary};
use crate::pipeline::{self as pl, Layout};

#[derive(Debug, Parser)]
#[command(name = "geoattack", version, about = "Geometry-aware transfer attacks on a toy model zoo")]
pub struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fixed,
    Ga,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the classifiers and the autoencoder.
    TrainZoo,
    /// Transfer rates between the pool models.
    TransferMatrix,
    /// Attack the evaluation inputs and score them on the test model.
    Attack {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Overrides the attack family from the config.
        #[arg(long, value_enum)]
        family: Option<Family>,
    },
    /// Partition loss of every train/validation split of the pool.
    PartitionSearch {
        /// Also run the budget search for every split and correlate.
        #[arg(long)]
        measure: bool,
    },
    /// Score an adversarial container against the test model.
    Score {
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainZoo => "train-zoo",
            Command::TransferMatrix => "transfer-matrix",
            Command::Attack { .. } => "attack",
            Command::PartitionSearch { .. } => "partition-search",
            Command::Score { .. } => "score",
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve()?;
    let layout = Layout::new(&cli.out);
    std::fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
    output::write_json(&layout.root.join(format!("{}.config.json", cli.command.name())), &cfg)?;
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenData => gen_data(&cfg, &layout),
        Command::TrainZoo => train_zoo(&cfg, &layout, jobs),
        Command::TransferMatrix => transfer_matrix(&cfg, &layout, jobs),
        Command::Attack { mode, family } => attack(&cfg, &layout, mode, family.unwrap_or(cfg.family), jobs),
        Command::PartitionSearch { measure } => partition_search(&cfg, &layout, measure, jobs),
        Command::Score { input } => score(&cfg, &layout, &input),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let data = pl::generate_dataset(cfg)?;
    let c = container::dataset_to_container(&data);
    c.write(&layout.dataset())?;
    println!(
        "wrote {} ({} images, sha256 {})",
        layout.dataset().display(),
        data.len(),
        sha256_hex(&c.to_bytes())
    );
    Ok(())
}

fn train_zoo(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> anyhow::Result<()> {
    let data = pl::load_dataset(layout)?;
    let zoo = pl::train_zoo(cfg, &data, jobs)?;
    for (m, id) in zoo.models.iter().zip(cfg.model_ids()) {
        container::classifier_to_container(m).write(&layout.model(&id))?;
    }
    container::autoencoder_to_container(&zoo.autoencoder).write(&layout.autoencoder())?;
    output::write_accuracy(&layout.accuracy(), &zoo.accuracy)?;
    let mut failures = Vec::new();
    for r in &zoo.accuracy {
        println!("{:24} test {:.4} train {:.4}", r.id, r.test_accuracy, r.train_accuracy);
        if r.test_accuracy < cfg.zoo.accuracy_gate {
            failures.push(format!("{} accuracy {} < {}", r.id, r.test_accuracy, cfg.zoo.accuracy_gate));
        }
    }
    let rec = zoo.autoencoder.reconstruction_error;
    println!("{:24} reconstruction mse {rec:.5}", "autoencoder");
    if rec > cfg.zoo.reconstruction_gate {
        failures.push(format!("autoencoder error {rec} > {}", cfg.zoo.reconstruction_gate));
    }
    if !failures.is_empty() {
        bail!("training gates failed: {}", failures.join("; "));
    }
    Ok(())
}

fn transfer_matrix(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> anyhow::Result<()> {
    let data = pl::load_dataset(layout)?;
    let (models, _) = pl::load_zoo(cfg, layout)?;
    let inputs = pl::evaluation_inputs(&data, &models, cfg.evaluation_inputs)?;
    let w = pl::compute_transfer_matrix(cfg, &data, &models, &inputs, jobs)?;
    output::write_transfer_matrix(&layout.transfer_matrix(), &w)?;
    println!("wrote {} over {} inputs", layout.transfer_matrix().display(), inputs.len());
    Ok(())
}

#[derive(Serialize)]
struct PartitionInfo {
    train: Vec<String>,
    validation: Vec<String>,
}

#[derive(Serialize)]
struct AttackSummary {
    mode: &'static str,
    family: Family,
    test_model: String,
    partition: PartitionInfo,
    inputs: usize,
    /// η of the records in `records.csv` (budget search only).
    eta: Option<f64>,
    score: ScoreSummary,
    /// Best row of the η or budget sweep.
    best_key: f64,
    best: ScoreSummary,
}

fn attack(cfg: &ExperimentConfig, layout: &Layout, mode: Mode, family: Family, jobs: usize) -> anyhow::Result<()> {
    let data = pl::load_dataset(layout)?;
    let (models, ae) = pl::load_zoo(cfg, layout)?;
    let inputs = pl::evaluation_inputs(&data, &models, cfg.evaluation_inputs)?;
    let w = match cfg.partition {
        crate::config::PartitionChoice::Auto => Some(pl::compute_transfer_matrix(cfg, &data, &models, &inputs, jobs)?),
        _ => None,
    };
    let (train, validation) = pl::resolve_partition(cfg, w.as_ref())?;
    let f: Vec<&Classifier> = train.iter().map(|&i| &models[i]).collect();
    let h: Vec<&Classifier> = validation.iter().map(|&i| &models[i]).collect();
    let test = &models[cfg.test_model];
    let ga_cfg = cfg.ga(family);
    let res = AttackResources {
        autoencoder: Some(&ae),
        admix_pool: None,
    };
    let metric = ga_cfg.inner.metric();
    let ids = cfg.model_ids();
    let dir = layout.attack_dir(if mode == Mode::Ga { "ga" } else { "fixed" }, family);
    let (records, sweep, key, eta) = match mode {
        Mode::Ga => {
            let traj = pl::ga_trajectories(&data, &inputs, &f, &h, &ga_cfg, &res, jobs)?;
            let sweep = pl::eta_sweep(&traj, &data, &inputs, &cfg.eta_grid, metric, test)?;
            let records = pl::select_records(&traj, &data, &inputs, cfg.eta, metric)?;
            (records, sweep, "eta", Some(cfg.eta))
        }
        Mode::Fixed => {
            let mut all = Vec::new();
            let mut sweep = Vec::new();
            for eps_k in ga_cfg.schedule()? {
                let recs = pl::fixed_records(&data, &inputs, &f, eps_k, &ga_cfg, &res, jobs)?;
                sweep.push((eps_k, score_batch(&recs, test)?));
                all.extend(recs);
            }
            (all, sweep, "budget", None)
        }
    };
    let report = score_batch(&records, test)?;
    output::write_records(&dir.join("records.csv"), &report)?;
    output::write_sweep(&dir.join(format!("{key}_sweep.csv")), key, &sweep)?;
    pl::records_to_container(&records)?.write(&dir.join("adversarial.bin"))?;
    let (best_key, best) = sweep
        .iter()
        .reduce(|b, r| if r.1.s_total > b.1.s_total { r } else { b })
        .context("empty sweep")?;
    let summary = AttackSummary {
        mode: if mode == Mode::Ga { "ga" } else { "fixed" },
        family,
        test_model: ids[cfg.test_model].clone(),
        partition: PartitionInfo {
            train: train.iter().map(|&i| ids[i].clone()).collect(),
            validation: validation.iter().map(|&i| ids[i].clone()).collect(),
        },
        inputs: inputs.len(),
        eta,
        score: (&report).into(),
        best_key: *best_key,
        best: best.into(),
    };
    output::write_json(&dir.join("score.json"), &summary)?;
    for (k, r) in &sweep {
        println!("{key} {k:>8}: S_total {:.5}  TSR {:.3}  S_APR {:.5}", r.s_total, r.transfer_rate, r.s_apr);
    }
    println!("best {key} {best_key}: S_total {}", best.s_total);
    Ok(())
}

/// Best `S_total` over the η grid for one split.
#[allow(clippy::too_many_arguments)]
pub fn split_score(
    cfg: &ExperimentConfig,
    data: &geoattack_core::zoo::ToyDataset,
    models: &[Classifier],
    inputs: &[usize],
    train: &[usize],
    validation: &[usize],
    res: &AttackResources<'_>,
    jobs: usize,
) -> anyhow::Result<f64> {
    let f: Vec<&Classifier> = train.iter().map(|&i| &models[i]).collect();
    let h: Vec<&Classifier> = validation.iter().map(|&i| &models[i]).collect();
    let ga_cfg = cfg.ga(cfg.family);
    let traj = pl::ga_trajectories(data, inputs, &f, &h, &ga_cfg, res, jobs)?;
    let sweep = pl::eta_sweep(&traj, data, inputs, &cfg.eta_grid, ga_cfg.inner.metric(), &models[cfg.test_model])?;
    Ok(sweep.iter().map(|(_, r)| r.s_total).fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Serialize)]
struct PartitionSummary {
    pool: Vec<String>,
    k: usize,
    splits: usize,
    best_by_loss: PartitionInfo,
    best_loss: f64,
    measured: bool,
    pearson_r: Option<f64>,
}

fn partition_search(cfg: &ExperimentConfig, layout: &Layout, measure: bool, jobs: usize) -> anyhow::Result<()> {
    let data = pl::load_dataset(layout)?;
    let (models, ae) = pl::load_zoo(cfg, layout)?;
    let inputs = pl::evaluation_inputs(&data, &models, cfg.evaluation_inputs)?;
    let w = pl::compute_transfer_matrix(cfg, &data, &models, &inputs, jobs)?;
    output::write_transfer_matrix(&layout.transfer_matrix(), &w)?;
    let local: Vec<usize> = (0..cfg.pool.len()).collect();
    let res = AttackResources {
        autoencoder: Some(&ae),
        admix_pool: None,
    };
    let to_zoo = |v: &[usize]| -> Vec<usize> { v.iter().map(|&i| cfg.pool[i]).collect() };
    let mut rows = Vec::new();
    for (train, validation) in partition::enumerate_partitions(&local, cfg.partition_k)? {
        let loss = partition::partition_loss(&w, &train, &validation)?;
        let (zt, zv) = (to_zoo(&train), to_zoo(&validation));
        let s_total = if measure {
            Some(split_score(cfg, &data, &models, &inputs, &zt, &zv, &res, jobs)?)
        } else {
            None
        };
        rows.push(PartitionEvaluation {
            train: zt,
            validation: zv,
            loss,
            s_total,
        });
    }
    output::write_partitions(&layout.root.join("partition_search.csv"), &rows)?;
    let pearson_r = if measure {
        let ls: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        let ss: Vec<f64> = rows.iter().filter_map(|r| r.s_total).collect();
        Some(partition::pearson(&ls, &ss)?)
    } else {
        None
    };
    let best = partition::best_partition(&w, &local, cfg.partition_k)?;
    let ids = cfg.model_ids();
    let names = |v: &[usize]| v.iter().map(|&i| ids[cfg.pool[i]].clone()).collect();
    let summary = PartitionSummary {
        pool: cfg.pool.iter().map(|&i| ids[i].clone()).collect(),
        k: cfg.partition_k,
        splits: rows.len(),
        best_by_loss: PartitionInfo {
            train: names(&best.train),
            validation: names(&best.validation),
        },
        best_loss: best.loss,
        measured: measure,
        pearson_r,
    };
    output::write_json(&layout.root.join("partition_summary.json"), &summary)?;
    println!("{} splits, best loss {}", rows.len(), best.loss);
    if let Some(r) = pearson_r {
        println!("pearson(loss, S_total) = {r}");
    }
    Ok(())
}

fn score(cfg: &ExperimentConfig, layout: &Layout, input: &Path) -> anyhow::Result<()> {
    let (models, _) = pl::load_zoo(cfg, layout)?;
    let c = Container::read(input).with_context(|| format!("reading {}", input.display()))?;
    let records = pl::records_from_container(&c)?;
    let report = score_batch(&records, &models[cfg.test_model])?;
    output::write_records(&layout.root.join("score_records.csv"), &report)?;
    output::write_json(&layout.root.join("score.json"), &ScoreSummary::from(&report))?;
    println!(
        "S_total {}  TSR {}  S_APR {}",
        report.s_total, report.transfer_rate, report.s_apr
    );
    Ok(())
}
