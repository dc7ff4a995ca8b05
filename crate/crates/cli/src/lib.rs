//! `beamfuse` subcommands. Each command is an independent process that
//! reads and writes plain files; every output directory gets the merged
//! config echoed as `config.txt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use beamfuse_core::config::{hex_hash, RunConfig};
use beamfuse_core::dataset::{read_json, write_atomic, write_json, write_sequence, Dataset, Manifest};
use beamfuse_core::labeling::{label_dataset, LabelConfig, LabelSet};
use beamfuse_core::mapping::{self, Extent, MapMeta};
use beamfuse_core::metrics::MetricReport;
use beamfuse_core::model::{load_checkpoint, save_checkpoint, FusionNet, Modality, ModelConfig, NormStats, Sidecar, Variant};
use beamfuse_core::simulator::Simulator;
use beamfuse_core::training::{
    evaluate, fit, gather, render_log, split_by_sequence, LogRow, LossWeights, Sample, Split,
};
use beamfuse_core::{CoreError, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const LABELS_FILE: &str = "labels.json";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
const MODEL_SALT: u64 = 0x6D6F_6465_6C00_0001;
const EVAL_BATCH: usize = 128;

#[derive(Debug, Parser)]
#[command(name = "beamfuse", version, about = "Occlusion-aware multimodal beam prediction workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate sequences, split them and write labels.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the fusion network or a single-modality baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// camera, lidar, radar, gps, mmwave or all
        #[arg(long, default_value = "all")]
        modality: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split and write report.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to `<checkpoint>/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Aggregate test-split LiDAR into a map and overlay trajectories.
    Map {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and test all five baselines plus fusion.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Config file plus overrides. Flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` file with `#` comments.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key, repeatable: `--set lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub snapshots: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

impl ConfigArgs {
    /// Layers the file and flags over `base`, then validates.
    pub fn merge(&self, mut base: RunConfig) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
            base.apply_text(&text)?;
        }
        for pair in &self.set {
            base.set_pair(pair)?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("sequences", self.sequences.map(|v| v.to_string())),
            ("snapshots", self.snapshots.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                base.set(k, &v)?;
            }
        }
        base.validate()?;
        Ok(base)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, cfg } => cmd_gen(&cfg.merge(RunConfig::default())?, &out).map(|_| ()),
        Command::Train { data, out, modality, cfg } => {
            let variant: Variant = modality.parse()?;
            let (ds, labels, run) = open_dataset(&data, &cfg)?;
            cmd_train(&run, &ds, &labels, variant, &out, true).map(|_| ())
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
            cfg,
        } => {
            let split = Split::parse(&split)?;
            let out = out.unwrap_or_else(|| checkpoint.join(REPORT_FILE));
            cmd_eval(&checkpoint, &data, split, &cfg, &out).map(|_| ())
        }
        Command::Map {
            data,
            checkpoint,
            out,
            cfg,
        } => cmd_map(&checkpoint, &data, &cfg, &out).map(|_| ()),
        Command::Ablate { data, out, cfg } => {
            let (ds, labels, run) = open_dataset(&data, &cfg)?;
            cmd_ablate(&run, &ds, &labels, &out).map(|_| ())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!(
        "# config_hash = {}\n# dataset_hash = {}\n{}",
        hex_hash(cfg.config_hash()),
        hex_hash(cfg.dataset_hash()),
        cfg.to_text()
    );
    write_atomic(&dir.join(CONFIG_ECHO), text.as_bytes())
}

/// Summary of a `gen` run.
#[derive(Clone, Debug)]
pub struct GenSummary {
    pub total: usize,
    pub tau_db: f64,
    pub train_blocked_fraction: f64,
}

/// Simulates every sequence, writes records, manifest, split and labels.
/// The split is checked before anything is simulated.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<GenSummary> {
    let ids: Vec<u32> = (0..cfg.sequences as u32).collect();
    let split = split_by_sequence(&ids, [cfg.split_train, cfg.split_val, cfg.split_test], cfg.seed)?;
    let sim = Simulator::new(cfg)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(ids.len());
    let mut sequences = Vec::with_capacity(ids.len());
    for &id in &ids {
        let snaps = sim.sequence(id)?;
        entries.push(write_sequence(out, id, &snaps)?);
        sequences.push(snaps);
    }
    let manifest = Manifest::new(cfg, entries);
    write_json(&out.join("manifest.json"), &manifest)?;
    let ds = Dataset { manifest, sequences };
    let labels = label_dataset(&ds, &split, &LabelConfig::from_run(cfg))?;
    write_json(&out.join(LABELS_FILE), &labels)?;
    echo_config(out, cfg)?;
    let frac = labels.blocked_fraction(&split.train);
    eprintln!(
        "gen: {} snapshots in {} sequences, tau = {:.3} dB, train blocked fraction {:.4}",
        ds.total(),
        ids.len(),
        labels.tau_db,
        frac
    );
    Ok(GenSummary {
        total: ds.total(),
        tau_db: labels.tau_db,
        train_blocked_fraction: frac,
    })
}

/// Loads dataset and labels and merges the config over the generating one.
/// Overrides that would change the dataset are refused.
pub fn open_dataset(dir: &Path, args: &ConfigArgs) -> Result<(Dataset, LabelSet, RunConfig)> {
    let ds = Dataset::load(dir)?;
    let labels: LabelSet = read_json(&dir.join(LABELS_FILE))?;
    if labels.dataset_hash != ds.manifest.dataset_hash {
        return Err(CoreError::Consistency(format!(
            "labels were built for dataset {} but the manifest says {}",
            labels.dataset_hash, ds.manifest.dataset_hash
        )));
    }
    let cfg = args.merge(ds.manifest.run_config()?)?;
    if hex_hash(cfg.dataset_hash()) != ds.manifest.dataset_hash {
        return Err(CoreError::Consistency(
            "config changes keys that shaped the dataset; regenerate instead".into(),
        ));
    }
    Ok((ds, labels, cfg))
}

fn train_snapshots<'a>(train: &[Sample<'a>]) -> Vec<&'a beamfuse_core::Snapshot> {
    train.iter().map(|s| s.snap).collect()
}

/// Outcome of `train`: the test-split report of the best checkpoint.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub sidecar: Sidecar,
    pub test: MetricReport,
    pub seconds: f64,
}

pub fn cmd_train(
    cfg: &RunConfig,
    ds: &Dataset,
    labels: &LabelSet,
    variant: Variant,
    out: &Path,
    verbose: bool,
) -> Result<TrainSummary> {
    let start = Instant::now();
    let split = &labels.split;
    let train = gather(ds, labels, &split.train)?;
    let val = gather(ds, labels, &split.val)?;
    let test = gather(ds, labels, &split.test)?;
    let stats = NormStats::from_train(&train_snapshots(&train))?;
    let train_y: Vec<u8> = train.iter().map(|s| s.y_blk).collect();
    let weights = LossWeights::new(cfg, &train_y)?;
    let mut net = FusionNet::new(ModelConfig::from_run(cfg), variant, stats, cfg.seed ^ MODEL_SALT)?;
    create_dir(out)?;
    echo_config(out, cfg)?;
    let tag = variant.name();
    let outcome = fit(&mut net, &train, &val, &weights, cfg, |row: &LogRow| {
        if verbose {
            eprintln!(
                "train[{tag}] epoch {:>3} {:<5} loss {:.4} top1 {:.4} f1 {:.4} rmse {:.3} lr {:.1e} ({:.0}s)",
                row.epoch,
                row.split.name(),
                row.loss.total,
                row.metrics.top1,
                row.metrics.f1_blk,
                row.metrics.rmse,
                row.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    net.params.copy_from(&outcome.best)?;
    let sidecar = save_checkpoint(out, &net, cfg, labels.tau_db, outcome.best_epoch)?;
    let test_stats = beamfuse_core::training::validate(&net, &test, &weights, EVAL_BATCH, cfg.n0_dbm)?;
    let mut rows = outcome.rows;
    rows.push(LogRow {
        epoch: outcome.best_epoch,
        split: Split::Test,
        loss: test_stats.loss,
        metrics: test_stats.metrics.clone(),
        lr: rows.last().map_or(cfg.lr, |r| r.lr),
    });
    write_atomic(&out.join(LOG_FILE), render_log(&rows).as_bytes())?;
    let seconds = start.elapsed().as_secs_f64();
    if verbose {
        eprintln!(
            "train[{tag}] best epoch {} test top1 {:.4} top3 {:.4} f1 {:.4} rmse {:.3} in {seconds:.0}s",
            outcome.best_epoch, test_stats.metrics.top1, test_stats.metrics.top3, test_stats.metrics.f1_blk, test_stats.metrics.rmse
        );
    }
    Ok(TrainSummary {
        sidecar,
        test: test_stats.metrics,
        seconds,
    })
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub split: String,
    pub modality: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub config_hash: String,
    pub dataset_hash: String,
    pub checkpoint: String,
    pub best_epoch: usize,
}

/// Loads a checkpoint with its dataset and refuses mismatched inputs.
fn open_checkpoint(ckpt: &Path, data: &Path, args: &ConfigArgs) -> Result<(FusionNet, Sidecar, Dataset, LabelSet, RunConfig)> {
    let (net, side) = load_checkpoint(ckpt)?;
    let ds = Dataset::load(data)?;
    let labels: LabelSet = read_json(&data.join(LABELS_FILE))?;
    let cfg = args.merge(side.run_config()?)?;
    let checks = [
        ("config", hex_hash(cfg.config_hash()), side.config_hash.clone()),
        ("dataset", ds.manifest.dataset_hash.clone(), side.dataset_hash.clone()),
        ("labels", labels.dataset_hash.clone(), side.dataset_hash.clone()),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(CoreError::Consistency(format!(
                "{what} hash {got} does not match checkpoint's {want}"
            )));
        }
    }
    if labels.tau_db != side.tau_db {
        return Err(CoreError::Consistency("label threshold differs from the checkpoint's".into()));
    }
    Ok((net, side, ds, labels, cfg))
}

pub fn cmd_eval(ckpt: &Path, data: &Path, split: Split, args: &ConfigArgs, out: &Path) -> Result<Report> {
    let (net, side, ds, labels, cfg) = open_checkpoint(ckpt, data, args)?;
    let samples = gather(&ds, &labels, labels.split.ids(split))?;
    let (_, metrics) = evaluate(&net, &samples, EVAL_BATCH, cfg.n0_dbm)?;
    let report = Report {
        split: split.name().into(),
        modality: side.modality.clone(),
        metrics,
        config_hash: side.config_hash.clone(),
        dataset_hash: side.dataset_hash.clone(),
        checkpoint: side.checkpoint_id.clone(),
        best_epoch: side.best_epoch,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        echo_config(dir, &cfg)?;
    }
    write_json(out, &report)?;
    eprintln!(
        "eval[{}] {}: top1 {:.4} top3 {:.4} se_drop {:.4} f1 {:.4} rmse {:.3}",
        report.modality,
        report.split,
        report.metrics.top1,
        report.metrics.top3,
        report.metrics.se_drop,
        report.metrics.f1_blk,
        report.metrics.rmse
    );
    Ok(report)
}

pub fn cmd_map(ckpt: &Path, data: &Path, args: &ConfigArgs, out: &Path) -> Result<MapMeta> {
    let (net, side, ds, labels, cfg) = open_checkpoint(ckpt, data, args)?;
    let ids = &labels.split.test;
    let samples = gather(&ds, &labels, ids)?;
    let snaps: Vec<_> = samples.iter().map(|s| s.snap).collect();
    let pred = net.predict(&snaps, EVAL_BATCH)?.pose;
    let extent = Extent::DEFAULT;
    let voxel = (cfg.voxel > 0.0).then_some(cfg.voxel);
    let map = mapping::aggregate_map(&snaps, &extent, voxel);
    let grid = mapping::rasterize(&map, &extent, cfg.map_cell)?;
    let mut truth_lines = Vec::with_capacity(ids.len());
    let mut pred_lines = Vec::with_capacity(ids.len());
    let mut at = 0;
    for &id in ids {
        let n = ds.sequence(id).map_or(0, <[_]>::len);
        truth_lines.push(snaps[at..at + n].iter().map(|s| s.truth).collect::<Vec<_>>());
        pred_lines.push(pred[at..at + n].to_vec());
        at += n;
    }
    let img = mapping::overlay(&grid, &truth_lines, &pred_lines, cfg.map_scale)?;
    let truth: Vec<[f32; 2]> = snaps.iter().map(|s| s.truth).collect();
    let t: Vec<u32> = snaps.iter().map(|s| s.t).collect();
    let csv = mapping::trajectories_csv(&t, &truth, &pred)?;
    let drift = mapping::drift_summary(&truth, &pred)?;
    create_dir(out)?;
    write_atomic(&out.join("map.ppm"), &img.to_ppm())?;
    write_atomic(&out.join("trajectories.csv"), csv.as_bytes())?;
    let meta = MapMeta {
        extent,
        cell: cfg.map_cell,
        scale: cfg.map_scale,
        width_px: img.width,
        height_px: img.height,
        transform: img.transform,
        points: map.points.len(),
        snapshots: map.snapshots,
        drift,
        config_hash: side.config_hash.clone(),
        checkpoint: side.checkpoint_id.clone(),
    };
    write_json(&out.join("map_meta.json"), &meta)?;
    echo_config(out, &cfg)?;
    eprintln!(
        "map: {} points, {}x{} px, bias ({:.3}, {:.3}) m, max error {:.3} m",
        meta.points, meta.width_px, meta.height_px, drift.bias[0], drift.bias[1], drift.max_error
    );
    Ok(meta)
}

/// One row of the comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub modality: String,
    pub top1: f64,
    pub top3: f64,
    pub se_drop: f64,
    pub f1_blk: f64,
    pub rmse: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

pub fn cmd_ablate(cfg: &RunConfig, ds: &Dataset, labels: &LabelSet, out: &Path) -> Result<Vec<AblationRow>> {
    let variants = Modality::ALL.into_iter().map(Variant::Unimodal).chain([Variant::Fusion]);
    let mut rows = Vec::new();
    for v in variants {
        let s = cmd_train(cfg, ds, labels, v, &out.join(v.name()), true)?;
        rows.push(AblationRow {
            modality: v.name().into(),
            top1: s.test.top1,
            top3: s.test.top3,
            se_drop: s.test.se_drop,
            f1_blk: s.test.f1_blk,
            rmse: s.test.rmse,
            best_epoch: s.sidecar.best_epoch,
            seconds: s.seconds,
        });
    }
    let mut csv = String::from("modality,top1,top3,se_drop,f1_blk,rmse\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.modality, r.top1, r.top3, r.se_drop, r.f1_blk, r.rmse));
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_json(&out.join("ablation.json"), &rows)?;
    echo_config(out, cfg)?;
    eprint!("{csv}");
    Ok(rows)
}
