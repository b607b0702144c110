//! The `panoda` command line: dataset generation, training, evaluation and
//! report tables.
//!
//! Failures print one line, `error[<class>]: <message>`, and exit with the
//! class's code. Only two environment variables are read:
//! `PANODA_DATA_ROOT` (dataset root) and `PANODA_RUN_ROOT` (parent of run
//! directories, default `runs`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, format_class_table, format_gap_table, gap_report, gap_row, EvalReport, GapRow,
};
use crate::scene::{load_split, synthesize, write_sample, CameraSpec, Domain};
use crate::trainer::{run_training, RunPaths, TrainState};

pub const DATA_ROOT_ENV: &str = "PANODA_DATA_ROOT";
pub const RUN_ROOT_ENV: &str = "PANODA_RUN_ROOT";
const USAGE_EXIT: i32 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "panoda",
    version,
    about = "Pinhole-to-panorama domain adaptation for semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic pinhole/panorama dataset described by a config.
    GenData {
        /// Run config (defaults to the desk profile).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; defaults to $PANODA_DATA_ROOT, then `data.root`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a segmenter, with or without adaptation, into runs/<name>.
    Train {
        /// Run config; optional with --resume (the run's saved config is used).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run name; defaults to the config file stem.
        #[arg(long)]
        name: Option<String>,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a run's checkpoint and write reports/eval_<split>.jsonl.
    Eval {
        /// Run directory.
        run: PathBuf,
        /// Splits to evaluate; defaults to the source and target val splits.
        #[arg(long = "split")]
        splits: Vec<String>,
        /// Checkpoint to load instead of checkpoints/latest.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print per-class and domain-gap tables for evaluated runs.
    Report {
        /// Run directories; defaults to `report.runs` of --config.
        runs: Vec<PathBuf>,
        /// Config supplying the `report` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backbone column of the gap table; defaults to `report.backbone`.
        #[arg(long)]
        backbone: Option<String>,
        /// Extra gap rows as JSON lines `{name, backbone, miou_src, miou_tgt}`.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Source-domain column header; defaults to the source val split.
        #[arg(long)]
        source_label: Option<String>,
        /// Target-domain column header; defaults to the eval split.
        #[arg(long)]
        target_label: Option<String>,
        /// Where to write the tables; defaults to reports/report.txt of the
        /// first run (stdout only when there is no run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return USAGE_EXIT;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, out),
        Command::Train {
            config,
            name,
            resume,
        } => train(config.as_deref(), name, resume),
        Command::Eval {
            run,
            splits,
            checkpoint,
        } => eval(&run, &splits, checkpoint.as_deref()),
        Command::Report {
            runs,
            config,
            backbone,
            rows,
            source_label,
            target_label,
            out,
        } => report(
            runs,
            config.as_deref(),
            backbone,
            rows.as_deref(),
            [source_label, target_label],
            out,
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::from_toml(""),
    }
}

fn env_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn data_root(cfg: &RunConfig) -> PathBuf {
    env_path(DATA_ROOT_ENV).unwrap_or_else(|| PathBuf::from(&cfg.data.root))
}

pub fn run_root() -> PathBuf {
    env_path(RUN_ROOT_ENV).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Written next to the splits by `gen-data`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub complexity: usize,
    pub source_camera: CameraSpec,
    pub target_camera: CameraSpec,
    /// `(split, sample count, labeled)` in generation order.
    pub splits: Vec<(String, usize, bool)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let root = out.unwrap_or_else(|| data_root(&cfg));
    let manifest_path = root.join(MANIFEST_FILE);
    if root.exists() && !manifest_path.exists() {
        let non_empty = fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::invalid(format!(
                "{} is not empty and holds no {MANIFEST_FILE}; refusing to write a dataset there",
                root.display()
            )));
        }
    }
    let s = &cfg.synth;
    let d = &cfg.data;
    let plan = [
        (&d.source_split, s.source_count, &s.source_camera, true),
        (&d.target_split, s.target_count, &s.target_camera, false),
        (&d.source_val_split, s.val_count, &s.source_camera, true),
        (&d.target_val_split, s.val_count, &s.target_camera, true),
    ];
    let mut manifest = DatasetManifest {
        seed: s.seed,
        complexity: s.complexity,
        source_camera: s.source_camera.clone(),
        target_camera: s.target_camera.clone(),
        splits: Vec::new(),
    };
    for (split, count, cam, labeled) in plan {
        let dir = root.join(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let samples = synthesize(s.seed, split, count, s.complexity, cam, labeled)?;
        for (i, sample) in samples.iter().enumerate() {
            write_sample(&root, split, &format!("{i:05}"), sample)?;
        }
        eprintln!("wrote {count} samples to {}", dir.display());
        manifest.splits.push((split.clone(), count, labeled));
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

const RUN_CONFIG_FILE: &str = "config.toml";

fn train(config: Option<&Path>, name: Option<String>, resume: bool) -> Result<()> {
    let name = match (&name, config) {
        (Some(n), _) => n.clone(),
        (None, Some(p)) => p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("cannot derive a run name from the config path"))?
            .to_string(),
        (None, None) => return Err(Error::invalid("train needs --config or --name")),
    };
    let run_dir = run_root().join(&name);
    let saved = run_dir.join(RUN_CONFIG_FILE);
    let paths = RunPaths::new(&run_dir);
    let cfg = match (config, resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::load(&saved)?,
        (None, false) => return Err(Error::invalid("train needs --config unless resuming")),
    };
    let state = if resume {
        let ck = Checkpoint::load(&paths.latest())?;
        TrainState::from_checkpoint(&ck, &cfg)?
    } else {
        if paths.metrics.exists() || paths.checkpoints.exists() {
            return Err(Error::invalid(format!(
                "run {} already exists; pass --resume or pick another --name",
                run_dir.display()
            )));
        }
        TrainState::init(&cfg)?
    };
    fs::create_dir_all(run_dir.join("reports")).map_err(|e| Error::io(&run_dir, e))?;
    fs::write(&saved, cfg.to_toml()).map_err(|e| Error::io(&saved, e))?;

    let root = data_root(&cfg);
    let source = load_split(&root, &cfg.data.source_split, Domain::Source, true)?;
    let target = load_split(&root, &cfg.data.target_split, Domain::Target, false)?;
    let every = cfg.train.checkpoint_every;
    let start = state.iteration;
    eprintln!(
        "training {name}: iterations {start}..{} on {} source / {} target images",
        cfg.train.max_iter,
        source.len(),
        target.len()
    );
    run_training(&cfg, state, &source, &target, Some(&paths), |rec| {
        if (rec.iter + 1) % every == 0 {
            eprintln!("iter {:>7}  L_seg {:.4}  L_G {:.4}", rec.iter + 1, rec.l_seg, rec.l_g);
        }
    })?;
    eprintln!("checkpoint: {}", paths.latest().display());
    Ok(())
}

fn run_name(run: &Path) -> Result<String> {
    run.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid(format!("{} does not name a run directory", run.display())))
}

fn eval(run: &Path, splits: &[String], checkpoint: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(&run.join(RUN_CONFIG_FILE))?;
    let ck_path = checkpoint.map_or_else(|| RunPaths::new(run).latest(), Path::to_path_buf);
    let state = TrainState::from_checkpoint(&Checkpoint::load(&ck_path)?, &cfg)?;
    let model = run_name(run)?;
    let splits: Vec<String> = if splits.is_empty() {
        vec![cfg.data.source_val_split.clone(), cfg.eval.split.clone()]
    } else {
        splits.to_vec()
    };
    let root = data_root(&cfg);
    let reports_dir = run.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut reports = Vec::new();
    for split in &splits {
        let domain = if split == &cfg.data.source_val_split || split == &cfg.data.source_split {
            Domain::Source
        } else {
            Domain::Target
        };
        let data = load_split(&root, split, domain, true)?;
        let size = if split == &cfg.eval.split {
            cfg.eval.size
        } else {
            // other splits are scored at their stored resolution
            data.first()
                .map(|s| [s.width(), s.height()])
                .ok_or_else(|| Error::invalid(format!("split `{split}` is empty")))?
        };
        let r = evaluate_model(&state.generator, &data, size, &model, split)?;
        let path = reports_dir.join(format!("eval_{split}.jsonl"));
        fs::write(&path, r.to_json_line() + "\n").map_err(|e| Error::io(&path, e))?;
        reports.push(r);
    }
    print!("{}", format_class_table(&reports));
    Ok(())
}

/// Every report line under `<run>/reports/eval_*.jsonl`, in file-name order.
pub fn read_run_reports(run: &Path) -> Result<Vec<EvalReport>> {
    let dir = run.join("reports");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            out.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?,
            );
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RowRecord {
    name: String,
    backbone: String,
    miou_src: f64,
    miou_tgt: f64,
}

pub fn read_gap_rows(path: &Path) -> Result<Vec<GapRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let r: RowRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok(gap_row(&r.name, &r.backbone, r.miou_src, r.miou_tgt))
        })
        .collect()
}

/// Renders the report for `runs` plus any extra gap rows.
pub fn render_report(
    runs: &[PathBuf],
    backbone: &str,
    extra_rows: Vec<GapRow>,
    [source_label, target_label]: [Option<String>; 2],
) -> Result<String> {
    let mut all = Vec::new();
    let mut gaps = extra_rows;
    let mut labels: Option<(String, String)> = None;
    for run in runs {
        let cfg = RunConfig::load(&run.join(RUN_CONFIG_FILE))?;
        let reports = read_run_reports(run)?;
        if reports.is_empty() {
            return Err(Error::invalid(format!(
                "{} has no evaluation reports; run `panoda eval` first",
                run.display()
            )));
        }
        let find = |split: &str| reports.iter().find(|r| r.dataset == split);
        if let (Some(s), Some(t)) = (
            find(&cfg.data.source_val_split),
            find(&cfg.eval.split),
        ) {
            gaps.push(gap_report(s, t, backbone)?);
            labels.get_or_insert((s.dataset.clone(), t.dataset.clone()));
        }
        all.extend(reports);
    }
    let mut out = String::new();
    if !all.is_empty() {
        out.push_str("Per-class IoU (%)\n\n");
        out.push_str(&format_class_table(&all));
    }
    if !gaps.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let (src, tgt) = labels.unwrap_or(("Source".into(), "Target".into()));
        let src = source_label.unwrap_or(src);
        let tgt = target_label.unwrap_or(tgt);
        out.push_str("Domain gap (mIoU %)\n\n");
        out.push_str(&format_gap_table(&gaps, &src, &tgt));
    }
    Ok(out)
}

fn report(
    mut runs: Vec<PathBuf>,
    config: Option<&Path>,
    backbone: Option<String>,
    rows: Option<&Path>,
    labels: [Option<String>; 2],
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    if runs.is_empty() {
        runs = cfg.report.runs.iter().map(PathBuf::from).collect();
    }
    let extra = rows.map(read_gap_rows).transpose()?.unwrap_or_default();
    if runs.is_empty() && extra.is_empty() {
        return Err(Error::invalid("report needs run directories or --rows"));
    }
    let backbone = backbone.unwrap_or_else(|| cfg.report.backbone.clone());
    let text = render_report(&runs, &backbone, extra, labels)?;
    print!("{text}");
    let dest = out.or_else(|| runs.first().map(|r| r.join("reports").join("report.txt")));
    if let Some(p) = dest {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
