//! Command-line pipeline: merge → infer → subset/curve → set → trials → serve → risk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::correspondence::{match_maps, merge_labelers, tolerance_pixels, DEFAULT_TOLERANCE};
use crate::io_formats::{
    load_soft_map, master_from_json, master_to_json, parse_strength_list, read_file, set_image,
    threshold_matched, to_json_bytes, to_json_lines, trials_from_jsonl, write_file, FormatError,
    LabelsFile, PixelSetFile, StrengthsFile, SubsetFile,
};
use crate::label_model::{
    extract_orphans, segment_pixels, segment_strength, MasterMap, PixelId, SegmentCollection, SetTag,
    Source, DEFAULT_WINDOW, FORMAT_VERSION,
};
use crate::risk_eval::{build_subset, curve_to_csv, estimate_risk, risk_utility_curve, Pooling, DEFAULT_TAUS};
use crate::strength_inference::{
    run_em, EmConfig, MuMode, DEFAULT_EPSILON, DEFAULT_GRID, DEFAULT_MAX_ITERS, DEFAULT_SIGMA, DEFAULT_TOL,
};
use crate::trial_engine::{sample_trial_pairs, Journal, DEFAULT_TRIALS};
use crate::validation_sim::{recovery_experiment, SyntheticScenario};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "benchlab", version, about = "Boundary strength inference and forced-choice risk evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MuModeArg {
    Sigmoid,
    Raw,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Mode,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HumanSetArg {
    /// Every master pixel.
    S,
    /// Pixels marked by exactly one labeler.
    S1,
    /// Pixels with inferred strength at least --tau.
    SBarTau,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoSetArg {
    /// Top-confidence pixels, as many as the master map holds.
    A,
    /// Those of A with no human counterpart within tolerance.
    AMinusS,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge labelers' boundary maps into a master map.
    Merge {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer per-pixel strengths and labeler profiles with EM.
    Infer {
        #[arg(long)]
        master: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = MuModeArg::Sigmoid)]
        mu_mode: MuModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pixels whose strength is at least tau.
    Subset {
        #[arg(long)]
        strengths: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Risk-utility curve over a list of thresholds, as CSV.
    Curve {
        #[arg(long)]
        strengths: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAUS)]
        taus: Vec<f64>,
        /// JSON array of strengths, or a strengths file.
        #[arg(long)]
        algo_strengths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Human pixel set for trial generation.
    Set {
        /// Master maps, one per image.
        #[arg(long, required = true, num_args = 1..)]
        master: Vec<PathBuf>,
        /// Strengths files, matched to masters by image id.
        #[arg(long, num_args = 1..)]
        strengths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = HumanSetArg::S)]
        name: HumanSetArg,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Algorithm pixel set from soft boundary maps, matched in size to the masters.
    AlgoSet {
        #[arg(long, required = true, num_args = 1..)]
        master: Vec<PathBuf>,
        /// Soft maps in the same order as --master.
        #[arg(long, required = true, num_args = 1..)]
        soft: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = AlgoSetArg::A)]
        name: AlgoSetArg,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample forced-choice trials, one pair per image.
    Trials {
        #[arg(long)]
        human_set: PathBuf,
        #[arg(long)]
        algo_set: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate risk from forced-choice responses.
    Risk {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolingArg::Mode)]
        pooling: PoolingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve trials over HTTP and journal responses.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        trials: PathBuf,
        /// Originals named `<image_id>.png` or `<image_id>.jpg`.
        #[arg(long)]
        images_dir: Option<PathBuf>,
        #[arg(long)]
        journal: PathBuf,
    },
    /// Recover known strengths from simulated labels.
    Simulate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 2012)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> String {
        let (kind, message) = match self {
            Self::Input(m) => ("input", m),
            Self::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    read_file(path).map_err(input)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_file(path, bytes).map_err(runtime)
}

fn load_master(path: &Path) -> Result<MasterMap, CliError> {
    master_from_json(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn load_strengths(path: &Path) -> Result<StrengthsFile, CliError> {
    StrengthsFile::parse(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Sets the global thread pool from `BENCHLAB_THREADS` when present.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("BENCHLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| input(format!("BENCHLAB_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

#[derive(Serialize)]
struct OrphanSummary {
    master_pixels: usize,
    orphan_pixels: usize,
    orphan_fraction: f64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Merge { labels, tolerance, out } => cmd_merge(&labels, tolerance, &out),
        Command::Infer { master, sigma, grid, epsilon, max_iters, tol, mu_mode, out } => {
            let config = EmConfig {
                sigma,
                grid,
                epsilon,
                max_iters,
                tol,
                mu_mode: match mu_mode {
                    MuModeArg::Sigmoid => MuMode::Sigmoid,
                    MuModeArg::Raw => MuMode::Raw,
                },
            };
            cmd_infer(&master, &config, &out)
        }
        Command::Subset { strengths, tau, out } => cmd_subset(&strengths, tau, &out),
        Command::Curve { strengths, taus, algo_strengths, out } => cmd_curve(&strengths, &taus, &algo_strengths, &out),
        Command::Set { master, strengths, name, tau, out } => cmd_set(&master, &strengths, name, tau, &out),
        Command::AlgoSet { master, soft, name, tolerance, out } => cmd_algo_set(&master, &soft, name, tolerance, &out),
        Command::Trials { human_set, algo_set, n, window, seed, out } => {
            cmd_trials(&human_set, &algo_set, n, window, seed, &out)
        }
        Command::Risk { trials, responses, pooling, out } => {
            let pooling = match pooling {
                PoolingArg::Mode => Pooling::ModeVote,
                PoolingArg::Mean => Pooling::PerSubjectMean,
            };
            cmd_risk(&trials, &responses, pooling, &out)
        }
        Command::Serve { port, host, trials, images_dir, journal } => {
            let state = crate::service::AppState::load(&trials, images_dir.as_deref(), &journal).map_err(input)?;
            let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
            runtime_.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await.map_err(runtime)?;
                let addr = listener.local_addr().map_err(runtime)?;
                println!("listening on http://{addr}");
                crate::service::serve(listener, state).await.map_err(runtime)
            })
        }
        Command::Simulate { n, seed, out } => {
            let report = recovery_experiment(&SyntheticScenario::sharp_panel(n, seed), &EmConfig::default())
                .map_err(input)?;
            let bytes = to_json_bytes(&report);
            match out {
                Some(path) => write(&path, &bytes),
                None => {
                    print!("{}", String::from_utf8_lossy(&bytes));
                    Ok(())
                }
            }
        }
    }
}

pub fn cmd_merge(labels: &Path, tolerance: f64, out: &Path) -> Result<(), CliError> {
    if !(tolerance >= 0.0) || !tolerance.is_finite() {
        return Err(input(format!("tolerance must be a nonnegative fraction, got {tolerance}")));
    }
    let bytes = read(labels)?;
    let file = LabelsFile::parse(&bytes).map_err(|e| input(format!("{}: {e}", labels.display())))?;
    let maps = file.labeler_maps().map_err(|e| input(format!("{}: {e}", labels.display())))?;
    let d_max = tolerance_pixels(tolerance, file.width, file.height);
    let master = merge_labelers(&maps, d_max).map_err(input)?;
    write(out, &master_to_json(&master))?;
    let orphans = extract_orphans(&master).len();
    let summary = OrphanSummary {
        master_pixels: master.len(),
        orphan_pixels: orphans,
        orphan_fraction: if master.is_empty() { 0.0 } else { orphans as f64 / master.len() as f64 },
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

pub fn cmd_infer(master: &Path, config: &EmConfig, out: &Path) -> Result<(), CliError> {
    config.validate().map_err(input)?;
    let master = load_master(master)?;
    let em = run_em(&master, config).map_err(input)?;
    write(out, &to_json_bytes(&StrengthsFile::from_em(&master.image_id, &em)))
}

pub fn cmd_subset(strengths: &Path, tau: f64, out: &Path) -> Result<(), CliError> {
    if tau.is_nan() {
        return Err(input("tau must be a number"));
    }
    let file = load_strengths(strengths)?;
    let subset = build_subset(&file.strengths, tau);
    let doc = SubsetFile {
        format_version: FORMAT_VERSION,
        image_id: file.image_id,
        tau,
        pixel_ids: subset.pixel_ids,
        utility: subset.utility,
    };
    write(out, &to_json_bytes(&doc))
}

pub fn cmd_curve(strengths: &Path, taus: &[f64], algo: &Path, out: &Path) -> Result<(), CliError> {
    let file = load_strengths(strengths)?;
    let a = parse_strength_list(&read(algo)?).map_err(|e| input(format!("{}: {e}", algo.display())))?;
    let rows = risk_utility_curve(&file.strengths, taus, &a).map_err(input)?;
    write(out, curve_to_csv(&rows).as_bytes())
}

fn strengths_by_image(paths: &[PathBuf]) -> Result<BTreeMap<String, StrengthsFile>, CliError> {
    let mut out = BTreeMap::new();
    for p in paths {
        let f = load_strengths(p)?;
        if out.contains_key(&f.image_id) {
            return Err(input(format!("two strengths files for image {}", f.image_id)));
        }
        out.insert(f.image_id.clone(), f);
    }
    Ok(out)
}

fn check_unique_images(masters: &[MasterMap]) -> Result<(), CliError> {
    let mut seen = BTreeSet::new();
    for m in masters {
        if !seen.insert(m.image_id.as_str()) {
            return Err(input(format!("image {} given twice", m.image_id)));
        }
    }
    Ok(())
}

pub fn cmd_set(
    masters: &[PathBuf],
    strengths: &[PathBuf],
    name: HumanSetArg,
    tau: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let masters: Vec<MasterMap> = masters.iter().map(|p| load_master(p)).collect::<Result<_, _>>()?;
    check_unique_images(&masters)?;
    let strengths = strengths_by_image(strengths)?;
    let tag = match name {
        HumanSetArg::S => SetTag::S,
        HumanSetArg::S1 => SetTag::S1,
        HumanSetArg::SBarTau => SetTag::SBarTau,
    };
    if tag == SetTag::SBarTau && tau.is_none() {
        return Err(input("--name s-bar-tau needs --tau"));
    }
    let mut images = Vec::with_capacity(masters.len());
    for m in &masters {
        let field = strengths.get(&m.image_id).map(|f| &f.strengths);
        let members: BTreeSet<PixelId> = match tag {
            SetTag::S1 => extract_orphans(m),
            SetTag::SBarTau => {
                let field = field.ok_or_else(|| input(format!("no strengths for image {}", m.image_id)))?;
                build_subset(field, tau.expect("checked")).pixel_ids.into_iter().collect()
            }
            _ => m.pixels.iter().map(|p| p.pixel_id).collect(),
        };
        let mut pixels = BTreeMap::new();
        for id in members {
            let p = m.pixel(id).ok_or_else(|| input(format!("strengths name unknown pixel {id}")))?;
            pixels.insert(id, (p.position(), field.and_then(|f| f.get(id))));
        }
        images.push(set_image(&m.image_id, m.width, m.height, pixels));
    }
    let doc = PixelSetFile { format_version: FORMAT_VERSION, name: tag, tau, images };
    write(out, &to_json_bytes(&doc))
}

pub fn cmd_algo_set(
    masters: &[PathBuf],
    softs: &[PathBuf],
    name: AlgoSetArg,
    tolerance: f64,
    out: &Path,
) -> Result<(), CliError> {
    if masters.len() != softs.len() {
        return Err(input(format!("{} masters but {} soft maps", masters.len(), softs.len())));
    }
    let mut loaded = Vec::with_capacity(masters.len());
    for p in masters {
        loaded.push(load_master(p)?);
    }
    check_unique_images(&loaded)?;
    let mut images = Vec::with_capacity(loaded.len());
    for (m, soft_path) in loaded.iter().zip(softs) {
        let soft = load_soft_map(&read(soft_path)?).map_err(|e| input(format!("{}: {e}", soft_path.display())))?;
        if soft.width() != m.width || soft.height() != m.height {
            return Err(input(format!(
                "{}: soft map is {}x{}, image {} is {}x{}",
                soft_path.display(),
                soft.width(),
                soft.height(),
                m.image_id,
                m.width,
                m.height
            )));
        }
        let a = threshold_matched(&soft, m.len()).map_err(|e| match e {
            FormatError::Shortfall { .. } => input(format!("image {}: {e}", m.image_id)),
            other => input(other),
        })?;
        let keep: Vec<usize> = match name {
            AlgoSetArg::A => (0..a.len()).collect(),
            AlgoSetArg::AMinusS => {
                let human: Vec<_> = m.pixels.iter().map(|p| p.position()).collect();
                let d_max = tolerance_pixels(tolerance, m.width, m.height);
                match_maps(&human, &a, d_max).map_err(input)?.unmatched_new
            }
        };
        let pixels = keep.into_iter().map(|i| (i as PixelId, (a[i], None))).collect();
        images.push(set_image(&m.image_id, m.width, m.height, pixels));
    }
    let tag = match name {
        AlgoSetArg::A => SetTag::A,
        AlgoSetArg::AMinusS => SetTag::AMinusS,
    };
    let doc = PixelSetFile { format_version: FORMAT_VERSION, name: tag, tau: None, images };
    write(out, &to_json_bytes(&doc))
}

/// Cuts every image of a pixel set into window-sized segments.
pub fn segment_set(set: &PixelSetFile, window: u32) -> Result<SegmentCollection, CliError> {
    let source = match set.name {
        SetTag::A | SetTag::AMinusS => Source::Algorithm,
        _ => Source::Human,
    };
    let mut segments = Vec::new();
    for image in &set.images {
        let members: Vec<_> = image.pixels.iter().map(|p| (p.id, (p.row, p.col))).collect();
        let strengths: BTreeMap<PixelId, f64> =
            image.pixels.iter().filter_map(|p| p.strength.map(|s| (p.id, s))).collect();
        let mut pieces =
            segment_pixels(&image.image_id, image.width, image.height, &members, window, source).map_err(input)?;
        for s in &mut pieces {
            s.strength = segment_strength(s, &strengths);
        }
        segments.extend(pieces);
    }
    SegmentCollection::new(set.name, set.tau, segments).map_err(input)
}

pub fn cmd_trials(human: &Path, algo: &Path, n: usize, window: u32, seed: u64, out: &Path) -> Result<(), CliError> {
    let load = |p: &Path| -> Result<PixelSetFile, CliError> {
        PixelSetFile::parse(&read(p)?).map_err(|e| input(format!("{}: {e}", p.display())))
    };
    let human = segment_set(&load(human)?, window)?;
    let algo = segment_set(&load(algo)?, window)?;
    let trials = sample_trial_pairs(&human, &algo, n, seed).map_err(input)?;
    write(out, &to_json_lines(&trials))
}

pub fn cmd_risk(trials: &Path, responses: &Path, pooling: Pooling, out: &Path) -> Result<(), CliError> {
    let trials = trials_from_jsonl(&read(trials)?).map_err(|e| input(format!("{}: {e}", trials.display())))?;
    if !responses.exists() {
        return Err(input(format!("{}: no such file", responses.display())));
    }
    let replay = Journal::replay(responses).map_err(input)?;
    let report = estimate_risk(&trials, &replay.records, pooling).map_err(input)?;
    write(out, &to_json_bytes(&report))
}
