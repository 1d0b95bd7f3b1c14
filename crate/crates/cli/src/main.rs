//! `nilm`: ingest, synthesize, train, evaluate, stream and report.

mod stream;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{NaiveDate, NaiveTime};
use clap::{Args, Parser, Subcommand};
use nilm_core::config::{parse_houses, FeatureMode};
use nilm_core::flex::{self, DecomposeOptions, PowerProfile};
use nilm_core::ingest::{load_houses, BuildingData};
use nilm_core::metrics::{evaluate_experiment, tune};
use nilm_core::pipeline::{detect_batch, train_bundle, Manifest, ModelBundle};
use nilm_core::synth::{generate, write_redd, SynthSpec};
use nilm_core::{ApplianceKind, Config, Method};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "nilm", version, about = "Appliance detection and flexibility reporting from whole-building power data")]
struct Cli {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, align and resample REDD houses; print per-channel statistics.
    Ingest(IngestArgs),
    /// Write a synthetic corpus in the REDD layout.
    Synth(SynthArgs),
    /// Fit scaler, optional RBM and classifiers; write a model bundle.
    Train(TrainArgs),
    /// Score every appliance × method × feature mode on the test house.
    Eval(EvalArgs),
    /// Split a house's load into flexible and inflexible parts.
    Flex(FlexArgs),
    /// Detect appliance states from `epoch watts` lines on stdin.
    Stream(StreamArgs),
    /// Grid-search classifier hyperparameters on a held-out training house.
    Tune(TuneArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root containing house_N directories.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Houses to load, e.g. `1..6` or `1,3`.
    #[arg(long, default_value = "1..6")]
    houses: String,
    /// Write the summary as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    houses: u32,
    #[arg(long, default_value_t = 2.0)]
    days: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Meter noise standard deviation in watts.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "raw")]
    features: FeatureMode,
    #[arg(long)]
    out: PathBuf,
    /// Give each appliance its own RBM instead of one shared model.
    #[arg(long)]
    rbm_per_appliance: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory for results.csv, results.json and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one feature mode.
    #[arg(long)]
    features: Option<FeatureMode>,
    #[arg(long)]
    rbm_per_appliance: bool,
}

#[derive(Args)]
struct FlexArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    house: u32,
    /// Use this model's detections; without it the metered channels are the
    /// detections.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value = "knn")]
    method: Method,
    /// Analyse one local calendar day, e.g. 2011-04-18.
    #[arg(long)]
    day: Option<NaiveDate>,
    /// Local time offset from UTC in hours, for day boundaries.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    utc_offset_hours: f64,
    /// Directory for report.json, series CSVs and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "knn")]
    method: Method,
    /// Write run statistics and the manifest as JSON here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load(root: &Path, houses: &[u32], cfg: &Config) -> Result<Vec<BuildingData>> {
    let data = load_houses(root, houses, &cfg.resample)
        .with_context(|| format!("loading houses {houses:?} from {}", root.display()))?;
    for &h in houses {
        let n = data.iter().filter(|b| b.building_id == h).count();
        log::info!("house {h}: {n} segment(s)");
    }
    Ok(data)
}

fn experiment_houses(cfg: &Config) -> Vec<u32> {
    let mut houses = cfg.train_houses.clone();
    houses.push(cfg.test_house);
    houses.sort_unstable();
    houses.dedup();
    houses
}

#[derive(Serialize)]
struct ChannelSummary {
    appliance: String,
    mean_w: f64,
    std_w: f64,
    share_pct: f64,
}

#[derive(Serialize)]
struct HouseSummary {
    house: u32,
    segments: usize,
    samples: usize,
    first_epoch: i64,
    last_epoch: i64,
    mains_mean_w: f64,
    channels: Vec<ChannelSummary>,
}

fn cmd_ingest(cfg: &Config, args: &IngestArgs) -> Result<()> {
    let houses = parse_houses(&args.houses)?;
    let data = load(&args.data.data, &houses, cfg)?;
    let mut out = Vec::new();
    for &h in &houses {
        let segs: Vec<&BuildingData> = data.iter().filter(|b| b.building_id == h).collect();
        let mains: Vec<f64> = segs.iter().flat_map(|s| s.mains.values().iter().copied()).collect();
        let total: f64 = mains.iter().sum();
        let mut channels = Vec::new();
        let kinds: Vec<&ApplianceKind> = segs[0].appliances.keys().collect();
        for kind in kinds {
            let values: Vec<f64> = segs
                .iter()
                .flat_map(|s| s.appliances[kind].values().iter().copied())
                .collect();
            let series = nilm_core::TimeSeries::new(0, cfg.resample.target_step, values)?;
            let (mean_w, std_w) = flex::appliance_stats(&series)?;
            channels.push(ChannelSummary {
                appliance: kind.to_string(),
                mean_w,
                std_w,
                share_pct: if total > 0.0 { 100.0 * series.sum() / total } else { 0.0 },
            });
        }
        let summary = HouseSummary {
            house: h,
            segments: segs.len(),
            samples: mains.len(),
            first_epoch: segs[0].mains.start_epoch(),
            last_epoch: segs.last().expect("non-empty").mains.end_epoch(),
            mains_mean_w: total / mains.len() as f64,
            channels,
        };
        println!(
            "house {}: {} segment(s), {} samples, mean load {:.1} W",
            summary.house, summary.segments, summary.samples, summary.mains_mean_w
        );
        for c in &summary.channels {
            println!("  {:<24} mean {:>9.2} W  std {:>9.2} W  share {:>6.2}%", c.appliance, c.mean_w, c.std_w, c.share_pct);
        }
        out.push(summary);
    }
    if let Some(path) = &args.out {
        write(path, &serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthTruth {
    house: u32,
    samples: usize,
    true_flexible_share_pct: f64,
    on_fraction: BTreeMap<String, f64>,
    spec: SynthSpec,
}

fn cmd_synth(mut cfg: Config, args: &SynthArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    create_dir(&args.out)?;
    let mut truth = Vec::new();
    for id in 1..=args.houses {
        let mut spec = SynthSpec::household(id, args.days);
        if let Some(noise) = args.noise {
            spec.noise_sigma_w = noise;
        }
        let house = generate(&spec, cfg.seed)?;
        write_redd(&args.out, &house)?;
        let n = house.building.mains.len();
        println!("house {id}: {n} samples, flexible share {:.2}%", house.true_flexible_share_pct);
        truth.push(SynthTruth {
            house: id,
            samples: n,
            true_flexible_share_pct: house.true_flexible_share_pct,
            on_fraction: house
                .masks
                .iter()
                .map(|(k, m)| (k.to_string(), m.iter().filter(|&&x| x == 1).count() as f64 / n as f64))
                .collect(),
            spec,
        });
    }
    write(&args.out.join("truth.json"), &serde_json::to_string_pretty(&truth)?)?;
    let manifest = Manifest::new("synth", &cfg, vec![]);
    write(&args.out.join("manifest.json"), &manifest.to_json()?)
}

fn cmd_train(mut cfg: Config, args: &TrainArgs) -> Result<()> {
    cfg.rbm_per_appliance |= args.rbm_per_appliance;
    let data = load(&args.data.data, &cfg.train_houses, &cfg)?;
    let manifest = Manifest::new("train", &cfg, vec![args.data.data.display().to_string()]);
    let bundle = train_bundle(&data, &cfg, args.features, manifest)?;
    bundle.save(&args.out)?;
    for m in &bundle.appliances {
        println!(
            "{}: {} model(s) over {}, mean on-power {:.1} W",
            m.appliance,
            m.classifiers.len(),
            m.feature_space.describe(),
            m.mean_on_power_w
        );
    }
    Ok(())
}

fn cmd_eval(mut cfg: Config, args: &EvalArgs) -> Result<()> {
    cfg.rbm_per_appliance |= args.rbm_per_appliance;
    if let Some(f) = args.features {
        cfg.features = vec![f];
    }
    let data = load(&args.data.data, &experiment_houses(&cfg), &cfg)?;
    let table = evaluate_experiment(&data, &cfg)?;
    create_dir(&args.out)?;
    write(&args.out.join("results.csv"), &table.to_csv())?;
    write(&args.out.join("results.json"), &table.to_json()?)?;
    let manifest = Manifest::new("eval", &cfg, vec![args.data.data.display().to_string()]);
    write(&args.out.join("manifest.json"), &manifest.to_json()?)?;
    for &mode in &cfg.features {
        println!("{}", table.pivot(mode));
    }
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see results.json");
    }
    Ok(())
}

fn day_range(day: NaiveDate, offset_s: i64) -> (i64, i64) {
    let start = day.and_time(NaiveTime::MIN).and_utc().timestamp() - offset_s;
    (start, start + 86_400)
}

fn cmd_flex(cfg: Config, args: &FlexArgs) -> Result<()> {
    let offset_s = (args.utc_offset_hours * 3600.0).round() as i64;
    let bundle = match &args.bundle {
        Some(path) => {
            let b = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
            for m in &b.appliances {
                let fs = &m.feature_space;
                fs.check_request(fs.mode, cfg.preprocess.window, cfg.preprocess.median_k, cfg.preprocess.filter_aggregate, cfg.resample.target_step)?;
            }
            Some(b)
        }
        None => None,
    };
    let mut segments = load(&args.data.data, &[args.house], &cfg)?;
    if let Some(day) = args.day {
        let (lo, hi) = day_range(day, offset_s);
        segments = segments
            .into_iter()
            .filter_map(|s| {
                let step = i64::from(s.mains.step());
                let first = ((lo - s.mains.start_epoch()).max(0) + step - 1) / step;
                let last = ((hi - s.mains.start_epoch()) + step - 1) / step;
                let (first, last) = (first as usize, (last.max(0) as usize).min(s.mains.len()));
                (first < last).then(|| BuildingData {
                    building_id: s.building_id,
                    mains: s.mains.slice(first..last),
                    appliances: s.appliances.iter().map(|(k, v)| (k.clone(), v.slice(first..last))).collect(),
                    label_map: s.label_map.clone(),
                })
            })
            .collect();
        if segments.is_empty() {
            bail!("house {} has no data on {day}", args.house);
        }
    }

    let opts = DecomposeOptions { utc_offset_s: offset_s };
    let mut reports = Vec::new();
    create_dir(&args.out)?;
    for (i, seg) in segments.iter().enumerate() {
        let mut detections = BTreeMap::new();
        let mut profiles = BTreeMap::new();
        match &bundle {
            Some(b) => {
                let det = detect_batch(b, args.method, seg.mains.values())?;
                detections = det.padded(seg.mains.len());
                for m in &b.appliances {
                    profiles.insert(m.appliance.clone(), PowerProfile::MeanOnPower(m.mean_on_power_w));
                }
            }
            None => {
                for kind in &cfg.appliances {
                    if !seg.appliances.contains_key(kind) {
                        log::warn!("house {} has no {kind} channel", args.house);
                        continue;
                    }
                    let mask = if seg.mains.len() >= cfg.preprocess.median_k {
                        cfg.preprocess.labels(seg, kind)?
                    } else {
                        vec![0; seg.mains.len()]
                    };
                    detections.insert(kind.clone(), mask);
                    profiles.insert(kind.clone(), PowerProfile::Channel(seg.appliances[kind].clone()));
                }
            }
        }
        let report = match flex::decompose(&seg.mains, &detections, &profiles, opts) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("segment {i} skipped: {e}");
                continue;
            }
        };
        write(&args.out.join(format!("series_{i}.csv")), &report.series_csv())?;
        reports.push(report);
    }
    let summary = flex::summarize(&reports)?;
    #[derive(Serialize)]
    struct Report<'a> {
        house: u32,
        source: &'a str,
        summary: &'a flex::FlexSummary,
        segments: Vec<serde_json::Value>,
    }
    let segments_json = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            serde_json::json!({
                "series_csv": format!("series_{i}.csv"),
                "start_epoch": r.start_epoch,
                "samples": r.flexible_w.len(),
                "flexibility_pct": r.flexibility_pct,
                "share_sum_pct": r.share_sum_pct,
                "clamped_steps": r.clamped_steps,
                "appliances": r.appliances,
            })
        })
        .collect();
    let report = Report {
        house: args.house,
        source: if bundle.is_some() { "detections" } else { "metered channels" },
        summary: &summary,
        segments: segments_json,
    };
    write(&args.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    let mut inputs = vec![args.data.data.display().to_string()];
    inputs.extend(args.bundle.iter().map(|p| p.display().to_string()));
    write(&args.out.join("manifest.json"), &Manifest::new("flex", &cfg, inputs).to_json()?)?;

    println!("house {} ({}):", args.house, report.source);
    println!("  flexibility            {:>7.2}%", summary.flexibility_pct);
    println!("  mean daily flexibility {:>7.2}% over {} day(s)", summary.mean_daily_flexibility_pct, summary.daily.len());
    println!("  appliance share sum    {:>7.2}%", summary.share_sum_pct);
    for (k, v) in &summary.shares_pct {
        println!("    {:<20} {:>7.2}%", k.to_string(), v);
    }
    if summary.clamped_steps > 0 {
        println!("  {} step(s) capped at the aggregate", summary.clamped_steps);
    }
    Ok(())
}

fn cmd_stream(cfg: Config, args: &StreamArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    let (window, median_k, filter, step) = bundle.front_end()?;
    let p = &cfg.preprocess;
    if (p.window, p.median_k, p.filter_aggregate) != (window, median_k, filter) {
        let fs = &bundle.appliances[0].feature_space;
        fs.check_request(fs.mode, p.window, p.median_k, p.filter_aggregate, step)?;
    }
    let stdin = io::stdin();
    let stdout = io::stdout();
    let stats = match stream::run(&bundle, args.method, step, stdin.lock(), io::BufWriter::new(stdout.lock())) {
        Ok(s) => s,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => return Ok(()),
        Err(e) => return Err(e),
    };
    eprintln!(
        "{} records, {} detections, {} skipped, median latency {:.2} us",
        stats.records, stats.emitted, stats.skipped, stats.median_latency_us
    );
    if let Some(path) = &args.summary {
        let manifest = Manifest::new("stream", &cfg, vec![args.bundle.display().to_string()]);
        let json = serde_json::json!({ "stats": stats, "manifest": manifest });
        write(path, &serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_tune(cfg: Config, args: &TuneArgs) -> Result<()> {
    let data = load(&args.data.data, &cfg.train_houses, &cfg)?;
    let report = tune(&data, &cfg)?;
    println!("validation house {}", report.validation_building);
    for t in &report.trials {
        println!(
            "  {:<18} {:<9} {:<28} {:.2}%",
            t.appliance.to_string(),
            t.method.name(),
            t.setting.replace('\n', " "),
            100.0 * t.validation_accuracy
        );
    }
    println!("suggested settings:");
    for line in &report.suggested {
        println!("  {line}");
    }
    if let Some(path) = &args.out {
        let manifest = Manifest::new("tune", &cfg, vec![args.data.data.display().to_string()]);
        let json = serde_json::json!({ "report": report, "manifest": manifest });
        write(path, &serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&cfg, a),
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Flex(a) => cmd_flex(cfg, a),
        Command::Stream(a) => cmd_stream(cfg, a),
        Command::Tune(a) => cmd_tune(cfg, a),
    }
}
