use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use insar_core::catalog::{asf_query_url, AcquisitionMeta, Catalog, PairSpec, SearchQuery};
use insar_core::displacement::DisplacementSeries;
use insar_core::error::Error;
use insar_core::interferometry::SensorGeometry;
use insar_core::pipeline::{
    assemble_products, interferogram_stage, line_pixel_vertices, load_catalog_slcs, load_pair_products,
    load_wrapped_pair, pair_dir_name, pair_dirs, reference_exclusion, run_demo, save_wrapped_pair, write_json,
    DemoConfig, ProcessingConfig, PsOutput, ReferenceChoice, StageContext, StageError, UNWRAPPED_FILE,
};
use insar_core::profile::{export_profile, extract_profile, import_profile, ProfileFormat, ProfileLine};
use insar_core::ps::{amplitude_dispersion, compare_ps_dinsar, select_ps};
use insar_core::raster::{load_real, load_slc, save_real, Pixel};
use insar_core::synth::{bridge_scenario_default, generate_in, write_stack, ScenarioConfig};
use insar_core::trend::alert_scan;
use insar_core::unwrap::{unwrap, UnwrapMethod};

/// Differential SAR interferometry pipeline.
#[derive(Parser)]
#[command(name = "insar", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic SLC stack with ground truth.
    Synth {
        #[arg(long, default_value_t = 24)]
        max_days: i64,
    },
    /// Manage the acquisition catalog.
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Form filtered differential interferograms.
    Ifg {
        #[arg(long)]
        master: Option<PathBuf>,
        #[arg(long)]
        slave: Option<PathBuf>,
        /// Perpendicular baseline slave minus master, meters.
        #[arg(long)]
        bperp: Option<f64>,
        /// Catalog; without --master/--slave every catalog pair is processed.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        dem: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Unwrap one phase raster or every pair directory.
    Unwrap {
        #[arg(long)]
        pairs_dir: Option<PathBuf>,
        #[arg(long)]
        phase: Option<PathBuf>,
        #[arg(long)]
        coherence: Option<PathBuf>,
        #[arg(long)]
        method: Option<UnwrapMethod>,
        /// Coherence below which pixels are masked.
        #[arg(long)]
        mask: Option<f64>,
    },
    /// Assemble the calibrated cumulative displacement series.
    Series {
        #[arg(long)]
        pairs_dir: PathBuf,
        /// `auto` or `ROW,COL`.
        #[arg(long = "ref", default_value = "auto")]
        reference: String,
        /// Structure polyline kept away from the automatic reference.
        #[arg(long)]
        line: Option<PathBuf>,
    },
    /// Sample the series along a polyline.
    Profile {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        line: PathBuf,
    },
    /// Persistent-scatterer selection and comparison.
    Ps {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Series to assess at the selected scatterers.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Reference series (ground truth or another variant).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Restrict the comparison to this polyline.
        #[arg(long)]
        line: Option<PathBuf>,
        /// Where to write the comparison report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rate and nonlinearity alerts along a profile.
    Alert {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        rmse: Option<f64>,
    },
    /// Print the archive search URL for a query.
    QueryUrl(QueryArgs),
    /// Run the synthetic bridge scenario end to end.
    Demo,
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Register an SLC and rebuild the pairs.
    Add {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        slc: PathBuf,
        #[arg(long)]
        id: Option<String>,
        /// Perpendicular orbit offset of this acquisition, meters.
        #[arg(long, default_value_t = 0.0)]
        bperp: f64,
        #[arg(long, default_value_t = 24)]
        max_days: i64,
    },
    /// Rebuild consecutive pairs.
    Pairs {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = 24)]
        max_days: i64,
    },
    /// Print the archive search URL for a query.
    QueryUrl(QueryArgs),
}

#[derive(Args)]
struct QueryArgs {
    /// `MINLON,MINLAT,MAXLON,MAXLAT`.
    #[arg(long, allow_hyphen_values = true)]
    bbox: Option<String>,
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long)]
    end: Option<NaiveDate>,
    /// Defaults to `Sentinel-1`.
    #[arg(long)]
    platform: Option<String>,
    /// Defaults to `SLC`.
    #[arg(long)]
    level: Option<String>,
}

type CmdResult = Result<Value, StageError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            report(&json!({"stage": "cli", "code": "usage", "message": e.kind().to_string()}));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report(&json!({"stage": "cli", "code": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(v) => {
            let text = match v {
                Value::String(s) => s,
                v => serde_json::to_string_pretty(&v).expect("serializable"),
            };
            // a closed stdout is not an error for the pipeline
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, exit) = if e.error.is_io() { ("io", 2) } else { ("contract", 1) };
            report(&json!({"stage": e.stage, "code": code, "message": e.error.to_string()}));
            ExitCode::from(exit)
        }
    }
}

fn report(v: &Value) {
    eprintln!("{v}");
}

fn usage(stage: &str, message: impl Into<String>) -> StageError {
    // usage problems share the I/O exit status
    StageError {
        stage: stage.into(),
        error: Error::Io {
            path: PathBuf::new(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, message.into()),
        },
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    });
    let text = text.stage(stage)?;
    serde_json::from_str(&text).map_err(Error::from).stage(stage)
}

fn processing(common: &Common, stage: &str) -> Result<ProcessingConfig, StageError> {
    let cfg = match &common.config {
        Some(p) => read_config(p, stage)?,
        None => ProcessingConfig::default(),
    };
    cfg.validate().stage(stage)?;
    Ok(cfg)
}

fn out_path<'a>(common: &'a Common, stage: &str) -> Result<&'a Path, StageError> {
    common.out.as_deref().ok_or_else(|| usage(stage, "--out is required"))
}

fn run(cli: &Cli) -> CmdResult {
    let c = &cli.common;
    match &cli.command {
        Command::Synth { max_days } => cmd_synth(c, *max_days),
        Command::Catalog(cmd) => cmd_catalog(c, cmd),
        Command::Ifg {
            master,
            slave,
            bperp,
            catalog,
            dem,
            alpha,
        } => cmd_ifg(
            c,
            master.as_deref(),
            slave.as_deref(),
            *bperp,
            catalog.as_deref(),
            dem.as_deref(),
            *alpha,
        ),
        Command::Unwrap {
            pairs_dir,
            phase,
            coherence,
            method,
            mask,
        } => cmd_unwrap(
            c,
            pairs_dir.as_deref(),
            phase.as_deref(),
            coherence.as_deref(),
            *method,
            *mask,
        ),
        Command::Series {
            pairs_dir,
            reference,
            line,
        } => cmd_series(c, pairs_dir, reference, line.as_deref()),
        Command::Profile { series, line } => cmd_profile(c, series, line),
        Command::Ps {
            stack,
            threshold,
            series,
            truth,
            line,
            report,
        } => cmd_ps(
            c,
            stack,
            *threshold,
            series.as_deref(),
            truth.as_deref(),
            line.as_deref(),
            report.as_deref(),
        ),
        Command::Alert { profile, rate, rmse } => cmd_alert(c, profile, *rate, *rmse),
        Command::QueryUrl(q) => cmd_query_url(c, q),
        Command::Demo => cmd_demo(c),
    }
}

fn cmd_synth(c: &Common, max_days: i64) -> CmdResult {
    let (mut scenario, base): (ScenarioConfig, Option<PathBuf>) = match &c.config {
        Some(p) => (read_config(p, "synth")?, p.parent().map(Path::to_path_buf)),
        None => (bridge_scenario_default(), None),
    };
    if let Some(seed) = c.seed {
        scenario.rng_seed = seed;
    }
    let out = out_path(c, "synth")?;
    let stack = generate_in(&scenario, base.as_deref()).stage("synth")?;
    let files = write_stack(&scenario, &stack, out, max_days).stage("synth")?;
    Ok(json!({"stage": "synth", "out": out, "epochs": scenario.epochs.len(), "files": files}))
}

fn cmd_catalog(c: &Common, cmd: &CatalogCommand) -> CmdResult {
    match cmd {
        CatalogCommand::Add {
            catalog,
            slc,
            id,
            bperp,
            max_days,
        } => {
            let mut cat = if catalog.exists() {
                Catalog::load(catalog).stage("catalog")?
            } else {
                Catalog::default()
            };
            let (_, info) = load_slc(slc).stage("catalog")?;
            let id = id
                .clone()
                .or_else(|| slc.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .ok_or_else(|| usage("catalog", "cannot derive an id from the SLC path"))?;
            // store the image path relative to the catalog when possible
            let base = catalog.parent().unwrap_or(Path::new(""));
            let rel = slc
                .strip_prefix(base)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| slc.clone());
            cat.add(AcquisitionMeta::from_slc_info(id, rel, &info, *bperp))
                .stage("catalog")?;
            // pairing needs two acquisitions
            if cat.acquisitions.len() > 1 {
                cat.rebuild_pairs(*max_days).stage("catalog")?;
            }
            cat.save(catalog).stage("catalog")?;
            Ok(json!({"stage": "catalog", "acquisitions": cat.acquisitions.len(), "pairs": cat.pairs.len()}))
        }
        CatalogCommand::Pairs { catalog, max_days } => {
            let mut cat = Catalog::load(catalog).stage("catalog")?;
            cat.rebuild_pairs(*max_days).stage("catalog")?;
            cat.save(catalog).stage("catalog")?;
            Ok(json!({"stage": "catalog", "pairs": cat.pairs}))
        }
        CatalogCommand::QueryUrl(q) => cmd_query_url(c, q),
    }
}

fn cmd_query_url(c: &Common, q: &QueryArgs) -> CmdResult {
    let stage = "query-url";
    let base: Option<SearchQuery> = c.config.as_deref().map(|p| read_config(p, stage)).transpose()?;
    let bbox = match (&q.bbox, &base) {
        (Some(text), _) => {
            let parts: Vec<f64> = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| usage(stage, format!("bad --bbox {text}")))?;
            let [a, b, cc, d] = parts[..] else {
                return Err(usage(stage, "--bbox needs four numbers"));
            };
            (a, b, cc, d)
        }
        (None, Some(base)) => base.bbox,
        (None, None) => return Err(usage(stage, "--bbox or --config is required")),
    };
    let pick = |flag: Option<NaiveDate>, from: fn(&SearchQuery) -> NaiveDate, name: &str| {
        flag.or_else(|| base.as_ref().map(from))
            .ok_or_else(|| usage(stage, format!("--{name} is required")))
    };
    let query = SearchQuery {
        bbox,
        start: pick(q.start, |b| b.start, "start")?,
        end: pick(q.end, |b| b.end, "end")?,
        platform: q
            .platform
            .clone()
            .or_else(|| base.as_ref().map(|b| b.platform.clone()))
            .unwrap_or_else(|| "Sentinel-1".into()),
        processing_level: q
            .level
            .clone()
            .or_else(|| base.as_ref().map(|b| b.processing_level.clone()))
            .unwrap_or_else(|| "SLC".into()),
    };
    let url = asf_query_url(&query).stage(stage)?;
    Ok(Value::String(url))
}

#[allow(clippy::too_many_arguments)]
fn cmd_ifg(
    c: &Common,
    master: Option<&Path>,
    slave: Option<&Path>,
    bperp: Option<f64>,
    catalog: Option<&Path>,
    dem: Option<&Path>,
    alpha: Option<f64>,
) -> CmdResult {
    let stage = "ifg";
    let mut cfg = processing(c, stage)?;
    if let Some(a) = alpha {
        cfg.filter.goldstein_alpha = a;
    }
    cfg.validate().stage(stage)?;
    let out = out_path(c, stage)?;
    let dem = dem.map(load_real).transpose().stage(stage)?;
    match (master, slave) {
        (Some(m), Some(s)) => {
            let (mr, mi) = load_slc(m).stage(stage)?;
            let (sr, si) = load_slc(s).stage(stage)?;
            let id = |p: &Path| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            let bperp = match (bperp, catalog) {
                (Some(b), _) => b,
                (None, Some(cat)) => {
                    let cat = Catalog::load(cat).stage(stage)?;
                    let find = |i: &str| cat.acquisition(i).map(|a| a.perp_baseline_m);
                    match (find(&id(m)), find(&id(s))) {
                        (Some(bm), Some(bs)) => bs - bm,
                        _ => return Err(usage(stage, "images not found in the catalog")),
                    }
                }
                (None, None) => return Err(usage(stage, "--bperp or --catalog is required")),
            };
            let pair = PairSpec {
                master_id: id(m),
                slave_id: id(s),
                master_date: mi.acquisition_date,
                slave_date: si.acquisition_date,
                perp_baseline_m: bperp,
                temporal_baseline_days: (si.acquisition_date - mi.acquisition_date).num_days(),
                gap: false,
            };
            pair.validate().stage(stage)?;
            let w = interferogram_stage(&mr, &sr, &pair, &SensorGeometry::from(&mi), dem.as_ref(), &cfg.filter)
                .stage(stage)?;
            save_wrapped_pair(out, &w).stage(stage)?;
            Ok(json!({"stage": stage, "pairs": 1, "out": out}))
        }
        (None, None) => {
            let cat_path = catalog.ok_or_else(|| usage(stage, "--master/--slave or --catalog is required"))?;
            let cat = Catalog::load(cat_path).stage(stage)?;
            let base = cat_path.parent().unwrap_or(Path::new(""));
            let slcs = load_catalog_slcs(&cat, base).stage(stage)?;
            for (k, pair) in cat.pairs.iter().enumerate() {
                let m = cat
                    .acquisitions
                    .iter()
                    .position(|a| a.id == pair.master_id)
                    .expect("validated catalog");
                let s = cat
                    .acquisitions
                    .iter()
                    .position(|a| a.id == pair.slave_id)
                    .expect("validated catalog");
                let geometry = SensorGeometry::from(&cat.acquisitions[m]);
                let w =
                    interferogram_stage(&slcs[m], &slcs[s], pair, &geometry, dem.as_ref(), &cfg.filter).stage(stage)?;
                save_wrapped_pair(&out.join(pair_dir_name(k, pair)), &w).stage(stage)?;
            }
            Ok(json!({"stage": stage, "pairs": cat.pairs.len(), "out": out}))
        }
        _ => Err(usage(stage, "--master and --slave go together")),
    }
}

fn cmd_unwrap(
    c: &Common,
    pairs_dir: Option<&Path>,
    phase: Option<&Path>,
    coherence: Option<&Path>,
    method: Option<UnwrapMethod>,
    mask: Option<f64>,
) -> CmdResult {
    let stage = "unwrap";
    let mut cfg = processing(c, stage)?;
    cfg.unwrap_method = method.unwrap_or(cfg.unwrap_method);
    cfg.coherence_mask = mask.unwrap_or(cfg.coherence_mask);
    cfg.validate().stage(stage)?;
    match (pairs_dir, phase, coherence) {
        (Some(dir), None, None) => {
            let dirs = pair_dirs(dir).stage(stage)?;
            for d in &dirs {
                let w = load_wrapped_pair(d).stage(stage)?;
                let u = unwrap(&w.wrapped, &w.coherence, cfg.unwrap_method, cfg.coherence_mask).stage(stage)?;
                save_real(d.join(UNWRAPPED_FILE), &u).stage(stage)?;
            }
            Ok(json!({"stage": stage, "pairs": dirs.len(), "method": cfg.unwrap_method}))
        }
        (None, Some(p), Some(coh)) => {
            let out = out_path(c, stage)?;
            let ph = load_real(p).stage(stage)?;
            let co = load_real(coh).stage(stage)?;
            let u = unwrap(&ph, &co, cfg.unwrap_method, cfg.coherence_mask).stage(stage)?;
            save_real(out, &u).stage(stage)?;
            Ok(json!({"stage": stage, "out": out, "valid_pixels": u.valid_count(), "method": cfg.unwrap_method}))
        }
        _ => Err(usage(stage, "use either --pairs-dir or --phase with --coherence")),
    }
}

fn parse_pixel(s: &str) -> Option<Pixel> {
    let (r, c) = s.split_once(',')?;
    Some(Pixel::new(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

fn cmd_series(c: &Common, pairs_dir: &Path, reference: &str, line: Option<&Path>) -> CmdResult {
    let stage = "series";
    let cfg = processing(c, stage)?;
    let out = out_path(c, stage)?;
    let products = load_pair_products(pairs_dir).stage(stage)?;
    let meta = products[0].wrapped.meta;
    let choice = if reference == "auto" {
        let vertices = match line {
            Some(l) => Some(line_pixel_vertices(&ProfileLine::load_geojson(l).stage(stage)?, &meta)),
            None => None,
        };
        ReferenceChoice::Auto {
            excluded: reference_exclusion(
                &meta,
                vertices.as_deref(),
                cfg.reference_exclusion_m,
                cfg.filter.coherence_window,
            ),
        }
    } else {
        ReferenceChoice::Fixed(parse_pixel(reference).ok_or_else(|| usage(stage, format!("bad --ref {reference}")))?)
    };
    let series = assemble_products(&products, &cfg, &choice).stage(stage)?;
    let index = series.save(out).stage(stage)?;
    Ok(serde_json::to_value(index).expect("serializable"))
}

fn cmd_profile(c: &Common, series: &Path, line: &Path) -> CmdResult {
    let stage = "profile";
    let out = out_path(c, stage)?;
    let s = DisplacementSeries::load(series).stage(stage)?;
    let l = ProfileLine::load_geojson(line).stage(stage)?;
    let p = extract_profile(&s, &l).stage(stage)?;
    export_profile(&p, out, ProfileFormat::from_path(out)).stage(stage)?;
    Ok(json!({
        "stage": stage,
        "out": out,
        "epochs": p.dates.len(),
        "samples": p.pixels.len(),
        "length_m": p.distances_m.last(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_ps(
    c: &Common,
    stack: &Path,
    threshold: Option<f64>,
    series: Option<&Path>,
    truth: Option<&Path>,
    line: Option<&Path>,
    report_path: Option<&Path>,
) -> CmdResult {
    let stage = "ps";
    let cfg = processing(c, stage)?;
    let threshold = threshold.unwrap_or(cfg.ps_threshold);
    let out = out_path(c, stage)?;
    let cat = Catalog::load(stack).stage(stage)?;
    let slcs = load_catalog_slcs(&cat, stack.parent().unwrap_or(Path::new(""))).stage(stage)?;
    let da = amplitude_dispersion(&slcs).stage(stage)?;
    let candidates = select_ps(&da, threshold);
    let mut result = json!({"stage": stage, "threshold": threshold, "selected": candidates.len()});
    let output = PsOutput { threshold, candidates };
    write_json(out, &output).stage(stage)?;
    match (series, truth) {
        (Some(s), Some(t)) => {
            let s = DisplacementSeries::load(s).stage(stage)?;
            let t = DisplacementSeries::load(t)
                .stage(stage)?
                .rebased(s.reference_pixel)
                .stage(stage)?;
            let region = match line {
                Some(l) => Some(
                    insar_core::profile::rasterize_polyline(&ProfileLine::load_geojson(l).stage(stage)?, &s.meta)
                        .stage(stage)?
                        .0,
                ),
                None => None,
            };
            let report = compare_ps_dinsar(&s, &t, &output.candidates, region.as_deref()).stage(stage)?;
            let path = report_path
                .map(Path::to_path_buf)
                .unwrap_or_else(|| out.with_file_name("comparison.json"));
            write_json(&path, &report).stage(stage)?;
            result["report"] = json!(path);
            result["ps_median_rmse_mm"] = json!(report.ps_median_rmse_mm);
            result["non_ps_median_rmse_mm"] = json!(report.non_ps_median_rmse_mm);
        }
        (None, None) => {}
        _ => return Err(usage(stage, "--series and --truth go together")),
    }
    Ok(result)
}

fn cmd_alert(c: &Common, profile: &Path, rate: Option<f64>, rmse: Option<f64>) -> CmdResult {
    let stage = "alert";
    let cfg = processing(c, stage)?;
    let out = out_path(c, stage)?;
    let p = import_profile(profile).stage(stage)?;
    let alerts = alert_scan(
        &p,
        rate.unwrap_or(cfg.rate_threshold_mm_yr),
        rmse.unwrap_or(cfg.rmse_threshold_mm),
    )
    .stage(stage)?;
    write_json(out, &alerts).stage(stage)?;
    Ok(json!({"stage": stage, "alerts": alerts.len(), "out": out}))
}

fn cmd_demo(c: &Common) -> CmdResult {
    let mut cfg: DemoConfig = match &c.config {
        Some(p) => read_config(p, "demo")?,
        None => DemoConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.scenario.rng_seed = seed;
    }
    let out = out_path(c, "demo")?;
    let summary = run_demo(out, &cfg)?;
    Ok(serde_json::to_value(summary).expect("serializable"))
}
