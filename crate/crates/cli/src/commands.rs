//! The workflow steps behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use gapfill::benchmark::Splits;
use gapfill::dineof::{cross_validate, impute};
use gapfill::direct_net::DirectNet;
use gapfill::field::{compute_stats, denormalize, normalize, select_frames, DateInterval};
use gapfill::gfd::{read_gfd, write_gfd};
use gapfill::metrics::{
    emit_error_map, eval_mask, evaluate, mean_fill, monthly_mean, months, write_comparison_csv,
    write_report_csv, MetricsReport,
};
use gapfill::model::{DineofModel, Model};
use gapfill::obs_sim::{gen_truth, missing_fraction, simulate_observations};
use gapfill::tiling::{plan_tiles, tile_infer};
use gapfill::training::{fit, History};
use gapfill::{GappyField, NormStats};
use log::info;
use ndarray::Axis;

use crate::config::{Family, RunConfig};
use crate::error::{CliError, Result};

pub const TRUTH_FILE: &str = "truth.gfd";
pub const OBS_FILE: &str = "obs.gfd";
pub const MODEL_FILE: &str = "model.gpm";
pub const HISTORY_FILE: &str = "history.csv";
pub const STATS_FILE: &str = "stats.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const MEAN_FILL: &str = "mean-fill";

/// Frames of a dataset a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Period {
    #[default]
    All,
    Train,
    Valid,
    Test,
}

impl Period {
    pub fn select(self, field: &GappyField, cfg: &RunConfig) -> Result<GappyField> {
        let split = &cfg.dataset.split;
        let interval = match self {
            Period::All => return Ok(field.clone()),
            Period::Train => split.train,
            Period::Valid => split.valid,
            Period::Test => split.test,
        };
        Ok(select_frames(field, &interval)?)
    }
}

/// Patch size and minimum overlap, `(rows, cols)` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub patch: (usize, usize),
    pub overlap: (usize, usize),
}

pub fn read_field(path: &Path) -> Result<GappyField> {
    read_gfd(path).map_err(|e| with_path(e, path))
}

pub fn write_field(field: &GappyField, path: &Path) -> Result<()> {
    write_gfd(field, path).map_err(|e| with_path(e, path))
}

fn with_path(e: gapfill::Error, path: &Path) -> CliError {
    match e {
        gapfill::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub truth: PathBuf,
    pub obs: PathBuf,
    pub missing_fraction: f64,
}

/// Writes a synthetic truth and its cloud-masked observation to `out_dir`.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimulateOutput> {
    let ds = &cfg.dataset;
    ds.clouds.validate()?;
    let truth = gen_truth(&ds.truth)?;
    ds.split.validate(&truth)?;
    let obs = simulate_observations(&truth, &ds.clouds, ds.obs_seed)?;
    create_dir(out_dir)?;
    let out = SimulateOutput {
        truth: out_dir.join(TRUTH_FILE),
        obs: out_dir.join(OBS_FILE),
        missing_fraction: missing_fraction(&obs, &truth),
    };
    write_field(&truth, &out.truth)?;
    write_field(&obs, &out.obs)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: History,
    pub stats: NormStats,
}

/// Trains the configured family on the train period of `data`, validating on
/// the valid period, and writes the checkpoint, loss history and the
/// normalization statistics used.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainOutput> {
    let field = read_field(data)?;
    cfg.dataset.split.validate(&field)?;
    let splits = Splits::new(&field, &cfg.dataset.split)?;
    let stats = compute_stats(&splits.train, cfg.transform)?;
    let train = normalize(&splits.train, &stats)?;
    let valid = normalize(&splits.valid, &stats)?;
    let ocean = field.ocean_mask();
    let clouds = &cfg.dataset.clouds;
    let (model, history) = match cfg.family {
        Family::Variational => {
            let init = cfg.variational.build(cfg.train.seed)?;
            let (m, h) = fit(init, &train, &valid, &ocean, clouds, &cfg.train)?;
            (Model::Variational(m), h)
        }
        Family::Direct => {
            let mut tc = cfg.train.clone();
            tc.window = cfg.direct.window;
            let (m, h) = fit(DirectNet::new(cfg.direct)?, &train, &valid, &ocean, clouds, &tc)?;
            (Model::Direct(m), h)
        }
        Family::Dineof => (
            Model::Dineof(DineofModel {
                config: cfg.dineof.config.clone(),
                modes: cfg.dineof.modes,
            }),
            History::default(),
        ),
    };
    create_dir(out_dir)?;
    let checkpoint = out_dir.join(MODEL_FILE);
    model.save(&checkpoint).map_err(|e| with_path(e, &checkpoint))?;
    let mut csv = String::from("epoch,train_loss,valid_loss\n");
    for e in &history.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_loss));
    }
    write_text(&out_dir.join(HISTORY_FILE), &csv)?;
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_text(&out_dir.join(STATS_FILE), &json)?;
    Ok(TrainOutput {
        checkpoint,
        history,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub reconstruction: GappyField,
    /// Statistics of the input, used to normalize it.
    pub stats: NormStats,
}

/// Reconstructs `input` with a saved model. The input is normalized with its
/// own statistics, so a model trained elsewhere is applied unchanged.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    period: Period,
    tiling: Option<Tiling>,
    workers: usize,
) -> Result<InferOutput> {
    let model = Model::load(checkpoint).map_err(|e| with_path(e, checkpoint))?;
    let y = period.select(&read_field(input)?, cfg)?;
    let stats = compute_stats(&y, cfg.transform)?;
    info!("{} model on {:?} frames", model.kind(), y.dims());
    let reconstruction = match tiling {
        None => model.infer(&y, &stats)?,
        Some(t) => {
            let (_, h, w) = y.dims();
            let layout = plan_tiles(h, w, t.patch.0, t.patch.1, t.overlap.0, t.overlap.1)?;
            info!("{} patches", layout.len());
            tile_infer(&y, &layout, workers.max(1), |p| model.infer(p, &stats))?
        }
    };
    write_field(&reconstruction, output)?;
    Ok(InferOutput {
        reconstruction,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct DineofOutput {
    pub modes: usize,
    /// Holdout RMSE per mode count when cross-validation ran.
    pub curve: Option<Vec<f64>>,
    pub converged: bool,
}

/// Fills `input` by iterative EOF with a fixed mode count or, when `modes`
/// is `None`, the count picked by cross-validation.
pub fn cmd_dineof(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    period: Period,
    modes: Option<usize>,
    curve_out: Option<&Path>,
) -> Result<DineofOutput> {
    let y = period.select(&read_field(input)?, cfg)?;
    let stats = compute_stats(&y, cfg.transform)?;
    let norm = normalize(&y, &stats)?;
    let mut dc = cfg.dineof.config.clone();
    let (t, _, _) = y.dims();
    let n = y.ocean_mask().iter().filter(|&&o| o).count();
    dc.max_modes = dc.max_modes.min(t).min(n);
    let (modes, curve) = match modes {
        Some(r) => (r, None),
        None => {
            let cv = cross_validate(&norm, &dc)?;
            (cv.best_r, Some(cv.curve))
        }
    };
    if let (Some(path), Some(c)) = (curve_out, &curve) {
        let mut csv = String::from("r,rmse\n");
        for (i, v) in c.iter().enumerate() {
            csv.push_str(&format!("{},{v}\n", i + 1));
        }
        write_text(path, &csv)?;
    }
    let out = impute(&norm, modes, &dc)?;
    write_field(&denormalize(&out.field, &stats)?, output)?;
    Ok(DineofOutput {
        modes,
        curve,
        converged: out.converged,
    })
}

/// Frames of `field` dated within the time span of `like`.
fn align(field: &GappyField, like: &GappyField) -> Result<GappyField> {
    if field.dims().0 == like.dims().0 && field.meta.time == like.meta.time {
        return Ok(field.clone());
    }
    let t = like.dims().0;
    let span = DateInterval::new(like.frame_date(0), like.frame_date(t - 1));
    let out = select_frames(field, &span)?;
    if out.dims().0 != t {
        return Err(CliError::Config(format!(
            "prediction spans {t} frames but the reference has {} in that period",
            out.dims().0
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Write a per-frame error map for each prediction.
    pub maps: bool,
    /// Add the mean-fill baseline to the comparison.
    pub baseline: bool,
}

/// Scores each named prediction on the pixels the target has and the
/// observation lacks. Writes one report per method, optional error maps and
/// a `method,RMSLE,RE%` comparison.
pub fn cmd_eval(
    cfg: &RunConfig,
    target: &Path,
    obs: &Path,
    preds: &[(String, PathBuf)],
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<Vec<(String, MetricsReport)>> {
    let target = read_field(target)?;
    let obs = read_field(obs)?;
    create_dir(out_dir)?;
    let mut rows = Vec::new();
    let mut span: Option<GappyField> = None;
    for (name, path) in preds {
        let pred = read_field(path)?;
        let (tg, ob) = (align(&target, &pred)?, align(&obs, &pred)?);
        let report = evaluate(&pred, &tg, &ob)?;
        write_report_csv(&report, &out_dir.join(format!("{name}.report.csv")))
            .map_err(|e| with_path(e, out_dir))?;
        if opts.maps {
            let maps = out_dir.join("maps");
            create_dir(&maps)?;
            let mask = eval_mask(&tg, &ob)?;
            for k in 0..pred.dims().0 {
                let stem = maps.join(format!("{name}_{}", pred.frame_date(k)));
                emit_error_map(
                    pred.values().index_axis(Axis(0), k),
                    tg.values().index_axis(Axis(0), k),
                    mask.index_axis(Axis(0), k),
                    &stem,
                )
                .map_err(|e| with_path(e, &stem))?;
            }
        }
        span.get_or_insert(pred);
        rows.push((name.clone(), report));
    }
    if opts.baseline {
        let (tg, ob) = match &span {
            Some(p) => (align(&target, p)?, align(&obs, p)?),
            None => (target.clone(), obs.clone()),
        };
        let report = evaluate(&mean_fill(&ob, cfg.transform)?, &tg, &ob)?;
        rows.push((MEAN_FILL.to_string(), report));
    }
    if !rows.is_empty() {
        let path = out_dir.join(COMPARISON_FILE);
        write_comparison_csv(&rows, &path).map_err(|e| with_path(e, &path))?;
    }
    Ok(rows)
}

/// Writes the per-pixel monthly mean of `input` as one GFD per month plus a
/// `month,pixels,mean` summary.
pub fn cmd_report(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let field = read_field(input)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    let mut csv = String::from("month,pixels,mean\n");
    for (year, month) in months(&field) {
        let m = monthly_mean(&field, year, month)?;
        let label = format!("{year:04}-{month:02}");
        let n = m.valid_count();
        let mean = m.iter_valid().sum::<f64>() / n.max(1) as f64;
        csv.push_str(&format!("{label},{n},{mean}\n"));
        let path = out_dir.join(format!("monthly_{label}.gfd"));
        write_field(&m, &path)?;
        written.push(path);
    }
    write_text(&out_dir.join("monthly.csv"), &csv)?;
    Ok(written)
}
