//! The subcommands, as library functions so they can be driven from tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bevseg_core::augment::conjoint_rotate;
use bevseg_core::bev::BevGrid;
use bevseg_core::eval::{check_threshold, evaluate_model, EvalReport};
use bevseg_core::geometry::{BorderMode, Rotation2D};
use bevseg_core::selftest::{self, SuiteOutcome};
use bevseg_core::tensor::Tensor;
use bevseg_core::trainer::{train, Datasets, EpochRecord, TrainState};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, load_dataset, read_scene, write_ppm, Dataset, Split};
use crate::error::{Error, Result};
use crate::report::{metrics_header, metrics_row, report_table, report_tsv};

pub const METRICS: &str = "metrics.tsv";
pub const EFFECTIVE_CONFIG: &str = "config.cfg";
pub const TEACHER: &str = "teacher.ckpt";
pub const STUDENT: &str = "student.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DIAGNOSTIC: &str = "diagnostic.txt";
pub const REPORT: &str = "report.tsv";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `gen-data`: writes a dataset and returns its manifest rows.
pub fn gen_data(cfg: &RunConfig, n: usize, fraction: f64, seed: u64, out: &Path) -> Result<Vec<(String, Split)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Usage(format!("--labeled-fraction must lie in (0, 1], got {fraction}")));
    }
    dataset::gen_dataset(cfg, n, fraction, seed, out)
}

/// What a finished `train` run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
    pub output_dir: PathBuf,
}

impl TrainOutcome {
    /// The most recent evaluation, if any epoch evaluated.
    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

fn check_compatible(train: &Dataset, eval: &Dataset) -> Result<()> {
    let (a, b) = (&train.scene, &eval.scene);
    if a.grid != b.grid || (a.intrinsics.width, a.intrinsics.height) != (b.intrinsics.width, b.intrinsics.height) {
        return Err(Error::Usage(format!(
            "{} and {} use different image sizes or BEV grids",
            train.root.display(),
            eval.root.display()
        )));
    }
    Ok(())
}

/// `train`: trains on `data.train`, evaluating on `data.eval` if given.
///
/// Image size and BEV grid come from the training dataset's `scene.cfg`, so
/// the effective configuration written to the output directory may differ
/// from the input in its `scene.*`/`grid.*`/`world.*` keys.
pub fn train_run(cfg: &RunConfig, mut log: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let train_root = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| Error::Usage("data.train is not set".into()))?;
    let train_set = load_dataset(train_root)?;
    if train_set.labeled.is_empty() {
        return Err(Error::Usage(format!("{} has no labeled samples", train_root.display())));
    }
    let eval_set = cfg.eval_data.as_deref().map(load_dataset).transpose()?;
    if let Some(e) = &eval_set {
        check_compatible(&train_set, e)?;
    }
    let mut cfg = cfg.clone();
    cfg.scene = train_set.scene.clone();
    cfg.validate()?;
    let model = cfg.model_config();
    let classes = model.classes;

    let out = cfg.output_dir.clone();
    create_dir(&out.join(CHECKPOINT_DIR))?;
    write_text(&out.join(EFFECTIVE_CONFIG), &cfg.to_text())?;
    let metrics_path = out.join(METRICS);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    metrics
        .write_all(metrics_header(classes).as_bytes())
        .map_err(|e| Error::io(&metrics_path, e))?;

    let eval_samples = eval_set.as_ref().map_or(&[][..], |e| &e.labeled[..]);
    let data = Datasets {
        labeled: &train_set.labeled,
        unlabeled: &train_set.unlabeled,
        eval: eval_samples,
    };
    let mut records = Vec::new();
    let mut io_error = None;
    let result = train(&model, &cfg.trainer, data, |state, record| {
        let row = metrics_row(record, classes);
        let written = metrics
            .write_all(row.as_bytes())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))
            .and_then(|_| match record.eval {
                Some(_) => checkpoint::save(
                    &out.join(CHECKPOINT_DIR).join(format!("teacher_epoch{:03}.ckpt", record.epoch)),
                    &state.teacher,
                ),
                None => Ok(()),
            });
        if let Err(e) = written {
            let stop = bevseg_core::Error::InvalidValue(e.to_string());
            io_error = Some(e);
            return Err(stop);
        }
        log(record);
        records.push(record.clone());
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let state = match result {
        Ok(state) => state,
        Err(e) => {
            let e = Error::from(e);
            let dump = format!("error: {e}\nepochs completed: {}\n\n{}", records.len(), cfg.to_text());
            write_text(&out.join(DIAGNOSTIC), &dump)?;
            return Err(e);
        }
    };
    checkpoint::save(&out.join(TEACHER), &state.teacher)?;
    checkpoint::save(&out.join(STUDENT), &state.student)?;
    Ok(TrainOutcome {
        state,
        records,
        output_dir: out,
    })
}

/// `eval`: scores a checkpoint on the labeled part of a dataset and writes
/// `report.tsv` to `out` (a directory).
pub fn eval_run(checkpoint_path: &Path, dataset_root: &Path, threshold: f64, out: &Path) -> Result<EvalReport> {
    check_threshold(threshold).map_err(|e| Error::Usage(e.to_string()))?;
    let data = load_dataset(dataset_root)?;
    if data.labeled.is_empty() {
        return Err(Error::Usage(format!("{} has no ground truth to evaluate against", dataset_root.display())));
    }
    let k = &data.scene.intrinsics;
    let params = checkpoint::load_inferred(checkpoint_path, (k.height, k.width), data.scene.grid)?;
    let report = evaluate_model(&params, &data.labeled, threshold)?;
    create_dir(out)?;
    write_text(&out.join(REPORT), &report_tsv(&report))?;
    Ok(report)
}

pub fn print_report(report: &EvalReport) {
    print!("{}", report_table(report));
}

/// Border modes selected by a `--border` argument (`all` for every mode).
pub fn parse_border(arg: &str) -> Result<Vec<BorderMode>> {
    if arg == "all" {
        return Ok(BorderMode::ALL.to_vec());
    }
    BorderMode::parse(arg)
        .map(|m| vec![m])
        .ok_or_else(|| Error::Usage(format!("unknown border mode `{arg}` (zero, reflect, replicate or all)")))
}

const CLASS_COLORS: [[f64; 3]; 4] = [[0.45, 0.45, 0.45], [0.9, 0.8, 0.3], [0.2, 0.4, 1.0], [1.0, 0.2, 0.2]];

/// Paints a BEV grid as an RGB image, near rows at the bottom; later classes
/// are drawn over earlier ones.
pub fn colorize_bev(grid: &BevGrid) -> Tensor {
    let spec = grid.spec();
    let (zc, xc) = (spec.z_cells, spec.x_cells);
    let mut img = Tensor::zeros(&[3, zc, xc]);
    let data = img.data_mut();
    for zi in 0..zc {
        let row = zc - 1 - zi;
        for xi in 0..xc {
            for c in 0..grid.channels() {
                if grid.get(c, zi, xi) > 0.5 {
                    let color = CLASS_COLORS[c % CLASS_COLORS.len()];
                    for (ch, v) in color.iter().enumerate() {
                        data[(ch * zc + row) * xc + xi] = *v;
                    }
                }
            }
        }
    }
    img
}

/// `preview-augment`: writes the original image, one warped image per
/// border mode and, for labeled samples, the BEV labels before and after the
/// rotation. Returns the written paths.
pub fn preview_augment(sample_dir: &Path, alpha_deg: f64, borders: &[BorderMode], out: &Path) -> Result<Vec<PathBuf>> {
    if !alpha_deg.is_finite() {
        return Err(Error::Usage(format!("--alpha must be finite, got {alpha_deg}")));
    }
    // the scene settings live in the dataset root, one level up
    let scene = match sample_dir.parent() {
        Some(root) if root.join(dataset::SCENE).exists() => read_scene(root)?,
        _ => RunConfig::default().scene,
    };
    let id = sample_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let labeled = sample_dir.join("bev.bin").exists();
    let sample = dataset::read_sample(sample_dir, &id, &scene.grid, labeled)?;
    create_dir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: String, img: &Tensor| -> Result<()> {
        let p = out.join(name);
        write_ppm(&p, img)?;
        written.push(p);
        Ok(())
    };
    emit("original.ppm".into(), &sample.image)?;
    let alpha = alpha_deg.to_radians();
    let mut rotated = None;
    for &mode in borders {
        let r = conjoint_rotate(&sample, alpha, mode)?;
        emit(format!("warped_{}.ppm", mode.name()), &r.image)?;
        rotated = Some(r);
    }
    if let Some(gt) = &sample.gt_bev {
        emit("bev_original.ppm".into(), &colorize_bev(gt))?;
        if let Some(gt_rot) = rotated.as_ref().and_then(|r| r.gt_bev.as_ref()) {
            emit("bev_rotated.ppm".into(), &colorize_bev(gt_rot))?;
        }
    }
    Ok(written)
}

/// `self-test`: every built-in suite. `inject_bev_sign_flip` swaps in a BEV
/// rotation with the wrong sign, which the geometry oracle must reject.
pub fn self_test(seed: u64, inject_bev_sign_flip: bool) -> Vec<SuiteOutcome> {
    let mut outcomes = selftest::run_all(seed);
    if inject_bev_sign_flip {
        for o in outcomes.iter_mut().filter(|o| o.name.starts_with("geometry")) {
            o.result = selftest::conjoint_oracle(seed, 200, 50, |a| Rotation2D::new(-a));
        }
    }
    outcomes
}
