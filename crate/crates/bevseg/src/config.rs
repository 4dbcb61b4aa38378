//! Flat `section.key = value` configuration covering scene generation, the
//! model, training and augmentation. Later sources override earlier ones:
//! built-in defaults, then a config file, then command-line overrides.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bevseg_core::augment::AugmentConfig;
use bevseg_core::geometry::{BorderMode, CameraIntrinsics};
use bevseg_core::model::ModelConfig;
use bevseg_core::synthworld::SceneConfig;
use bevseg_core::trainer::TrainConfig;

use crate::error::{Error, Result};

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Training dataset directory.
    pub train_data: Option<PathBuf>,
    /// Evaluation dataset directory.
    pub eval_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub encoder_channels: Vec<usize>,
    pub depth_bins: usize,
    pub decoder_channels: usize,
    /// Full-scale training runs 25 epochs at batch 32; the defaults here
    /// are sized for the synthetic desk set.
    pub trainer: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            train_data: None,
            eval_data: None,
            output_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            encoder_channels: model.encoder_channels,
            depth_bins: model.depth_bins,
            decoder_channels: model.decoder_channels,
            trainer: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value.trim() {
        "" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Scene keys, written next to every generated dataset.
    pub const SCENE_SECTIONS: [&'static str; 3] = ["scene.", "grid.", "world."];

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scene;
        let k = &s.intrinsics;
        let g = &s.grid;
        let w = &s.world;
        let t = &self.trainer;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        vec![
            ("data.train", path(&self.train_data)),
            ("data.eval", path(&self.eval_data)),
            ("output.dir", self.output_dir.display().to_string()),
            ("scene.width", k.width.to_string()),
            ("scene.height", k.height.to_string()),
            ("scene.fx", k.fx.to_string()),
            ("scene.fy", k.fy.to_string()),
            ("scene.cx", k.cx.to_string()),
            ("scene.cy", k.cy.to_string()),
            ("grid.z_cells", g.z_cells.to_string()),
            ("grid.x_cells", g.x_cells.to_string()),
            ("grid.cell_size", g.cell_size.to_string()),
            ("grid.z_min", g.z_min.to_string()),
            ("world.camera_height", w.camera_height.to_string()),
            ("world.road_width_min", w.road_width.0.to_string()),
            ("world.road_width_max", w.road_width.1.to_string()),
            ("world.road_yaw_max", w.road_yaw_max.to_string()),
            ("world.road_offset_max", w.road_offset_max.to_string()),
            ("world.cross_road_prob", w.cross_road_prob.to_string()),
            ("world.walkway_width_min", w.walkway_width.0.to_string()),
            ("world.walkway_width_max", w.walkway_width.1.to_string()),
            ("world.walkway_prob", w.walkway_prob.to_string()),
            ("world.cars_min", w.cars.0.to_string()),
            ("world.cars_max", w.cars.1.to_string()),
            ("world.pedestrians_min", w.pedestrians.0.to_string()),
            ("world.pedestrians_max", w.pedestrians.1.to_string()),
            ("world.rejection_budget", w.rejection_budget.to_string()),
            ("model.encoder_channels", list(&self.encoder_channels)),
            ("model.depth_bins", self.depth_bins.to_string()),
            ("model.decoder_channels", self.decoder_channels.to_string()),
            ("trainer.epochs", t.epochs.to_string()),
            ("trainer.batch_size", t.batch_size.to_string()),
            ("trainer.lr_initial", t.lr_initial.to_string()),
            ("trainer.lr_final", t.lr_final.to_string()),
            ("trainer.lr_decay_epoch", t.lr_decay_epoch.map_or("auto".into(), |e| e.to_string())),
            ("trainer.lambda1", t.loss_weights.lambda1.to_string()),
            ("trainer.lambda2", t.loss_weights.lambda2.to_string()),
            ("trainer.ema_decay", t.ema_decay.to_string()),
            ("trainer.seed", t.seed.to_string()),
            ("trainer.eval_every", t.eval_every.to_string()),
            ("trainer.threshold", t.threshold.to_string()),
            ("trainer.unlabeled_includes_labeled", t.unlabeled_includes_labeled.to_string()),
            ("augment.alpha_max", t.augment.alpha_max.to_string()),
            ("augment.apply_prob", t.augment.apply_prob.to_string()),
            ("augment.border", t.augment.border.name().to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scene;
        let k = &mut s.intrinsics;
        let g = &mut s.grid;
        let w = &mut s.world;
        let t = &mut self.trainer;
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data.train" => self.train_data = path(v),
            "data.eval" => self.eval_data = path(v),
            "output.dir" => self.output_dir = PathBuf::from(v),
            "scene.width" => k.width = parse(key, v)?,
            "scene.height" => k.height = parse(key, v)?,
            "scene.fx" => k.fx = parse(key, v)?,
            "scene.fy" => k.fy = parse(key, v)?,
            "scene.cx" => k.cx = parse(key, v)?,
            "scene.cy" => k.cy = parse(key, v)?,
            "grid.z_cells" => g.z_cells = parse(key, v)?,
            "grid.x_cells" => g.x_cells = parse(key, v)?,
            "grid.cell_size" => g.cell_size = parse(key, v)?,
            "grid.z_min" => g.z_min = parse(key, v)?,
            "world.camera_height" => w.camera_height = parse(key, v)?,
            "world.road_width_min" => w.road_width.0 = parse(key, v)?,
            "world.road_width_max" => w.road_width.1 = parse(key, v)?,
            "world.road_yaw_max" => w.road_yaw_max = parse(key, v)?,
            "world.road_offset_max" => w.road_offset_max = parse(key, v)?,
            "world.cross_road_prob" => w.cross_road_prob = parse(key, v)?,
            "world.walkway_width_min" => w.walkway_width.0 = parse(key, v)?,
            "world.walkway_width_max" => w.walkway_width.1 = parse(key, v)?,
            "world.walkway_prob" => w.walkway_prob = parse(key, v)?,
            "world.cars_min" => w.cars.0 = parse(key, v)?,
            "world.cars_max" => w.cars.1 = parse(key, v)?,
            "world.pedestrians_min" => w.pedestrians.0 = parse(key, v)?,
            "world.pedestrians_max" => w.pedestrians.1 = parse(key, v)?,
            "world.rejection_budget" => w.rejection_budget = parse(key, v)?,
            "model.encoder_channels" => self.encoder_channels = parse_list(key, v)?,
            "model.depth_bins" => self.depth_bins = parse(key, v)?,
            "model.decoder_channels" => self.decoder_channels = parse(key, v)?,
            "trainer.epochs" => t.epochs = parse(key, v)?,
            "trainer.batch_size" => t.batch_size = parse(key, v)?,
            "trainer.lr_initial" => t.lr_initial = parse(key, v)?,
            "trainer.lr_final" => t.lr_final = parse(key, v)?,
            "trainer.lr_decay_epoch" => t.lr_decay_epoch = parse_opt(key, v)?,
            "trainer.lambda1" => t.loss_weights.lambda1 = parse(key, v)?,
            "trainer.lambda2" => t.loss_weights.lambda2 = parse(key, v)?,
            "trainer.ema_decay" => t.ema_decay = parse(key, v)?,
            "trainer.seed" => t.seed = parse(key, v)?,
            "trainer.eval_every" => t.eval_every = parse(key, v)?,
            "trainer.threshold" => t.threshold = parse(key, v)?,
            "trainer.unlabeled_includes_labeled" => t.unlabeled_includes_labeled = parse(key, v)?,
            "augment.alpha_max" => t.augment.alpha_max = parse(key, v)?,
            "augment.apply_prob" => t.augment.apply_prob = parse(key, v)?,
            "augment.border" => {
                t.augment.border = BorderMode::parse(v).ok_or_else(|| Error::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    msg: "expected replicate, zero or reflect".into(),
                })?
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `--section.key value` pairs (or `--section.key=value`).
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Usage(format!("expected `--section.key value`, got `{arg}`")))?;
            match key.split_once('=') {
                Some((key, value)) => self.set(key, value)?,
                None => {
                    let value = it.next().ok_or_else(|| Error::Usage(format!("missing value for `--{key}`")))?;
                    self.set(key, value)?;
                }
            }
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Only the scene-generation keys.
    pub fn scene_text(&self) -> String {
        self.entries()
            .iter()
            .filter(|(k, _)| Self::SCENE_SECTIONS.iter().any(|s| k.starts_with(s)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_height: self.scene.intrinsics.height,
            image_width: self.scene.intrinsics.width,
            encoder_channels: self.encoder_channels.clone(),
            depth_bins: self.depth_bins,
            decoder_channels: self.decoder_channels,
            grid: self.scene.grid,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.scene.intrinsics;
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?;
        self.model_config().validate()?;
        self.trainer.validate()?;
        Ok(())
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.trainer.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        let mut copy = RunConfig {
            output_dir: "elsewhere".into(),
            ..RunConfig::default()
        };
        for (k, v) in cfg.entries() {
            copy.set(k, &v).unwrap();
        }
        assert_eq!(copy, cfg);
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn precedence_cli_over_file_over_default() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.trainer.loss_weights.lambda1, 2e-3);
        cfg.apply_text("trainer.lambda1 = 0.5\ntrainer.lambda2 = 0.25 # comment\n", Path::new("x"))
            .unwrap();
        cfg.apply_overrides(&["--trainer.lambda1".into(), "0".into()]).unwrap();
        assert_eq!(cfg.trainer.loss_weights.lambda1, 0.0);
        assert_eq!(cfg.trainer.loss_weights.lambda2, 0.25);
        assert_eq!(cfg.trainer.ema_decay, 0.999);
        cfg.apply_overrides(&["--trainer.lambda2=1".into()]).unwrap();
        assert_eq!(cfg.trainer.loss_weights.lambda2, 1.0);
    }

    #[test]
    fn errors_name_the_key() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("trainer.lamda1", "0"), Err(Error::UnknownKey(k)) if k == "trainer.lamda1"));
        assert!(matches!(cfg.set("trainer.epochs", "many"), Err(Error::BadValue { key, .. }) if key == "trainer.epochs"));
        assert!(cfg.set("augment.border", "wrap").is_err());
        assert!(cfg.apply_overrides(&["--trainer.epochs".into()]).is_err());
        assert!(cfg.apply_overrides(&["trainer.epochs".into(), "1".into()]).is_err());
        assert!(cfg.apply_text("no equals sign", Path::new("x")).is_err());
    }

    #[test]
    fn lists_and_optionals() {
        let mut cfg = RunConfig::default();
        cfg.set("model.encoder_channels", "4, 8").unwrap();
        assert_eq!(cfg.encoder_channels, vec![4, 8]);
        cfg.set("trainer.lr_decay_epoch", "3").unwrap();
        assert_eq!(cfg.trainer.lr_decay_epoch, Some(3));
        cfg.set("trainer.lr_decay_epoch", "auto").unwrap();
        assert_eq!(cfg.trainer.lr_decay_epoch, None);
    }
}
