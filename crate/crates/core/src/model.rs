//! The BEV segmentation network: a strided conv encoder, a per-column MLP
//! view transformer with intrinsics-driven polar-to-Cartesian resampling,
//! and a small conv decoder with a sigmoid head.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::math;
use crate::rng::Rng;
use crate::synthworld::NUM_CLASSES;
use crate::tensor::{conv_output_size, Gradients, SparseLinearMap, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the stride-2 encoder stages; the last one is the
    /// feature width used from the view transformer onwards.
    pub encoder_channels: Vec<usize>,
    pub depth_bins: usize,
    pub decoder_channels: usize,
    pub classes: usize,
    pub grid: GridSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 96,
            image_width: 128,
            encoder_channels: vec![8, 16, 32],
            depth_bins: 16,
            decoder_channels: 8,
            classes: NUM_CLASSES,
            grid: GridSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated: at least one encoder stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::InvalidValue("encoder needs at least one non-empty stage".into()));
        }
        if self.depth_bins == 0 || self.decoder_channels == 0 || self.classes == 0 {
            return Err(Error::InvalidValue(format!("bad model config {self:?}")));
        }
        self.grid.validate()?;
        self.fv_feature_size().map(|_| ())
    }

    /// Spatial size `(H', W')` of the encoder output.
    pub fn fv_feature_size(&self) -> Result<(usize, usize)> {
        let mut hw = (self.image_height, self.image_width);
        for _ in &self.encoder_channels {
            hw = (conv_output_size(hw.0, 3, 2, 1)?, conv_output_size(hw.1, 3, 2, 1)?);
        }
        Ok(hw)
    }

    /// Pixel distance between neighbouring encoder output columns.
    pub fn encoder_stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    /// Ordered parameter names and shapes.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            out.push((format!("enc{i}.weight"), vec![c, cin, 3, 3]));
            out.push((format!("enc{i}.bias"), vec![c]));
            cin = c;
        }
        let cf = self.feature_channels();
        let (h8, _) = self.fv_feature_size()?;
        out.push(("vt.weight".into(), vec![cf * self.depth_bins, cf * h8]));
        out.push(("vt.bias".into(), vec![cf * self.depth_bins]));
        let cd = self.decoder_channels;
        out.push(("dec0.weight".into(), vec![cd, cf, 1, 1]));
        out.push(("dec0.bias".into(), vec![cd]));
        out.push(("dec1.weight".into(), vec![cd, cd, 3, 3]));
        out.push(("dec1.bias".into(), vec![cd]));
        out.push(("head.weight".into(), vec![self.classes, cd, 1, 1]));
        out.push(("head.bias".into(), vec![self.classes]));
        Ok(out)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Builds params from named tensors, checking them against the config.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.parameter_shapes()?;
        if expected.len() != tensors.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ParamMismatch(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!("{a} {:?} vs {b} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameter handles on one tape, in [`ModelParams`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps handles already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order (zeros where a parameter was unused).
    pub fn gradients(&self, grads: &Gradients, params: &ModelParams) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Fan-in scaled uniform (Kaiming) weights and zero biases.
pub fn init_model(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let tensors = config
        .parameter_shapes()?
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let bound = init_bound(&shape);
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            };
            (name, t)
        })
        .collect();
    ModelParams::from_tensors(config.clone(), tensors)
}

/// `sqrt(6 / fan_in)` for a weight of the given shape.
pub fn init_bound(shape: &[usize]) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    math::sqrt(6.0 / fan_in as f64)
}

/// Tensors produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `Cf×Z×X` view-transformer output, before decoding.
    pub bev_feature: Var,
    /// `C×Z×X` class probabilities.
    pub segmentation: Var,
}

/// Fixed bilinear weights taking the polar feature `[depth_bins, W']` to the
/// BEV grid `[Z, X]` under intrinsics `k`.
///
/// A cell at metric `(x, z)` reads feature column `u / stride` where
/// `u = fx·x/z + cx`, and depth bin `(z − z_min)/(z_max − z_min)·D − ½`
/// (clamped). Columns outside the feature map contribute zero.
pub fn polar_to_bev_map(config: &ModelConfig, k: &CameraIntrinsics) -> Result<SparseLinearMap> {
    let (_, w8) = config.fv_feature_size()?;
    let grid = &config.grid;
    let d = config.depth_bins;
    let stride = config.encoder_stride() as f64;
    let mut taps = Vec::with_capacity(grid.cells() * 4);
    for zi in 0..grid.z_cells {
        for xi in 0..grid.x_cells {
            let (x, z) = grid.cell_center(zi, xi);
            if !(z > 0.0) {
                continue;
            }
            let out = (zi * grid.x_cells + xi) as u32;
            let col = (k.fx * x / z + k.cx) / stride;
            let depth = ((z - grid.z_min) / (grid.z_max() - grid.z_min) * d as f64 - 0.5).clamp(0.0, (d - 1) as f64);
            let (c0, d0) = (math::floor(col), math::floor(depth));
            let (tc, td) = (col - c0, depth - d0);
            let (c0, d0) = (c0 as isize, d0 as usize);
            for (dd, wd) in [(d0, 1.0 - td), (d0 + 1, td)] {
                if wd == 0.0 || dd >= d {
                    continue;
                }
                for (cc, wc) in [(c0, 1.0 - tc), (c0 + 1, tc)] {
                    if wc == 0.0 || cc < 0 || cc as usize >= w8 {
                        continue;
                    }
                    taps.push((out, (dd * w8 + cc as usize) as u32, wd * wc));
                }
            }
        }
    }
    SparseLinearMap::new(vec![d, w8], vec![grid.z_cells, grid.x_cells], taps)
}

/// Runs the network on one `3×H×W` image.
pub fn forward(
    params: &ModelParams,
    bound: &BoundParams,
    tape: &mut Tape,
    image: &Tensor,
    k: &CameraIntrinsics,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let expected = [3, cfg.image_height, cfg.image_width];
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    if k.width != cfg.image_width || k.height != cfg.image_height {
        return Err(Error::InvalidValue(format!(
            "intrinsics for {}x{} image, model expects {}x{}",
            k.width, k.height, cfg.image_width, cfg.image_height
        )));
    }
    let p = bound.vars();
    let mut next = 0;
    let mut take = || {
        let v = p[next];
        next += 1;
        v
    };

    let mut x = tape.constant(image.clone());
    for _ in &cfg.encoder_channels {
        let (w, b) = (take(), take());
        x = tape.conv2d(x, w, 2, 1)?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x);
    }

    // each image column's vertical feature profile maps to depth bins
    let cf = cfg.feature_channels();
    let (h8, w8) = cfg.fv_feature_size()?;
    let columns = tape.reshape(x, &[cf * h8, w8])?;
    let (w, b) = (take(), take());
    let polar = tape.matmul(w, columns)?;
    let polar = tape.add_channel_bias(polar, b)?;
    let polar = tape.relu(polar);
    let polar = tape.reshape(polar, &[cf, cfg.depth_bins, w8])?;
    let bev_feature = tape.resample(polar, Rc::new(polar_to_bev_map(cfg, k)?))?;

    // pointwise channel mixing, then one spatial conv, then the class head
    let mut y = bev_feature;
    for padding in [0, 1] {
        let (w, b) = (take(), take());
        y = tape.conv2d(y, w, 1, padding)?;
        y = tape.add_channel_bias(y, b)?;
        y = tape.relu(y);
    }
    let (w, b) = (take(), take());
    y = tape.conv2d(y, w, 1, 0)?;
    y = tape.add_channel_bias(y, b)?;
    let segmentation = tape.sigmoid(y);
    Ok(ForwardOutput {
        bev_feature,
        segmentation,
    })
}

/// Inference without gradients: returns `(bev_feature, segmentation)`.
pub fn predict(params: &ModelParams, image: &Tensor, k: &CameraIntrinsics) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward(params, &bound, &mut tape, image, k)?;
    Ok((tape.value(out.bev_feature).clone(), tape.value(out.segmentation).clone()))
}

/// `teacher ← decay·teacher + (1 − decay)·student`, elementwise in parameter order.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidValue(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    teacher.check_compatible(student)?;
    let rate = 1.0 - decay;
    for ((_, t), (_, s)) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + rate * sv;
        }
    }
    Ok(())
}
