//! Release-gate checks that need no dataset: the conjoint rotation oracle,
//! finite-difference gradient checks and the EMA recursion.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::bev::{BevGrid, GridSpec};
use crate::error::Result;
use crate::geometry::{apply_homography, homography_for_rotation, project, rotate_bev_map_with, rotation_y, mat3_vec, CameraIntrinsics, Rotation2D};
use crate::losses::dice_loss;
use crate::math;
use crate::model::{ema_update, forward, init_model, ModelConfig, ModelParams};
use crate::rng::{self, tag};
use crate::tensor::{SparseLinearMap, Tape, Tensor, Var};

/// Outcome of one named suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub result: Result<(), String>,
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_probes: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_probes: None,
        }
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences. Returns the worst `error / tolerance` ratio (≤ 1 passes) or
/// a description of the first failing element.
pub fn gradient_check(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    cfg: GradCheck,
) -> core::result::Result<f64, String> {
    let err = |e: crate::Error| format!("{e}");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;
    let eval = |inputs: &[Tensor]| -> core::result::Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).map_err(err)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).ok_or_else(|| format!("no gradient for input {k}"))?;
        let n = input.numel();
        let probes = cfg.max_probes.unwrap_or(n).clamp(1, n);
        for p in 0..probes {
            let i = p * n / probes;
            let x = input.data()[i];
            perturbed[k].data_mut()[i] = x + cfg.h;
            let plus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = x - cfg.h;
            let minus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.data()[i];
            let bound = (cfg.rel_tol * a.abs().max(numeric.abs())).max(cfg.abs_tol);
            let ratio = (a - numeric).abs() / bound;
            if !(ratio <= 1.0) {
                return Err(format!("input {k} element {i}: analytic {a:e} vs numeric {numeric:e}"));
            }
            worst = worst.max(ratio);
        }
    }
    Ok(worst)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> core::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Conjoint rotation oracle over random in-frustum ground points and angles
/// in `[−35°, 35°]`:
///
/// (a) mapping a point's pixel through the rotation homography lands on the
///     pixel of the rotated point, within 1e-9 px;
/// (b) the BEV cell of the planar-rotated ground coordinates holds, after
///     `rotate_bev_map_with(map, rotation)`, content from within one cell of
///     the point's original cell.
///
/// `rotation` builds the BEV rotation for an angle; the production rule is
/// `Rotation2D::new`, and a sign-flipped rule must make this fail.
pub fn conjoint_oracle(
    seed: u64,
    points: usize,
    angles: usize,
    rotation: impl Fn(f64) -> Rotation2D,
) -> core::result::Result<(), String> {
    let k = CameraIntrinsics::desk_default();
    let grid = GridSpec::default();
    let height = 1.5;
    let mut rng = rng::stream(seed, &[tag::SELFTEST, 1]);
    let (t_lo, t_hi) = k.horizontal_fov_tangents();
    let mut ground = Vec::with_capacity(points);
    while ground.len() < points {
        let z = rng.gen_range(grid.z_min + 0.5..grid.z_max() - 0.5);
        let x = z * rng.gen_range(t_lo..t_hi);
        if x.abs() < grid.x_max() - 0.5 {
            ground.push([x, height, z]);
        }
    }
    let alpha_max = math::deg_to_rad(35.0);
    // each cell holds its own 1-based index, so a rotated map names its sources
    let ids = BevGrid::new(
        Tensor::from_fn(&[1, grid.z_cells, grid.x_cells], |i| (i + 1) as f64),
        grid,
    )
    .map_err(|e| format!("{e}"))?;
    let mut transported = 0usize;
    for _ in 0..angles {
        let alpha = rng.gen_range(-alpha_max..=alpha_max);
        let h1 = homography_for_rotation(&k, alpha);
        let r3 = rotation_y(alpha);
        let rotated_ids = rotate_bev_map_with(&ids, rotation(alpha));
        let h2 = Rotation2D::new(alpha);
        for &p in &ground {
            let (u, v) = project(&k, p).map_err(|e| format!("{e}"))?;
            let (hu, hv) = apply_homography(&h1, u, v).map_err(|e| format!("{e}"))?;
            let (ru, rv) = project(&k, mat3_vec(&r3, p)).map_err(|e| format!("{e}"))?;
            let d = math::sqrt((hu - ru) * (hu - ru) + (hv - rv) * (hv - rv));
            check(d < 1e-9, || {
                format!("pixel mapping off by {d:e} px at alpha {alpha:.4} for point {p:?}")
            })?;

            let (qx, qz) = h2.apply(p[0], p[2]);
            let (Some((zi, xi)), Some((pzi, pxi))) = (grid.cell_of(qx, qz), grid.cell_of(p[0], p[2])) else {
                continue;
            };
            let id = rotated_ids.get(0, zi, xi);
            let src = id as usize - 1;
            let (szi, sxi) = (src / grid.x_cells, src % grid.x_cells);
            check(id >= 1.0 && szi.abs_diff(pzi) <= 1 && sxi.abs_diff(pxi) <= 1, || {
                format!(
                    "BEV transport at alpha {alpha:.4}: cell ({zi}, {xi}) holds content from {:?}, expected near ({pzi}, {pxi})",
                    (id >= 1.0).then_some((szi, sxi))
                )
            })?;
            transported += 1;
        }
    }
    check(transported * 2 >= points * angles, || {
        format!("only {transported} of {} point/angle pairs stayed on the grid", points * angles)
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 24,
        encoder_channels: vec![3, 4],
        depth_bins: 3,
        decoder_channels: 3,
        classes: 2,
        grid: GridSpec {
            z_cells: 6,
            x_cells: 6,
            cell_size: 1.0,
            z_min: 1.0,
        },
    }
}

/// Finite-difference checks of the core ops and of an end-to-end Dice loss
/// through a small network.
pub fn gradient_suite(seed: u64) -> core::result::Result<(), String> {
    let mut rng = rng::stream(seed, &[tag::SELFTEST, 2]);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let strict = GradCheck::default();
    let weights = random(&[2, 6, 6]);

    let x = random(&[2, 6, 6]);
    let y = random(&[2, 6, 6]).map(|v| v + 3.0);
    gradient_check(
        &[x, y],
        |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.div(a, v[1])?;
            let c = t.sub(b, v[0])?;
            let s = t.sigmoid(v[0]);
            let d = t.add(c, s)?;
            let r = t.relu(v[0]);
            let r = t.mul_scalar(r, 0.7);
            let r = t.add_scalar(r, 0.2);
            let d = t.add(d, r)?;
            let w = t.constant(weights.clone());
            let e = t.mul(d, w)?;
            let partial = t.sum(e, Some(&[0]))?;
            t.sum(partial, None)
        },
        strict,
    )
    .map_err(|e| format!("elementwise: {e}"))?;

    let img = random(&[2, 7, 9]);
    let kernel = random(&[3, 2, 3, 3]);
    let bias = random(&[3]);
    gradient_check(
        &[img, kernel, bias],
        |t, v| {
            let c = t.conv2d(v[0], v[1], 2, 1)?;
            let c = t.add_channel_bias(c, v[2])?;
            let sq = t.square(c);
            let m = t.mean(sq, Some(&[1, 2]))?;
            t.mean(m, None)
        },
        strict,
    )
    .map_err(|e| format!("conv2d: {e}"))?;

    let a = random(&[3, 4]);
    let b = random(&[4, 5]);
    let map = alloc::rc::Rc::new(
        SparseLinearMap::new(vec![3, 5], vec![2, 2], vec![(0, 1, 0.5), (0, 7, 0.5), (3, 14, 1.0), (2, 0, -0.3)])
            .map_err(|e| format!("{e}"))?,
    );
    gradient_check(
        &[a, b],
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.reshape(m, &[1, 3, 5])?;
            let r = t.resample(m, map.clone())?;
            let f = t.flip_last(r);
            let sq = t.square(f);
            t.sum(sq, None)
        },
        strict,
    )
    .map_err(|e| format!("matmul/resample: {e}"))?;

    let cfg = tiny_model();
    let init = init_model(&cfg, &mut rng::stream(seed, &[tag::SELFTEST, 3])).map_err(|e| format!("{e}"))?;
    // zero biases on exactly-zero features would sit on relu kinks
    let params = ModelParams::from_tensors(
        cfg.clone(),
        init.tensors()
            .iter()
            .map(|(n, t)| (n.clone(), if n.ends_with(".bias") { random(t.shape()).map(|v| 0.1 * v) } else { t.clone() }))
            .collect(),
    )
    .map_err(|e| format!("{e}"))?;
    let k = CameraIntrinsics::new(18.0, 18.0, 11.5, 7.5, 24, 16).map_err(|e| format!("{e}"))?;
    let image = random(&[3, 16, 24]).map(|v| 0.5 + 0.5 * v);
    let gt = random(&[2, 6, 6]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    end_to_end_check(&params, &image, &k, &gt, GradCheck {
        rel_tol: 1e-3,
        max_probes: Some(6),
        ..strict
    })
    .map_err(|e| format!("end-to-end: {e}"))?;
    Ok(())
}

/// Dice loss of the network's output, differentiated with respect to every
/// parameter tensor (probing a few elements of each).
pub fn end_to_end_check(
    params: &ModelParams,
    image: &Tensor,
    k: &CameraIntrinsics,
    gt: &Tensor,
    cfg: GradCheck,
) -> core::result::Result<f64, String> {
    let tensors: Vec<Tensor> = params.tensors().iter().map(|(_, t)| t.clone()).collect();
    gradient_check(
        &tensors,
        |tape, vars| {
            let bound = crate::model::BoundParams::from_vars(vars.to_vec());
            let out = forward(params, &bound, tape, image, k)?;
            let gt = tape.constant(gt.clone());
            dice_loss(tape, out.segmentation, gt)
        },
        cfg,
    )
}

/// The EMA recursion from a zero teacher towards a constant student of ones
/// with decay 0.999: 0.001 after one step, 0.001999 after two.
pub fn ema_suite() -> core::result::Result<(), String> {
    let cfg = tiny_model();
    let shapes = cfg.parameter_shapes().map_err(|e| format!("{e}"))?;
    let filled = |v: f64| {
        ModelParams::from_tensors(
            cfg.clone(),
            shapes.iter().map(|(n, s)| (n.clone(), Tensor::full(s, v))).collect(),
        )
    };
    let ones = filled(1.0).map_err(|e| format!("{e}"))?;
    let mut teacher = filled(0.0).map_err(|e| format!("{e}"))?;
    for expected in [0.001, 0.001999] {
        ema_update(&mut teacher, &ones, 0.999).map_err(|e| format!("{e}"))?;
        for (name, t) in teacher.tensors() {
            let worst = t.data().iter().map(|v| (v - expected).abs()).fold(0.0, f64::max);
            check(worst < 1e-15, || format!("{name}: expected {expected}, off by {worst:e}"))?;
        }
    }
    Ok(())
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    vec![
        SuiteOutcome {
            name: "geometry conjoint-rotation oracle",
            result: conjoint_oracle(seed, 200, 50, Rotation2D::new),
        },
        SuiteOutcome {
            name: "gradient checks",
            result: gradient_suite(seed),
        },
        SuiteOutcome {
            name: "EMA recursion",
            result: ema_suite(),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in run_all(0) {
            assert!(s.result.is_ok(), "{}: {:?}", s.name, s.result);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        assert!(conjoint_oracle(0, 50, 10, |a| Rotation2D::new(-a)).is_err());
    }

    #[test]
    fn gradient_check_catches_wrong_gradients() {
        // relu's kink at 0 is where a one-sided derivative disagrees
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = gradient_check(&[x], |t, v| Ok(t.relu(v[0])), GradCheck::default());
        assert!(r.is_err());
    }
}
