//! Synthetic stand-in for a driving dataset: flat ground with drivable and
//! walkway regions, box-shaped cars and pedestrians, a raycasting pinhole
//! renderer, a BEV rasterizer and a shadow-model visibility mask.
//!
//! Everything is exactly mirror-symmetric: negating `x` in the world and
//! flipping the intrinsics reproduces the mirrored image and BEV bit for bit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::bev::{BevGrid, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["drivable", "walkway", "car", "pedestrian"];

/// Objects at least this tall cast visibility shadows.
pub const OCCLUSION_HEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Drivable = 0,
    Walkway = 1,
    Car = 2,
    Pedestrian = 3,
}

impl ObjectClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_ground(self) -> bool {
        matches!(self, ObjectClass::Drivable | ObjectClass::Walkway)
    }
}

/// Rectangle in the metric x-z plane, rotated by `yaw` about its center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    cos_yaw: f64,
    sin_yaw: f64,
}

impl Footprint {
    pub fn new(center: (f64, f64), half_extent: (f64, f64), yaw: f64) -> Self {
        Footprint {
            center,
            half_extent,
            cos_yaw: math::cos(yaw),
            sin_yaw: math::sin(yaw),
        }
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_extent.0 * self.half_extent.1
    }

    /// World direction `(dx, dz)` expressed in the rectangle's local axes.
    #[inline]
    fn to_local_dir(&self, dx: f64, dz: f64) -> (f64, f64) {
        (
            self.cos_yaw * dx + self.sin_yaw * dz,
            -(self.sin_yaw * dx) + self.cos_yaw * dz,
        )
    }

    #[inline]
    fn to_local(&self, x: f64, z: f64) -> (f64, f64) {
        self.to_local_dir(x - self.center.0, z - self.center.1)
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (lx, lz) = self.to_local(x, z);
        lx.abs() <= self.half_extent.0 && lz.abs() <= self.half_extent.1
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (hx, hz) = self.half_extent;
        let (c, s) = (self.cos_yaw, self.sin_yaw);
        let at = |lx: f64, lz: f64| (self.center.0 + c * lx - s * lz, self.center.1 + s * lx + c * lz);
        [at(-hx, -hz), at(hx, -hz), at(hx, hz), at(-hx, hz)]
    }

    /// Parameter interval `[t0, t1]` where `origin + t·dir` is inside, if any.
    fn ray_interval(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<(f64, f64, Axis)> {
        let (ox, oz) = self.to_local(origin.0, origin.1);
        let (dx, dz) = self.to_local_dir(dir.0, dir.1);
        let (ax0, ax1) = slab(ox, dx, self.half_extent.0)?;
        let (az0, az1) = slab(oz, dz, self.half_extent.1)?;
        let (t0, axis) = if ax0 >= az0 { (ax0, Axis::X) } else { (az0, Axis::Z) };
        let t1 = ax1.min(az1);
        (t0 <= t1).then_some((t0, t1, axis))
    }

    /// Separating-axis overlap test, with both rectangles grown by `margin`.
    pub fn intersects(&self, other: &Footprint, margin: f64) -> bool {
        let axes = [
            (self.cos_yaw, self.sin_yaw),
            (-self.sin_yaw, self.cos_yaw),
            (other.cos_yaw, other.sin_yaw),
            (-other.sin_yaw, other.cos_yaw),
        ];
        let extent = |f: &Footprint, ax: (f64, f64)| {
            let c = f.center.0 * ax.0 + f.center.1 * ax.1;
            let r = f.half_extent.0 * (f.cos_yaw * ax.0 + f.sin_yaw * ax.1).abs()
                + f.half_extent.1 * (-f.sin_yaw * ax.0 + f.cos_yaw * ax.1).abs()
                + margin;
            (c - r, c + r)
        };
        axes.iter().all(|&ax| {
            let (a0, a1) = extent(self, ax);
            let (b0, b1) = extent(other, ax);
            a0 <= b1 && b0 <= a1
        })
    }

    fn mirrored(&self) -> Self {
        Footprint {
            center: (-self.center.0, self.center.1),
            half_extent: self.half_extent,
            cos_yaw: self.cos_yaw,
            sin_yaw: -self.sin_yaw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    X,
    Z,
    Y,
}

/// Entry/exit parameters of `o + t·d` through `[−half, half]`.
#[inline]
fn slab(o: f64, d: f64, half: f64) -> Option<(f64, f64)> {
    slab_range(o, d, -half, half)
}

#[inline]
fn slab_range(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d == 0.0 {
        return (lo <= o && o <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let a = (lo - o) / d;
    let b = (hi - o) / d;
    Some(if a <= b { (a, b) } else { (b, a) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldObject {
    pub class: ObjectClass,
    pub footprint: Footprint,
    /// Meters; zero for ground classes.
    pub height: f64,
    pub albedo: [f64; 3],
}

impl WorldObject {
    pub fn new(class: ObjectClass, footprint: Footprint, height: f64, albedo: [f64; 3]) -> Result<Self> {
        let ok_height = if class.is_ground() { height == 0.0 } else { height > 0.0 };
        if !ok_height || !(footprint.area() > 0.0) {
            return Err(Error::InvalidValue(alloc::format!(
                "invalid {class:?}: height {height}, area {}",
                footprint.area()
            )));
        }
        Ok(WorldObject {
            class,
            footprint,
            height,
            albedo,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub objects: Vec<WorldObject>,
    pub ground_albedo: [f64; 3],
    pub sky_albedo: [f64; 3],
    pub camera_height: f64,
    pub seed: u64,
}

impl World {
    pub fn empty(camera_height: f64) -> Self {
        World {
            objects: Vec::new(),
            ground_albedo: [0.35, 0.42, 0.3],
            sky_albedo: [0.55, 0.7, 0.92],
            camera_height,
            seed: 0,
        }
    }

    /// The world reflected through the plane `x = 0`.
    pub fn mirrored(&self) -> Self {
        World {
            objects: self
                .objects
                .iter()
                .map(|o| WorldObject {
                    footprint: o.footprint.mirrored(),
                    ..o.clone()
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Albedo of the ground at `(x, z)`: walkway over drivable over bare ground.
    fn ground_albedo_at(&self, x: f64, z: f64) -> [f64; 3] {
        let mut best: Option<&WorldObject> = None;
        for o in self.objects.iter().filter(|o| o.class.is_ground()) {
            if o.footprint.contains(x, z) && best.map_or(true, |b| o.class.index() > b.class.index()) {
                best = Some(o);
            }
        }
        best.map_or(self.ground_albedo, |o| o.albedo)
    }
}

/// Sampling ranges for [`sample_world`].
#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub camera_height: f64,
    pub road_width: (f64, f64),
    pub road_yaw_max: f64,
    pub road_offset_max: f64,
    pub cross_road_prob: f64,
    pub walkway_width: (f64, f64),
    pub walkway_prob: f64,
    pub cars: (usize, usize),
    pub pedestrians: (usize, usize),
    pub rejection_budget: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            camera_height: 1.5,
            road_width: (5.0, 9.0),
            road_yaw_max: 0.3,
            road_offset_max: 3.0,
            cross_road_prob: 0.4,
            walkway_width: (1.5, 3.0),
            walkway_prob: 0.8,
            cars: (1, 4),
            pedestrians: (1, 3),
            rejection_budget: 1000,
        }
    }
}

fn jitter_color(rng: &mut Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn range_f(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn range_u(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Random world with a road (optionally a cross road), walkways along the
/// road edges, and cars and pedestrians standing on drivable ground.
pub fn sample_world(rng: &mut Rng, params: &WorldParams, grid: &GridSpec) -> Result<World> {
    let seed: u64 = rng.gen();
    let mut world = World::empty(params.camera_height);
    world.seed = seed;
    world.ground_albedo = jitter_color(rng, [0.33, 0.42, 0.28], 0.05);

    let z_mid = (grid.z_min + grid.z_max()) / 2.0;
    let long = 4.0 * (grid.z_max() - grid.z_min).max(grid.x_max() - grid.x_min());
    let road_gray = rng.gen_range(0.22..0.34);
    let road_albedo = jitter_color(rng, [road_gray, road_gray, road_gray + 0.02], 0.02);

    let road_w = range_f(rng, params.road_width);
    let road_yaw = rng.gen_range(-params.road_yaw_max..=params.road_yaw_max);
    let road_x = rng.gen_range(-params.road_offset_max..=params.road_offset_max);
    let road = Footprint::new((road_x, z_mid), (road_w / 2.0, long / 2.0), road_yaw);
    world.objects.push(WorldObject::new(ObjectClass::Drivable, road, 0.0, road_albedo)?);

    if rng.gen_bool(params.cross_road_prob) {
        let w = range_f(rng, params.road_width);
        let z = rng.gen_range(grid.z_min + 3.0..grid.z_max() - 2.0);
        let yaw = math::PI / 2.0 + rng.gen_range(-0.2..0.2);
        let cross = Footprint::new((0.0, z), (w / 2.0, long / 2.0), yaw);
        world.objects.push(WorldObject::new(ObjectClass::Drivable, cross, 0.0, road_albedo)?);
    }

    let walk_albedo = jitter_color(rng, [0.62, 0.58, 0.52], 0.05);
    let mut any_walkway = false;
    for side in [-1.0, 1.0] {
        if !rng.gen_bool(params.walkway_prob) && !(side > 0.0 && !any_walkway) {
            continue;
        }
        let ww = range_f(rng, params.walkway_width);
        // overlap the road edge by a small strip
        let overlap = 0.3;
        let lateral = side * (road_w / 2.0 + ww / 2.0 - overlap);
        let c = (
            road_x + math::cos(road_yaw) * lateral,
            z_mid + math::sin(road_yaw) * lateral,
        );
        let fp = Footprint::new(c, (ww / 2.0, long / 2.0), road_yaw);
        world.objects.push(WorldObject::new(ObjectClass::Walkway, fp, 0.0, walk_albedo)?);
        any_walkway = true;
    }

    let n_cars = range_u(rng, params.cars);
    for _ in 0..n_cars {
        let yaw = road_yaw + if rng.gen_bool(0.5) { 0.0 } else { math::PI } + rng.gen_range(-0.15..0.15);
        let half = (rng.gen_range(0.8..1.0), rng.gen_range(1.9..2.4));
        let height = rng.gen_range(1.3..1.8);
        let albedo = [rng.gen_range(0.1..0.95), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.95)];
        place_on_drivable(rng, &mut world, grid, params.rejection_budget, "car", |center| {
            WorldObject::new(ObjectClass::Car, Footprint::new(center, half, yaw), height, albedo)
        })?;
    }

    let n_peds = range_u(rng, params.pedestrians);
    for _ in 0..n_peds {
        let yaw = rng.gen_range(-math::PI..math::PI);
        let half = (rng.gen_range(0.25..0.35), rng.gen_range(0.25..0.35));
        let height = rng.gen_range(1.55..1.9);
        let albedo = jitter_color(rng, [0.85, 0.75, 0.2], 0.12);
        place_on_drivable(rng, &mut world, grid, params.rejection_budget, "pedestrian", |center| {
            WorldObject::new(ObjectClass::Pedestrian, Footprint::new(center, half, yaw), height, albedo)
        })?;
    }
    Ok(world)
}

fn place_on_drivable(
    rng: &mut Rng,
    world: &mut World,
    grid: &GridSpec,
    budget: usize,
    what: &'static str,
    make: impl Fn((f64, f64)) -> Result<WorldObject>,
) -> Result<()> {
    // keep objects off the grid's near edge, where the camera cannot see the ground
    let z_lo = grid.z_min + 2.0;
    let roads: Vec<Footprint> = world
        .objects
        .iter()
        .filter(|o| o.class == ObjectClass::Drivable)
        .map(|o| o.footprint)
        .collect();
    if roads.is_empty() {
        return Err(Error::RejectionBudget(what));
    }
    for _ in 0..budget {
        let road = roads[rng.gen_range(0..roads.len())];
        let (hx, hz) = road.half_extent;
        let (lx, lz) = (rng.gen_range(-hx..=hx), rng.gen_range(-hz..=hz));
        let center = (
            road.center.0 + road.cos_yaw * lx - road.sin_yaw * lz,
            road.center.1 + road.sin_yaw * lx + road.cos_yaw * lz,
        );
        let in_extent = center.0 >= grid.x_min() + 0.5
            && center.0 <= grid.x_max() - 0.5
            && center.1 >= z_lo
            && center.1 <= grid.z_max() - 0.5;
        if !in_extent {
            continue;
        }
        let candidate = make(center)?;
        let clear = world
            .objects
            .iter()
            .filter(|o| !o.class.is_ground())
            .all(|o| !candidate.footprint.intersects(&o.footprint, 0.2));
        if clear {
            world.objects.push(candidate);
            return Ok(());
        }
    }
    Err(Error::RejectionBudget(what))
}

/// Result of tracing one camera ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    Sky,
    Ground { x: f64, z: f64, t: f64 },
    Object { index: usize, t: f64, face: Face },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    Top,
    SideX,
    SideZ,
}

/// Direction of the ray through pixel center `(u, v)`.
pub fn pixel_ray(k: &CameraIntrinsics, u: usize, v: usize) -> [f64; 3] {
    [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0]
}

/// Nearest intersection of the ray `t·dir` (from the camera center).
pub fn trace(world: &World, dir: [f64; 3]) -> Hit {
    let h = world.camera_height;
    let mut best = Hit::Sky;
    let mut best_t = f64::INFINITY;
    if dir[1] > 0.0 {
        let t = h / dir[1];
        best_t = t;
        best = Hit::Ground {
            x: t * dir[0],
            z: t * dir[2],
            t,
        };
    }
    for (index, o) in world.objects.iter().enumerate() {
        if o.class.is_ground() {
            continue;
        }
        let Some((t0, t1, axis)) = o.footprint.ray_interval((0.0, 0.0), (dir[0], dir[2])) else {
            continue;
        };
        // y is down: the box spans y ∈ [h − height, h]
        let Some((y0, y1)) = slab_range(0.0, dir[1], h - o.height, h) else {
            continue;
        };
        let (enter, axis) = if y0 > t0 { (y0, Axis::Y) } else { (t0, axis) };
        let exit = t1.min(y1);
        if enter <= exit && enter > 0.0 && enter < best_t {
            best_t = enter;
            let face = match axis {
                Axis::Y => Face::Top,
                Axis::X => Face::SideX,
                Axis::Z => Face::SideZ,
            };
            best = Hit::Object { index, t: enter, face };
        }
    }
    best
}

/// Renders the `3×H×W` front-view image in `[0, 1]`.
pub fn render_fv(world: &World, k: &CameraIntrinsics) -> Tensor {
    let (w, h) = (k.width, k.height);
    let plane = w * h;
    let mut out = vec![0.0; 3 * plane];
    for v in 0..h {
        for u in 0..w {
            let dir = pixel_ray(k, u, v);
            let norm = math::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + 1.0);
            let (albedo, factor, t) = match trace(world, dir) {
                Hit::Sky => {
                    let f = 1.0 - 0.3 * (v as f64 / h as f64);
                    (world.sky_albedo, f, 0.0)
                }
                Hit::Ground { x, z, t } => (world.ground_albedo_at(x, z), 1.0, t),
                Hit::Object { index, t, face } => {
                    let f = match face {
                        Face::Top => 1.0,
                        Face::SideZ => 0.85,
                        Face::SideX => 0.7,
                    };
                    (world.objects[index].albedo, f, t)
                }
            };
            let atten = 1.0 / (1.0 + 0.05 * t * norm);
            for ch in 0..3 {
                out[ch * plane + v * w + u] = (albedo[ch] * factor * atten).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("render shape")
}

/// Binary `C×Z×X` map: cell `(c, z, x)` is 1 iff its center lies in a class-`c` footprint.
pub fn rasterize_bev(world: &World, grid: &GridSpec) -> BevGrid {
    let mut map = BevGrid::zeros(NUM_CLASSES, *grid);
    for zi in 0..grid.z_cells {
        for xi in 0..grid.x_cells {
            let (x, z) = grid.cell_center(zi, xi);
            for o in &world.objects {
                if o.footprint.contains(x, z) {
                    map.set(o.class.index(), zi, xi, 1.0);
                }
            }
        }
    }
    map
}

/// Whether the cell center `(x, z)` is inside the camera's horizontal FOV wedge.
pub fn in_fov(k: &CameraIntrinsics, x: f64, z: f64) -> bool {
    if !(z > 0.0) {
        return false;
    }
    let (lo, hi) = k.horizontal_fov_tangents();
    let t = x / z;
    lo <= t && t <= hi
}

/// `1×Z×X` mask of cells inside the FOV wedge and not shadowed by a closer
/// object at least [`OCCLUSION_HEIGHT`] tall.
pub fn visibility_mask(world: &World, k: &CameraIntrinsics, grid: &GridSpec) -> BevGrid {
    let mut mask = BevGrid::zeros(1, *grid);
    let occluders: Vec<&Footprint> = world
        .objects
        .iter()
        .filter(|o| !o.class.is_ground() && o.height >= OCCLUSION_HEIGHT)
        .map(|o| &o.footprint)
        .collect();
    for zi in 0..grid.z_cells {
        for xi in 0..grid.x_cells {
            let (x, z) = grid.cell_center(zi, xi);
            if !in_fov(k, x, z) {
                continue;
            }
            let shadowed = occluders.iter().any(|fp| {
                if fp.contains(x, z) {
                    return false;
                }
                // segment from the camera ground point (t = 0) to the cell (t = 1)
                matches!(fp.ray_interval((0.0, 0.0), (x, z)), Some((t0, t1, _)) if t1 >= 0.0 && t0 <= 1.0)
            });
            if !shadowed {
                mask.set(0, zi, xi, 1.0);
            }
        }
    }
    mask
}

/// One dataset element.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub intrinsics: CameraIntrinsics,
    /// Present iff the sample belongs to the labeled split.
    pub gt_bev: Option<BevGrid>,
    pub visibility: BevGrid,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.gt_bev.is_some()
    }
}

/// Generation settings shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub world: WorldParams,
    pub intrinsics: CameraIntrinsics,
    pub grid: GridSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            world: WorldParams::default(),
            intrinsics: CameraIntrinsics::desk_default(),
            grid: GridSpec::default(),
        }
    }
}

pub fn sample_id(index: usize) -> String {
    alloc::format!("{index:06}")
}

/// Generates sample `index` from its own rng stream `(seed, WORLD, index)`,
/// so samples can be produced in any order with identical results.
pub fn generate_sample(cfg: &SceneConfig, seed: u64, index: usize, labeled: bool) -> Result<Sample> {
    let mut rng = rng::stream(seed, &[rng::tag::WORLD, index as u64]);
    // crowded draws are retried from the same stream, so the result stays deterministic
    let mut attempt = 0;
    let world = loop {
        match sample_world(&mut rng, &cfg.world, &cfg.grid) {
            Err(Error::RejectionBudget(_)) if attempt < 8 => attempt += 1,
            other => break other?,
        }
    };
    Ok(Sample {
        id: sample_id(index),
        image: render_fv(&world, &cfg.intrinsics),
        intrinsics: cfg.intrinsics,
        gt_bev: labeled.then(|| rasterize_bev(&world, &cfg.grid)),
        visibility: visibility_mask(&world, &cfg.intrinsics, &cfg.grid),
    })
}

/// Number of labeled samples for a split: `round(n · fraction)`, at least one.
pub fn labeled_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidValue(alloc::format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok((math::round(n as f64 * fraction) as usize).clamp(1.min(n), n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::hflip_intrinsics;

    #[test]
    fn labeled_count_rounding() {
        assert_eq!(labeled_count(10, 0.2).unwrap(), 2);
        assert_eq!(labeled_count(512, 0.1).unwrap(), 51);
        assert_eq!(labeled_count(7, 1.0).unwrap(), 7);
        assert_eq!(labeled_count(10, 0.01).unwrap(), 1);
        assert!(labeled_count(10, 0.0).is_err());
        assert!(labeled_count(10, 1.5).is_err());
    }

    #[test]
    fn world_object_invariants() {
        let fp = Footprint::new((0.0, 5.0), (1.0, 2.0), 0.0);
        assert!(WorldObject::new(ObjectClass::Drivable, fp, 0.0, [0.0; 3]).is_ok());
        assert!(WorldObject::new(ObjectClass::Drivable, fp, 1.0, [0.0; 3]).is_err());
        assert!(WorldObject::new(ObjectClass::Car, fp, 0.0, [0.0; 3]).is_err());
        let flat = Footprint::new((0.0, 5.0), (0.0, 2.0), 0.0);
        assert!(WorldObject::new(ObjectClass::Car, flat, 1.0, [0.0; 3]).is_err());
    }

    #[test]
    fn footprint_contains_rotated() {
        let fp = Footprint::new((1.0, 5.0), (2.0, 0.5), math::PI / 2.0);
        assert!(fp.contains(1.0, 6.9));
        assert!(!fp.contains(2.9, 5.0));
        for (x, z) in fp.corners() {
            assert!((x - 1.0).abs() <= 0.5 + 1e-12 && (z - 5.0).abs() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn empty_world_renders_ground_and_sky() {
        let k = CameraIntrinsics::desk_default();
        let world = World::empty(1.5);
        let img = render_fv(&world, &k);
        let plane = k.width * k.height;
        // rows below cy look down at the ground, rows at/above it see sky
        for v in 0..k.height {
            let px = img.data()[v * k.width + 10];
            let expected_ground = (v as f64) > k.cy;
            let hit = trace(&world, pixel_ray(&k, 10, v));
            assert_eq!(matches!(hit, Hit::Ground { .. }), expected_ground, "row {v}");
            if !expected_ground {
                let f = 1.0 - 0.3 * (v as f64 / k.height as f64);
                assert_eq!(px, world.sky_albedo[0] * f);
            }
        }
        assert_eq!(img.shape(), &[3, k.height, k.width]);
        assert!(img.data()[..plane].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn box_on_optical_axis_colors_image_center() {
        let k = CameraIntrinsics::desk_default();
        let mut world = World::empty(1.5);
        let albedo = [0.9, 0.1, 0.4];
        let fp = Footprint::new((0.0, 6.0), (1.0, 1.0), 0.0);
        world.objects.push(WorldObject::new(ObjectClass::Car, fp, 3.0, albedo).unwrap());
        let img = render_fv(&world, &k);
        let (u, v) = (64, 48);
        let hit = trace(&world, pixel_ray(&k, u, v));
        let Hit::Object { t, face, .. } = hit else { panic!("expected object hit, got {hit:?}") };
        assert_eq!(face, Face::SideZ);
        // front face at z = 5
        assert!((t - 5.0).abs() < 1e-12);
        let dir = pixel_ray(&k, u, v);
        let range = t * (dir[0] * dir[0] + dir[1] * dir[1] + 1.0f64).sqrt();
        let plane = k.width * k.height;
        for ch in 0..3 {
            let expected = albedo[ch] * 0.85 / (1.0 + 0.05 * range);
            assert!((img.data()[ch * plane + v * k.width + u] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn car_area_count() {
        let grid = GridSpec::default();
        let mut world = World::empty(1.5);
        // 2m x 2m aligned with cell boundaries
        let fp = Footprint::new((1.0, 9.0), (1.0, 1.0), 0.0);
        world.objects.push(WorldObject::new(ObjectClass::Car, fp, 1.5, [0.5; 3]).unwrap());
        let map = rasterize_bev(&world, &grid);
        let side = (2.0f64 / grid.cell_size).ceil() as usize;
        assert_eq!(map.count(ObjectClass::Car.index()), side * side);
        // an off-grid placement differs from ⌈2/cell⌉² by at most one perimeter ring
        let mut world = World::empty(1.5);
        let fp = Footprint::new((1.13, 9.07), (1.0, 1.0), 0.0);
        world.objects.push(WorldObject::new(ObjectClass::Car, fp, 1.5, [0.5; 3]).unwrap());
        let n = rasterize_bev(&world, &grid).count(2);
        assert!(n.abs_diff(side * side) <= 4 * side + 4, "{n}");
        assert_eq!(map.count(0) + map.count(1) + map.count(3), 0);
    }

    #[test]
    fn rasterize_mirror_matches_flip() {
        let grid = GridSpec::default();
        let cfg = WorldParams::default();
        for seed in 0..10 {
            let world = sample_world(&mut rng::stream(seed, &[]), &cfg, &grid).unwrap();
            let flipped = crate::geometry::hflip_bev(&rasterize_bev(&world, &grid));
            assert_eq!(rasterize_bev(&world.mirrored(), &grid), flipped);
        }
    }

    #[test]
    fn render_mirror_equivariance() {
        let k = CameraIntrinsics::desk_default();
        let grid = GridSpec::default();
        for seed in 0..3 {
            let world = sample_world(&mut rng::stream(seed, &[]), &WorldParams::default(), &grid).unwrap();
            let mirrored = render_fv(&world.mirrored(), &hflip_intrinsics(&k));
            assert_eq!(mirrored, render_fv(&world, &k).flip_last_axis());
        }
    }

    #[test]
    fn sample_world_properties() {
        let grid = GridSpec::default();
        let params = WorldParams::default();
        let a = sample_world(&mut rng::stream(0, &[]), &params, &grid).unwrap();
        let b = sample_world(&mut rng::stream(0, &[]), &params, &grid).unwrap();
        assert_eq!(a, b);

        let no_cars = WorldParams { cars: (0, 0), ..params.clone() };
        let w = sample_world(&mut rng::stream(3, &[]), &no_cars, &grid).unwrap();
        assert!(w.objects.iter().all(|o| o.class != ObjectClass::Car));

        for seed in 0..100 {
            let w = sample_world(&mut rng::stream(seed, &[9]), &params, &grid).unwrap();
            assert!(w.objects.iter().any(|o| o.class == ObjectClass::Drivable));
            let roads: Vec<&Footprint> = w
                .objects
                .iter()
                .filter(|o| o.class == ObjectClass::Drivable)
                .map(|o| &o.footprint)
                .collect();
            for car in w.objects.iter().filter(|o| o.class == ObjectClass::Car) {
                assert!(roads.iter().any(|r| footprints_intersect(r, &car.footprint)));
                let (x, z) = car.footprint.center;
                assert!(x >= grid.x_min() && x <= grid.x_max() && z >= grid.z_min && z <= grid.z_max());
            }
        }
    }

    /// Separating-axis test for two rectangles.
    fn footprints_intersect(a: &Footprint, b: &Footprint) -> bool {
        let axes = |f: &Footprint| [(f.cos_yaw, f.sin_yaw), (-f.sin_yaw, f.cos_yaw)];
        let project = |f: &Footprint, ax: (f64, f64)| {
            let ps: Vec<f64> = f.corners().iter().map(|&(x, z)| x * ax.0 + z * ax.1).collect();
            (ps.iter().cloned().fold(f64::INFINITY, f64::min), ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        axes(a).iter().chain(axes(b).iter()).all(|&ax| {
            let (a0, a1) = project(a, ax);
            let (b0, b1) = project(b, ax);
            a0 <= b1 && b0 <= a1
        })
    }

    #[test]
    fn rejection_budget_exhaustion() {
        let grid = GridSpec::default();
        let params = WorldParams {
            cars: (400, 400),
            rejection_budget: 50,
            ..WorldParams::default()
        };
        assert!(matches!(
            sample_world(&mut rng::stream(1, &[]), &params, &grid),
            Err(Error::RejectionBudget("car"))
        ));
    }

    #[test]
    fn empty_world_mask_is_fov_wedge() {
        let k = CameraIntrinsics::desk_default();
        let grid = GridSpec::default();
        let mask = visibility_mask(&World::empty(1.5), &k, &grid);
        for zi in 0..grid.z_cells {
            for xi in 0..grid.x_cells {
                let (x, z) = grid.cell_center(zi, xi);
                let u = k.fx * x / z + k.cx;
                let inside = (-0.5..=k.width as f64 - 0.5).contains(&u);
                assert_eq!(mask.get(0, zi, xi) == 1.0, inside);
            }
        }
    }

    #[test]
    fn wider_focal_length_narrows_wedge() {
        let grid = GridSpec::default();
        let k = CameraIntrinsics::desk_default();
        let narrow = CameraIntrinsics { fx: 140.0, ..k };
        let a = visibility_mask(&World::empty(1.5), &k, &grid);
        let b = visibility_mask(&World::empty(1.5), &narrow, &grid);
        assert!(b.count(0) < a.count(0));
        assert!((0..grid.z_cells).all(|z| (0..grid.x_cells).all(|x| b.get(0, z, x) <= a.get(0, z, x))));
    }

    #[test]
    fn cells_behind_tall_box_are_shadowed() {
        let k = CameraIntrinsics::desk_default();
        let grid = GridSpec::default();
        let mut world = World::empty(1.5);
        let fp = Footprint::new((0.0, 6.0), (1.0, 1.0), 0.0);
        world.objects.push(WorldObject::new(ObjectClass::Car, fp, 1.5, [0.5; 3]).unwrap());
        let mask = visibility_mask(&world, &k, &grid);
        let empty = visibility_mask(&World::empty(1.5), &k, &grid);
        for zi in 0..grid.z_cells {
            for xi in 0..grid.x_cells {
                let (x, z) = grid.cell_center(zi, xi);
                // independent oracle: the line through the origin hits the box's
                // near face (z = 5) at x·5/z
                let behind = z > 7.0 && (x * 5.0 / z).abs() <= 1.0;
                let beside = z > 7.0 && (x * 7.0 / z).abs() <= 1.0;
                if behind || beside {
                    assert_eq!(mask.get(0, zi, xi), 0.0, "cell {x},{z}");
                }
                if !fp.contains(x, z) && z < 5.0 {
                    assert_eq!(mask.get(0, zi, xi), empty.get(0, zi, xi));
                }
                if fp.contains(x, z) {
                    assert_eq!(mask.get(0, zi, xi), 1.0);
                }
                assert!(mask.get(0, zi, xi) <= empty.get(0, zi, xi));
            }
        }
        // a short object does not occlude
        let mut low = World::empty(1.5);
        low.objects.push(WorldObject::new(ObjectClass::Car, fp, 0.3, [0.5; 3]).unwrap());
        let low_mask = visibility_mask(&low, &k, &grid);
        assert_eq!(low_mask, empty);
    }

    #[test]
    fn ground_hits_agree_with_gt() {
        let k = CameraIntrinsics::desk_default();
        let grid = GridSpec::default();
        let world = sample_world(&mut rng::stream(5, &[]), &WorldParams::default(), &grid).unwrap();
        let gt = rasterize_bev(&world, &grid);
        let mut checked = 0;
        for v in 0..k.height {
            for u in 0..k.width {
                let Hit::Ground { x, z, .. } = trace(&world, pixel_ray(&k, u, v)) else { continue };
                let Some((zi, xi)) = grid.cell_of(x, z) else { continue };
                let (cx, cz) = grid.cell_center(zi, xi);
                for o in world.objects.iter().filter(|o| o.class.is_ground()) {
                    if o.footprint.contains(x, z) && o.footprint.contains(cx, cz) {
                        assert_eq!(gt.get(o.class.index(), zi, xi), 1.0);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn generation_is_deterministic_and_split_aware() {
        let cfg = SceneConfig::default();
        let a = generate_sample(&cfg, 11, 3, true).unwrap();
        let b = generate_sample(&cfg, 11, 3, true).unwrap();
        assert_eq!(a, b);
        assert!(a.is_labeled() && a.gt_bev.as_ref().unwrap().is_binary());
        let u = generate_sample(&cfg, 11, 3, false).unwrap();
        assert!(u.gt_bev.is_none());
        assert_eq!(u.image, a.image);
        assert_eq!(u.visibility, a.visibility);
    }
}
