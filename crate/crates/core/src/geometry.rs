//! Camera and BEV geometry.
//!
//! Camera frame: `x` right, `y` down, `z` forward; the ground plane is
//! `y = camera height`. Pixel `(u, v)` covers `[u−½, u+½]×[v−½, v+½]`.
//!
//! Angle convention: a positive angle turns the scene counter-clockwise when
//! seen from above, i.e. the BEV point `(x, z) = (1, 0)` goes to `(0, 1)` at
//! 90°. [`rotation_y`] and [`Rotation2D`] share that convention, which is what
//! makes the image homography and the BEV rotation describe the same motion.

use alloc::vec::Vec;

use crate::bev::BevGrid;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat3_inverse(m: &Mat3) -> Result<Mat3> {
    let det = mat3_det(m);
    if !(det.abs() > 1e-12) {
        return Err(Error::Singular(det));
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    let mut out = adj;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= det;
        }
    }
    Ok(out)
}

/// Pinhole intrinsics `K` plus the image size it applies to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidValue(alloc::format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    /// 96×128 image, `fx = fy = 100`, principal point at the image center.
    pub fn desk_default() -> Self {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 63.5,
            cy: 47.5,
            width: 128,
            height: 96,
        }
    }

    pub fn as_matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Horizontal pixel bounds `[−½, W−½]` as tangents `x/z` of the FOV wedge.
    pub fn horizontal_fov_tangents(&self) -> (f64, f64) {
        (
            (-0.5 - self.cx) / self.fx,
            (self.width as f64 - 0.5 - self.cx) / self.fx,
        )
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(k: &CameraIntrinsics, p: [f64; 3]) -> Result<(f64, f64)> {
    if !(p[2] > 0.0) {
        return Err(Error::BehindCamera(p[2]));
    }
    Ok((k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy))
}

/// Rotation about the vertical camera axis by `alpha` radians, counter-clockwise
/// seen from above: `(0, 0, 1)` goes to `(−1, 0, 0)` at `π/2`.
pub fn rotation_y(alpha: f64) -> Mat3 {
    let (s, c) = (math::sin(alpha), math::cos(alpha));
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

/// Planar rotation of BEV metric coordinates `(x, z)`:
/// `[[cos α, −sin α], [sin α, cos α]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation2D {
    pub angle: f64,
}

impl Rotation2D {
    pub fn new(angle: f64) -> Self {
        Rotation2D { angle }
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        [[c, -s], [s, c]]
    }

    pub fn apply(&self, x: f64, z: f64) -> (f64, f64) {
        let m = self.matrix();
        (m[0][0] * x + m[0][1] * z, m[1][0] * x + m[1][1] * z)
    }

    pub fn inverse(&self) -> Self {
        Rotation2D { angle: -self.angle }
    }
}

/// Projective map of the image plane, row-major `h11..h33`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Mat3,
}

impl Homography {
    pub fn new(m: Mat3) -> Result<Self> {
        let det = mat3_det(&m);
        if !(det.abs() > 1e-12) {
            return Err(Error::Singular(det));
        }
        Ok(Homography { m })
    }

    pub fn identity() -> Self {
        Homography { m: IDENTITY3 }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn inverse(&self) -> Self {
        Homography {
            m: mat3_inverse(&self.m).expect("homography is invertible by construction"),
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Homography::new(mat3_mul(&self.m, &other.m))
    }

    pub fn apply(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        apply_homography(self, u, v)
    }
}

/// `u₂ = (h11·u + h12·v + h13) / (h31·u + h32·v + h33)`, likewise for `v₂`.
pub fn apply_homography(h: &Homography, u: f64, v: f64) -> Result<(f64, f64)> {
    let m = &h.m;
    let den = m[2][0] * u + m[2][1] * v + m[2][2];
    if !(den.abs() > 1e-12) {
        return Err(Error::PointAtInfinity(den));
    }
    Ok((
        (m[0][0] * u + m[0][1] * v + m[0][2]) / den,
        (m[1][0] * u + m[1][1] * v + m[1][2]) / den,
    ))
}

/// Image homography of a pure camera rotation: `K · R_y(α) · K⁻¹`.
pub fn homography_for_rotation(k: &CameraIntrinsics, alpha: f64) -> Homography {
    let m = mat3_mul(&mat3_mul(&k.as_matrix(), &rotation_y(alpha)), &k.inverse_matrix());
    Homography::new(m).expect("rotation homography is invertible")
}

/// Fill rule for samples whose source lies outside the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BorderMode {
    #[default]
    Replicate,
    Zero,
    Reflect,
}

impl BorderMode {
    pub const ALL: [BorderMode; 3] = [BorderMode::Zero, BorderMode::Reflect, BorderMode::Replicate];

    pub fn name(&self) -> &'static str {
        match self {
            BorderMode::Replicate => "replicate",
            BorderMode::Zero => "zero",
            BorderMode::Reflect => "reflect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "replicate" => Some(BorderMode::Replicate),
            "zero" => Some(BorderMode::Zero),
            "reflect" => Some(BorderMode::Reflect),
            _ => None,
        }
    }

    /// Maps an out-of-range index into `0..n`, or `None` for a zero fill.
    #[inline]
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            BorderMode::Zero => None,
            BorderMode::Replicate => Some(i.clamp(0, n_i - 1) as usize),
            BorderMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                // mirror about the edge pixels without repeating them
                let period = 2 * (n_i - 1);
                let mut r = i.rem_euclid(period);
                if r >= n_i {
                    r = period - r;
                }
                Some(r as usize)
            }
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample of one `H×W` plane at `(x, y)` with the given border rule.
pub fn sample_bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64, border: BorderMode) -> f64 {
    let x0 = math::floor(x);
    let y0 = math::floor(y);
    let (tx, ty) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let fetch = |ix: isize, iy: isize| match (border.resolve(ix, w), border.resolve(iy, h)) {
        (Some(cx), Some(cy)) => plane[cy * w + cx],
        _ => 0.0,
    };
    let top = lerp(fetch(x0, y0), fetch(x0 + 1, y0), tx);
    let bottom = lerp(fetch(x0, y0 + 1), fetch(x0 + 1, y0 + 1), tx);
    lerp(top, bottom, ty)
}

/// Warps a `C×H×W` image by `h`: output pixel `q` takes the bilinear value at
/// `h⁻¹(q)` (hole-free forward warping). Samples outside the source follow
/// `border`.
pub fn warp_image(img: &Tensor, h: &Homography, border: BorderMode) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: img.numel(),
        });
    }
    let (c, ht, wd) = (shape[0], shape[1], shape[2]);
    let inv = h.inverse();
    let plane = ht * wd;
    let mut out = alloc::vec![0.0; img.numel()];
    for v in 0..ht {
        for u in 0..wd {
            let Ok((x, y)) = inv.apply(u as f64, v as f64) else {
                continue;
            };
            for ch in 0..c {
                out[ch * plane + v * wd + u] =
                    sample_bilinear(&img.data()[ch * plane..(ch + 1) * plane], wd, ht, x, y, border);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// True when `(x, y)` lies within the pixel-center hull `[0, W−1]×[0, H−1]`,
/// i.e. no bilinear tap needs the border rule.
pub fn inside_source(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Rotates a BEV map about the metric origin by inverse warping with
/// nearest-neighbour lookup; cells whose source falls off the grid become 0.
pub fn rotate_bev_map(map: &BevGrid, alpha: f64) -> BevGrid {
    rotate_bev_map_with(map, Rotation2D::new(alpha))
}

pub fn rotate_bev_map_with(map: &BevGrid, rotation: Rotation2D) -> BevGrid {
    let spec = *map.spec();
    let inv = rotation.inverse();
    let mut out = BevGrid::zeros(map.channels(), spec);
    let sources: Vec<Option<(usize, usize)>> = (0..spec.z_cells)
        .flat_map(|zi| (0..spec.x_cells).map(move |xi| (zi, xi)))
        .map(|(zi, xi)| {
            let (x, z) = spec.cell_center(zi, xi);
            let (xs, zs) = inv.apply(x, z);
            spec.cell_of(xs, zs)
        })
        .collect();
    for c in 0..map.channels() {
        for (idx, src) in sources.iter().enumerate() {
            if let Some((zs, xs)) = *src {
                out.set(c, idx / spec.x_cells, idx % spec.x_cells, map.get(c, zs, xs));
            }
        }
    }
    out
}

pub fn hflip_image(img: &Tensor) -> Tensor {
    img.flip_last_axis()
}

pub fn hflip_bev(map: &BevGrid) -> BevGrid {
    BevGrid::new(map.values().flip_last_axis(), *map.spec()).expect("flip preserves shape")
}

/// Intrinsics of the mirrored image: `cx' = (W − 1) − cx`.
pub fn hflip_intrinsics(k: &CameraIntrinsics) -> CameraIntrinsics {
    CameraIntrinsics {
        cx: (k.width as f64 - 1.0) - k.cx,
        ..*k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::GridSpec;

    fn close3(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn rotation_y_examples() {
        assert_eq!(rotation_y(0.0), IDENTITY3);
        let p = mat3_vec(&rotation_y(math::PI / 2.0), [0.0, 0.0, 1.0]);
        assert!((p[0] + 1.0).abs() < 1e-15 && p[1] == 0.0 && p[2].abs() < 1e-15);
        let a = 0.73;
        assert!(close3(&mat3_mul(&rotation_y(a), &rotation_y(-a)), &IDENTITY3, 1e-12));
    }

    #[test]
    fn rotation_homography_examples() {
        let k = CameraIntrinsics::desk_default();
        assert!(close3(homography_for_rotation(&k, 0.0).matrix(), &IDENTITY3, 1e-15));
        let a = math::deg_to_rad(27.0);
        let prod = mat3_mul(
            homography_for_rotation(&k, a).matrix(),
            homography_for_rotation(&k, -a).matrix(),
        );
        assert!(close3(&prod, &IDENTITY3, 1e-10));
    }

    #[test]
    fn apply_homography_examples() {
        assert_eq!(apply_homography(&Homography::identity(), 10.0, 20.0).unwrap(), (10.0, 20.0));
        let mut m = IDENTITY3;
        m[0][2] = 5.0;
        assert_eq!(apply_homography(&Homography::new(m).unwrap(), 0.0, 0.0).unwrap(), (5.0, 0.0));
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(matches!(
            apply_homography(&Homography::new(m).unwrap_or(Homography { m }), 0.0, 3.0),
            Err(Error::PointAtInfinity(_))
        ));
        assert!(Homography::new([[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn intrinsics_matrix_invariants() {
        let k = CameraIntrinsics::desk_default();
        let m = k.as_matrix();
        assert_eq!(mat3_det(&m), k.fx * k.fy);
        assert_eq!((m[1][0], m[2][0], m[2][1]), (0.0, 0.0, 0.0));
        assert!(close3(&mat3_mul(&m, &k.inverse_matrix()), &IDENTITY3, 1e-15));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::desk_default();
        assert_eq!(project(&k, [0.0, 0.0, 1.0]).unwrap(), (k.cx, k.cy));
        let z = 4.0;
        let w = k.width as f64;
        let (u, _) = project(&k, [z * (w - 1.0 - k.cx) / k.fx, 0.0, z]).unwrap();
        assert_eq!(u, w - 1.0);
        let (u1, _) = project(&k, [1.3, 0.2, 2.0]).unwrap();
        let (u2, _) = project(&k, [1.3, 0.2, 4.0]).unwrap();
        assert!(((u1 - k.cx) / 2.0 - (u2 - k.cx)).abs() < 1e-12);
        assert!(matches!(project(&k, [0.0, 0.0, 0.0]), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn border_resolution() {
        assert_eq!(BorderMode::Zero.resolve(-1, 5), None);
        assert_eq!(BorderMode::Replicate.resolve(-3, 5), Some(0));
        assert_eq!(BorderMode::Replicate.resolve(7, 5), Some(4));
        assert_eq!(BorderMode::Reflect.resolve(-1, 5), Some(1));
        assert_eq!(BorderMode::Reflect.resolve(-2, 5), Some(2));
        assert_eq!(BorderMode::Reflect.resolve(5, 5), Some(3));
        assert_eq!(BorderMode::Reflect.resolve(9, 5), Some(1));
        assert_eq!(BorderMode::Reflect.resolve(3, 5), Some(3));
        assert_eq!(BorderMode::default(), BorderMode::Replicate);
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let img = Tensor::from_fn(&[3, 9, 11], |i| ((i * 37) % 101) as f64 / 101.0);
        for mode in BorderMode::ALL {
            assert_eq!(warp_image(&img, &Homography::identity(), mode).unwrap(), img);
        }
    }

    #[test]
    fn constant_image_stays_constant_under_replicate() {
        let img = Tensor::full(&[2, 96, 128], 0.3721);
        let h = homography_for_rotation(&CameraIntrinsics::desk_default(), math::deg_to_rad(31.0));
        assert_eq!(warp_image(&img, &h, BorderMode::Replicate).unwrap(), img);
    }

    #[test]
    fn bev_rotation_examples() {
        let r = Rotation2D::new(math::PI / 2.0).matrix();
        assert!((r[0][0]).abs() < 1e-15 && r[0][1] == -1.0 && r[1][0] == 1.0 && r[1][1].abs() < 1e-15);
        let (x, z) = Rotation2D::new(math::PI / 2.0).apply(1.0, 0.0);
        assert!(x.abs() < 1e-15 && (z - 1.0).abs() < 1e-15);

        let spec = GridSpec::default();
        let mut map = BevGrid::zeros(2, spec);
        map.set(0, 10, 20, 1.0);
        map.set(1, 40, 3, 1.0);
        assert_eq!(rotate_bev_map(&map, 0.0), map);

        let mut single = BevGrid::zeros(1, spec);
        let (zi, xi) = spec.cell_of(0.0, 4.0).unwrap();
        single.set(0, zi, xi, 1.0);
        let rotated = rotate_bev_map(&single, math::deg_to_rad(30.0));
        let occupied: Vec<(f64, f64)> = (0..spec.z_cells)
            .flat_map(|z| (0..spec.x_cells).map(move |x| (z, x)))
            .filter(|&(z, x)| rotated.get(0, z, x) == 1.0)
            .map(|(z, x)| spec.cell_center(z, x))
            .collect();
        assert!(!occupied.is_empty());
        for (x, z) in occupied {
            assert!((x + 2.0).abs() <= spec.cell_size && (z - 3.464).abs() <= spec.cell_size, "{x} {z}");
        }
    }

    #[test]
    fn flip_examples() {
        let img = Tensor::from_fn(&[3, 4, 7], |i| i as f64);
        assert_eq!(hflip_image(&hflip_image(&img)), img);
        let k = CameraIntrinsics::desk_default();
        assert_eq!(hflip_intrinsics(&k).cx, k.cx);
        let k2 = CameraIntrinsics { cx: 50.25, ..k };
        assert_eq!(hflip_intrinsics(&k2).cx, 127.0 - 50.25);
        assert_eq!(hflip_intrinsics(&hflip_intrinsics(&k2)), k2);

        let p = [1.7, 1.5, 6.0];
        let (u, v) = project(&k2, p).unwrap();
        let (um, vm) = project(&hflip_intrinsics(&k2), [-p[0], p[1], p[2]]).unwrap();
        assert!((um - (127.0 - u)).abs() < 1e-12);
        assert_eq!(v, vm);
    }
}
