//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.tsv        id<TAB>split, split ∈ {labeled, unlabeled}
//! <root>/scene.cfg           scene/grid/world keys used to generate it
//! <root>/<id>/image.ppm      binary P6, 8-bit
//! <root>/<id>/intrinsics.txt fx 0 cx 0 fy cy 0 0 1 (row-major K), then width height
//! <root>/<id>/bev.bin        labeled only: "C Z X cell_size\n" + C·Z·X bytes in {0,1}
//! <root>/<id>/visibility.bin "Z X\n" + Z·X bytes in {0,1}
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bevseg_core::bev::{BevGrid, GridSpec};
use bevseg_core::geometry::CameraIntrinsics;
use bevseg_core::synthworld::{generate_sample, labeled_count, sample_id, Sample, SceneConfig};
use bevseg_core::tensor::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const SCENE: &str = "scene.cfg";

/// `Sample` split label as written to the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(Split::Labeled),
            "unlabeled" => Some(Split::Unlabeled),
            _ => None,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3×H×W` image with values in `[0, 1]` as an 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(Error::format(path, format!("expected a 3×H×W image, got {:?}", image.shape())));
    };
    if *c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let rgb: Vec<u8> = (0..plane).flat_map(|i| [to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])]).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&rgb, *w as u32, *h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PPM into a `3×H×W` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb: RgbImage = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let plane = w * h;
    Ok(Tensor::from_fn(&[3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f64 / 255.0))
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    let m = k.as_matrix();
    let nums: Vec<String> = m.iter().flatten().map(f64::to_string).collect();
    format!("{}\n{} {}\n", nums.join(" "), k.width, k.height)
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != 11 {
        return Err(Error::format(path, format!("expected 11 numbers, found {}", tokens.len())));
    }
    let bad = |t: &str| Error::format(path, format!("not a number: `{t}`"));
    let m: Vec<f64> = tokens[..9].iter().map(|t| t.parse().map_err(|_| bad(t))).collect::<Result<_>>()?;
    let w: usize = tokens[9].parse().map_err(|_| bad(tokens[9]))?;
    let h: usize = tokens[10].parse().map_err(|_| bad(tokens[10]))?;
    if m[1] != 0.0 || m[3] != 0.0 || m[6] != 0.0 || m[7] != 0.0 || m[8] != 1.0 {
        return Err(Error::format(path, "K must be [[fx 0 cx] [0 fy cy] [0 0 1]]"));
    }
    Ok(CameraIntrinsics::new(m[0], m[4], m[2], m[5], w, h)?)
}

fn bytes_of(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| u8::from(v != 0.0)).collect()
}

/// Splits `"header\n" + payload`.
fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<&'a str>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header is not text"))?;
    Ok((header.split_whitespace().collect(), &bytes[nl + 1..]))
}

fn payload_tensor(shape: &[usize], payload: &[u8], path: &Path) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if payload.len() != n || payload.iter().any(|&b| b > 1) {
        return Err(Error::format(path, format!("expected {n} bytes in {{0, 1}}, found {}", payload.len())));
    }
    Ok(Tensor::new(shape.to_vec(), payload.iter().map(|&b| b as f64).collect())?)
}

pub fn encode_bev(grid: &BevGrid) -> Vec<u8> {
    let s = grid.spec();
    let mut out = format!("{} {} {} {}\n", grid.channels(), s.z_cells, s.x_cells, s.cell_size).into_bytes();
    out.extend(bytes_of(grid.values()));
    out
}

/// Decodes `bev.bin`; the header must agree with `spec`, which also supplies
/// the grid origin.
pub fn decode_bev(bytes: &[u8], spec: &GridSpec, path: &Path) -> Result<BevGrid> {
    let (h, payload) = split_header(bytes, path)?;
    let bad = || Error::format(path, "header must be `C Z X cell_size`");
    let [c, z, x, cell] = h[..] else { return Err(bad()) };
    let (c, z, x): (usize, usize, usize) = (c.parse().map_err(|_| bad())?, z.parse().map_err(|_| bad())?, x.parse().map_err(|_| bad())?);
    let cell: f64 = cell.parse().map_err(|_| bad())?;
    if z != spec.z_cells || x != spec.x_cells || cell != spec.cell_size {
        return Err(Error::format(path, format!("grid {z}x{x} @ {cell} m does not match the scene's {spec:?}")));
    }
    Ok(BevGrid::new(payload_tensor(&[c, z, x], payload, path)?, *spec)?)
}

pub fn encode_visibility(mask: &BevGrid) -> Vec<u8> {
    let s = mask.spec();
    let mut out = format!("{} {}\n", s.z_cells, s.x_cells).into_bytes();
    out.extend(bytes_of(mask.values()));
    out
}

pub fn decode_visibility(bytes: &[u8], spec: &GridSpec, path: &Path) -> Result<BevGrid> {
    let (h, payload) = split_header(bytes, path)?;
    let bad = || Error::format(path, "header must be `Z X`");
    let [z, x] = h[..] else { return Err(bad()) };
    let (z, x): (usize, usize) = (z.parse().map_err(|_| bad())?, x.parse().map_err(|_| bad())?);
    if z != spec.z_cells || x != spec.x_cells {
        return Err(Error::format(path, format!("grid {z}x{x} does not match the scene's {spec:?}")));
    }
    Ok(BevGrid::new(payload_tensor(&[1, z, x], payload, path)?, *spec)?)
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join("image.ppm"), &sample.image)?;
    write_file(&dir.join("intrinsics.txt"), format_intrinsics(&sample.intrinsics).as_bytes())?;
    if let Some(gt) = &sample.gt_bev {
        write_file(&dir.join("bev.bin"), &encode_bev(gt))?;
    }
    write_file(&dir.join("visibility.bin"), &encode_visibility(&sample.visibility))
}

/// Reads one sample directory; labels are loaded iff `labeled`.
pub fn read_sample(dir: &Path, id: &str, grid: &GridSpec, labeled: bool) -> Result<Sample> {
    let kpath = dir.join("intrinsics.txt");
    let ktext = fs::read_to_string(&kpath).map_err(|e| Error::io(&kpath, e))?;
    let intrinsics = parse_intrinsics(&ktext, &kpath)?;
    let ipath = dir.join("image.ppm");
    let image = read_ppm(&ipath)?;
    if image.shape() != [3, intrinsics.height, intrinsics.width] {
        return Err(Error::format(&ipath, format!("image {:?} disagrees with intrinsics", image.shape())));
    }
    let gt_bev = if labeled {
        let p = dir.join("bev.bin");
        Some(decode_bev(&read_file(&p)?, grid, &p)?)
    } else {
        None
    };
    let vpath = dir.join("visibility.bin");
    let visibility = decode_visibility(&read_file(&vpath)?, grid, &vpath)?;
    Ok(Sample {
        id: id.to_string(),
        image,
        intrinsics,
        gt_bev,
        visibility,
    })
}

/// An in-memory dataset with the scene settings it was generated from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene: SceneConfig,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scene settings stored alongside a dataset (defaults where absent).
pub fn read_scene(root: &Path) -> Result<SceneConfig> {
    let mut cfg = RunConfig::default();
    let path = root.join(SCENE);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if !key.is_empty() && !key.starts_with('#') && !RunConfig::SCENE_SECTIONS.iter().any(|s| key.starts_with(s)) {
                return Err(Error::format(&path, format!("unexpected key `{key}`")));
            }
        }
        cfg.apply_text(&text, &path)?;
    }
    Ok(cfg.scene)
}

/// Manifest rows `(id, split)`.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, Split)>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line == "id\tsplit" || line.is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&path, format!("line {}: expected `id<TAB>split`", n + 1)))?;
        let split = Split::parse(split).ok_or_else(|| Error::format(&path, format!("line {}: unknown split `{split}`", n + 1)))?;
        rows.push((id.to_string(), split));
    }
    Ok(rows)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let scene = read_scene(root)?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (id, split) in read_manifest(root)? {
        let s = read_sample(&root.join(&id), &id, &scene.grid, split == Split::Labeled)?;
        match split {
            Split::Labeled => labeled.push(s),
            Split::Unlabeled => unlabeled.push(s),
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        scene,
        labeled,
        unlabeled,
    })
}

/// Generates `n` samples, the first `round(n · fraction)` (at least one)
/// labeled, and writes them with a manifest and the scene settings.
pub fn gen_dataset(cfg: &RunConfig, n: usize, fraction: f64, seed: u64, out: &Path) -> Result<Vec<(String, Split)>> {
    if n == 0 {
        return Err(Error::Usage("--n must be positive".into()));
    }
    let n_labeled = labeled_count(n, fraction).map_err(|e| Error::Usage(e.to_string()))?;
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(SCENE), cfg.scene_text().as_bytes())?;
    let mut manifest = String::from("id\tsplit\n");
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let split = if i < n_labeled { Split::Labeled } else { Split::Unlabeled };
        let sample = generate_sample(&cfg.scene, seed, i, split == Split::Labeled)?;
        write_sample(&out.join(&sample.id), &sample)?;
        manifest.push_str(&format!("{}\t{}\n", sample.id, split.name()));
        rows.push((sample_id(i), split));
    }
    write_file(&out.join(MANIFEST), manifest.as_bytes())?;
    Ok(rows)
}
