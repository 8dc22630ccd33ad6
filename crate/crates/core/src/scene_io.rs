//! Datasets on disk, synthetic toy scenes and render artifacts.
//!
//! Native layout:
//!
//! ```text
//! scene/
//!   cameras.json      {"near", "far", "views": [{"file", "fx", "fy", "cx", "cy", "pose"}]}
//!   images/*.png
//!   depth_gt/*.pfm    (toy scenes only)
//! ```
//!
//! `pose` is the row-major 4×4 camera-to-world matrix; `file` is relative to
//! the scene directory.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::camera::{ray_direction, Camera, CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::ray_marcher::SceneBounds;
use crate::renderer::RenderOutput;
use crate::view_select::ViewConfiguration;

/// Images are padded so both sides are multiples of this.
pub const SIZE_MULTIPLE: usize = 8;
/// Rotation tolerance when loading poses.
pub const POSE_TOLERANCE: f64 = 1e-4;
/// Every `TEST_EVERY`-th view (starting at 0) is held out by the automatic split.
pub const TEST_EVERY: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn auto(index: usize) -> Self {
        if index.is_multiple_of(TEST_EVERY) {
            Split::Test
        } else {
            Split::Train
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct View {
    /// Image path relative to the scene directory.
    pub file: String,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub camera: Camera,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub near: f64,
    pub far: f64,
    pub bounds: SceneBounds,
}

impl SceneDataset {
    /// Validates the views and derives the normalisation transform.
    pub fn new(views: Vec<View>, near: f64, far: f64) -> Result<Self> {
        if views.len() < 4 {
            return Err(Error::InvalidInput(format!("a scene needs at least 4 views, got {}", views.len())));
        }
        if !(near.is_finite() && far.is_finite() && 0.0 <= near && near < far) {
            return Err(Error::InvalidInput(format!("invalid depth bounds near={near} far={far}")));
        }
        let shape = views[0].image.shape().to_vec();
        for v in &views {
            if v.image.shape() != shape.as_slice() {
                return Err(Error::InvalidInput(format!(
                    "view {} has size {:?}, expected {:?}",
                    v.file,
                    v.image.shape(),
                    shape
                )));
            }
            let k = &v.camera.intrinsics;
            if k.height != shape[0] || k.width != shape[1] {
                return Err(Error::InvalidInput(format!("intrinsics of {} do not match its image", v.file)));
            }
            k.validate()?;
            v.camera.pose.validate(POSE_TOLERANCE)?;
        }
        let cams: Vec<Camera> = views.iter().map(|v| v.camera).collect();
        let bounds = SceneBounds::from_cameras(&cams, near, far);
        Ok(Self {
            views,
            near,
            far,
            bounds,
        })
    }

    pub fn height(&self) -> usize {
        self.views[0].image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.views[0].image.shape()[1]
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    near: f64,
    far: f64,
    views: Vec<CameraEntry>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    file: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    pose: Vec<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Pads an `[H, W, C]` image with a reflected border so both sides are
/// multiples of `multiple`. Returns the image and the `(left, top)` offsets.
pub fn pad_reflect<T: Scalar>(img: &Tensor<T>, multiple: usize) -> (Tensor<T>, usize, usize) {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(multiple) * multiple - h, w.div_ceil(multiple) * multiple - w);
    if ph == 0 && pw == 0 {
        return (img.clone(), 0, 0);
    }
    let (top, left) = (ph / 2, pw / 2);
    let (nh, nw) = (h + ph, w + pw);
    let mut out = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        let sy = reflect(y as isize - top as isize, h);
        for x in 0..nw {
            let sx = reflect(x as isize - left as isize, w);
            out.extend_from_slice(&img.data()[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    (Tensor::new(&[nh, nw, c], out), left, top)
}

fn rgb8_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn tensor_to_rgb8<T: Scalar>(img: &Tensor<T>) -> RgbImage {
    let s = img.shape();
    let (h, w) = (s[0], s[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let o = (y as usize * w + x as usize) * 3;
        let px = &img.data()[o..o + 3];
        Rgb([quantize(px[0].as_f64()), quantize(px[1].as_f64()), quantize(px[2].as_f64())])
    })
}

fn load_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?;
    Ok(img.to_rgb8())
}

/// Reads a native scene, padding images to multiples of 8 (shifting the
/// principal point accordingly). Views are split automatically.
/// Loads a scene directory in either the native layout (`cameras.json`) or the
/// NeRF-synthetic layout (`transforms_{train,test}.json`).
pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    if dir.join("cameras.json").is_file() {
        load_native(dir)
    } else if dir.join("transforms_train.json").is_file() {
        load_nerf_synthetic_scene(dir)
    } else {
        Err(Error::load(dir, "no cameras.json or transforms_train.json"))
    }
}

pub fn load_native(dir: &Path) -> Result<SceneDataset> {
    let file: CamerasFile = read_json(&dir.join("cameras.json"))?;
    let mut views = Vec::with_capacity(file.views.len());
    for (i, e) in file.views.iter().enumerate() {
        let path = dir.join(&e.file);
        let pose: [f64; 16] = e
            .pose
            .as_slice()
            .try_into()
            .map_err(|_| Error::load(dir.join("cameras.json"), format!("view {i}: pose needs 16 values")))?;
        let pose = CameraPose::from_matrix4(&pose);
        pose.validate(POSE_TOLERANCE)
            .map_err(|err| Error::load(dir.join("cameras.json"), format!("view {i}: {err}")))?;
        let raw = rgb8_to_tensor(&load_png_rgb(&path)?);
        let (image, left, top) = pad_reflect(&raw, SIZE_MULTIPLE);
        let intrinsics = CameraIntrinsics {
            fx: e.fx,
            fy: e.fy,
            cx: e.cx + left as f64,
            cy: e.cy + top as f64,
            width: image.shape()[1],
            height: image.shape()[0],
        };
        views.push(View {
            file: e.file.clone(),
            image,
            camera: Camera::new(intrinsics, pose),
            split: Split::auto(i),
        });
    }
    SceneDataset::new(views, file.near, file.far).map_err(|e| Error::load(dir, e))
}

/// Writes `cameras.json` and the images of `dataset` under `dir`.
pub fn save_native(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    let file = CamerasFile {
        near: dataset.near,
        far: dataset.far,
        views: dataset
            .views
            .iter()
            .map(|v| {
                let k = &v.camera.intrinsics;
                CameraEntry {
                    file: v.file.clone(),
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                    pose: v.camera.pose.to_matrix4().to_vec(),
                }
            })
            .collect(),
    };
    for v in &dataset.views {
        let path = dir.join(&v.file);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        tensor_to_rgb8(&v.image)
            .save(&path)
            .map_err(|e| Error::load(&path, e))?;
    }
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::load(dir.join("cameras.json"), e))?;
    write_file(&dir.join("cameras.json"), json.as_bytes())
}

#[derive(Deserialize)]
struct NerfTransforms {
    camera_angle_x: f64,
    frames: Vec<NerfFrame>,
}

#[derive(Deserialize)]
struct NerfFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

pub const NERF_NEAR: f64 = 2.0;
pub const NERF_FAR: f64 = 6.0;

/// Focal length in pixels from the horizontal field of view.
pub fn focal_from_fov(width: usize, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

/// NeRF-synthetic camera (x right, y up, z backward) to the internal
/// convention (y down, z forward).
pub fn pose_from_nerf(m: &[[f64; 4]; 4]) -> CameraPose {
    let r = Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]);
    CameraPose {
        rotation: r * Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
        translation: Vector3::new(m[0][3], m[1][3], m[2][3]),
    }
}

/// Composites RGBA over a white background.
pub fn composite_over_white(img: &image::RgbaImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for px in img.pixels() {
        let a = px[3] as f32 / 255.0;
        for c in 0..3 {
            data.push(px[c] as f32 / 255.0 * a + (1.0 - a));
        }
    }
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Loads `transforms_{split}.json` of a NeRF-synthetic scene. Views from the
/// `train` file are marked as training views, all others as test views.
pub fn load_nerf_synthetic(dir: &Path, split: &str) -> Result<SceneDataset> {
    let json = dir.join(format!("transforms_{split}.json"));
    let t: NerfTransforms = read_json(&json)?;
    let mark = if split == "train" { Split::Train } else { Split::Test };
    let views = nerf_views(dir, &t, mark)?;
    SceneDataset::new(views, NERF_NEAR, NERF_FAR).map_err(|e| Error::load(&json, e))
}

/// Training and test views of a NeRF-synthetic scene in one dataset.
pub fn load_nerf_synthetic_scene(dir: &Path) -> Result<SceneDataset> {
    let mut views = Vec::new();
    for (split, mark) in [("train", Split::Train), ("test", Split::Test)] {
        let t: NerfTransforms = read_json(&dir.join(format!("transforms_{split}.json")))?;
        views.extend(nerf_views(dir, &t, mark)?);
    }
    SceneDataset::new(views, NERF_NEAR, NERF_FAR).map_err(|e| Error::load(dir, e))
}

fn nerf_views(dir: &Path, t: &NerfTransforms, split: Split) -> Result<Vec<View>> {
    let mut views = Vec::with_capacity(t.frames.len());
    for f in &t.frames {
        let rel = if Path::new(&f.file_path).extension().is_some() {
            f.file_path.clone()
        } else {
            format!("{}.png", f.file_path)
        };
        let path = dir.join(&rel);
        let img = image::open(&path).map_err(|e| Error::load(&path, e))?.to_rgba8();
        let (raw_w, raw_h) = (img.width() as usize, img.height() as usize);
        let (image, left, top) = pad_reflect(&composite_over_white(&img), SIZE_MULTIPLE);
        let focal = focal_from_fov(raw_w, t.camera_angle_x);
        let intrinsics = CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: raw_w as f64 / 2.0 + left as f64,
            cy: raw_h as f64 / 2.0 + top as f64,
            width: image.shape()[1],
            height: image.shape()[0],
        };
        views.push(View {
            file: rel,
            image,
            camera: Camera::new(intrinsics, pose_from_nerf(&f.transform_matrix)),
            split,
        });
    }
    Ok(views)
}

/// Writes a single-channel PFM (little endian, rows bottom to top).
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), width * height, "pfm size");
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &bytes)
}

/// Reads a single-channel PFM into top-to-bottom rows; returns `(width, height, data)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::load(path, m);
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim().to_string())
    };
    if next(&mut r)? != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let dims = next(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(w)), Some(Ok(h)), None) = (it.next(), it.next(), it.next()) else {
        return Err(bad("malformed size line"));
    };
    let scale: f64 = next(&mut r)?.parse().map_err(|_| bad("malformed scale line"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (y, x) = (h - 1 - i / w, i % w);
        data[y * w + x] = v;
    }
    Ok((w, h, data))
}

/// `{name}_color.png`, `{name}_depth.pfm`, `{name}_conf.png`; returns the paths.
pub fn write_render<T: Scalar>(output: &RenderOutput<T>, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (output.height(), output.width());
    let color = dir.join(format!("{name}_color.png"));
    tensor_to_rgb8(output.color.value())
        .save(&color)
        .map_err(|e| Error::load(&color, e))?;
    let depth = dir.join(format!("{name}_depth.pfm"));
    let d: Vec<f32> = output.depth.data().iter().map(|v| v.as_f64() as f32).collect();
    write_pfm(&depth, w, h, &d)?;
    let conf = dir.join(format!("{name}_conf.png"));
    let q = output.confidence.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(q[y as usize * w + x as usize].as_f64())]))
        .save(&conf)
        .map_err(|e| Error::load(&conf, e))?;
    Ok(vec![color, depth, conf])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    Sphere,
    Plane,
    TwoSpheres,
}

impl std::str::FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Primitive::Sphere),
            "plane" => Ok(Primitive::Plane),
            "two-spheres" => Ok(Primitive::TwoSpheres),
            _ => Err(Error::InvalidInput(format!("unknown toy scene {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    pub primitive: Primitive,
    pub cell_size: f64,
    pub num_views: usize,
    pub configuration: ViewConfiguration,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            primitive: Primitive::Sphere,
            cell_size: 0.5,
            num_views: 20,
            configuration: ViewConfiguration::Hemisphere,
            width: 64,
            height: 64,
            seed: 0,
        }
    }
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_views < 4 {
            return Err(Error::InvalidInput(format!("toy scenes need at least 4 views, got {}", self.num_views)));
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(SIZE_MULTIPLE) || !self.height.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::InvalidInput(format!(
                "toy resolution {}x{} must be a positive multiple of {SIZE_MULTIPLE}",
                self.width, self.height
            )));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::InvalidInput("checker cell size must be positive".into()));
        }
        Ok(())
    }
}

/// Camera distance from the origin for toy rigs.
pub const TOY_RADIUS: f64 = 3.0;
pub const BACKGROUND: [f64; 3] = [0.2, 0.2, 0.2];
/// Focal length as a multiple of the image width.
pub const TOY_FOCAL: f64 = 1.1;
/// Grid spacing of fronto-parallel rigs.
pub const TOY_GRID_SPACING: f64 = 0.5;
/// Half extent of the square in the plane scene.
pub const TOY_PLANE_HALF: f64 = 1.5;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Square `|(x - center)·e| <= half` for both in-plane axes.
    Square { center: Vector3<f64>, normal: Vector3<f64>, half: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    colors: [[f64; 3]; 2],
}

/// Closest positive hit distance of a unit-direction ray with a sphere.
pub fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = o - center;
    let b = oc.dot(d);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 0.0)
}

fn in_plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&a).normalize();
    (e1, n.cross(&e1))
}

impl Shape {
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => ray_sphere(o, d, &center, radius),
            Shape::Square { center, normal, half } => {
                let den = d.dot(&normal);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (center - o).dot(&normal) / den;
                if t <= 0.0 {
                    return None;
                }
                let p = o + d * t - center;
                let (e1, e2) = in_plane_axes(&normal);
                (p.dot(&e1).abs() <= half && p.dot(&e2).abs() <= half).then_some(t)
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => center.norm() + radius,
            Shape::Square { center, half, .. } => center.norm() + half * std::f64::consts::SQRT_2,
        }
    }
}

fn checker(p: &Vector3<f64>, cell: f64) -> usize {
    let s: i64 = p.iter().map(|v| (v / cell).floor() as i64).sum();
    s.rem_euclid(2) as usize
}

fn scene_objects(primitive: Primitive, configuration: ViewConfiguration) -> Vec<Object> {
    match primitive {
        Primitive::Sphere => vec![Object {
            shape: Shape::Sphere {
                center: Vector3::zeros(),
                radius: 1.0,
            },
            colors: [[0.85, 0.3, 0.25], [0.95, 0.9, 0.75]],
        }],
        Primitive::Plane => {
            // Facing the rig.
            let normal = match configuration {
                ViewConfiguration::Hemisphere => Vector3::y(),
                ViewConfiguration::FrontoParallel => -Vector3::z(),
            };
            vec![Object {
                shape: Shape::Square {
                    center: Vector3::zeros(),
                    normal,
                    half: TOY_PLANE_HALF,
                },
                colors: [[0.3, 0.7, 0.35], [0.9, 0.9, 0.9]],
            }]
        }
        Primitive::TwoSpheres => vec![
            Object {
                shape: Shape::Sphere {
                    center: Vector3::new(-0.45, 0.0, 0.25),
                    radius: 0.6,
                },
                colors: [[0.85, 0.3, 0.25], [0.95, 0.9, 0.75]],
            },
            Object {
                shape: Shape::Sphere {
                    center: Vector3::new(0.5, 0.1, -0.35),
                    radius: 0.45,
                },
                colors: [[0.2, 0.45, 0.85], [0.9, 0.95, 0.6]],
            },
        ],
    }
}

/// Closest hit over all objects: `(distance, colour)`.
fn trace(objects: &[Object], cell: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
    objects
        .iter()
        .filter_map(|obj| obj.shape.hit(o, d).map(|t| (t, obj)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(t, obj)| (t, obj.colors[checker(&(o + d * t), cell)]))
}

/// Camera poses of a toy rig. Hemisphere rigs lie on a Fibonacci spiral over
/// the upper (+y) hemisphere; fronto-parallel rigs on a grid in `z = -3`.
pub fn toy_poses(configuration: ViewConfiguration, n: usize, seed: u64) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match configuration {
        ViewConfiguration::Hemisphere => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let offset = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..n)
                .map(|i| {
                    let y = 1.0 - (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let phi = offset + golden * i as f64;
                    let eye = Vector3::new(r * phi.cos(), y, r * phi.sin()) * TOY_RADIUS;
                    CameraPose::look_at(eye, Vector3::zeros(), Vector3::y())
                })
                .collect()
        }
        ViewConfiguration::FrontoParallel => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            (0..n)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    let jitter = Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0);
                    let x = (c as f64 - (cols - 1) as f64 / 2.0) * TOY_GRID_SPACING;
                    let y = (r as f64 - (rows - 1) as f64 / 2.0) * TOY_GRID_SPACING;
                    CameraPose {
                        rotation: Matrix3::identity(),
                        translation: Vector3::new(x, y, -TOY_RADIUS) + jitter,
                    }
                })
                .collect()
        }
    }
}

/// Side of the supersampling grid used for toy images.
pub const TOY_SUPERSAMPLING: usize = 3;

/// A generated scene with per-view ground-truth depth (`[H, W]`, distance along the ray).
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub dataset: SceneDataset,
    pub depth: Vec<Tensor<f32>>,
}

/// Ray-traces a toy scene. Colours are supersampled and quantised to 8 bits
/// (exactly what a reload from disk produces); depth is traced through pixel
/// centres with misses set to `far`. Writes the scene when `out_dir` is given.
pub fn generate_toy_scene(spec: &ToySceneSpec, out_dir: Option<&Path>) -> Result<ToyScene> {
    spec.validate()?;
    let objects = scene_objects(spec.primitive, spec.configuration);
    let extent = objects.iter().map(|o| o.shape.bounding_radius()).fold(0.0, f64::max);
    let (near, far) = ((TOY_RADIUS - extent).max(0.05), TOY_RADIUS + extent);
    let (w, h) = (spec.width, spec.height);
    let f = TOY_FOCAL * w as f64;
    let intrinsics = CameraIntrinsics {
        fx: f,
        fy: f,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        width: w,
        height: h,
    };
    let ss = TOY_SUPERSAMPLING;
    let mut views = Vec::with_capacity(spec.num_views);
    let mut depths = Vec::with_capacity(spec.num_views);
    for (i, pose) in toy_poses(spec.configuration, spec.num_views, spec.seed).into_iter().enumerate() {
        let o = pose.translation;
        let mut img = RgbImage::new(w as u32, h as u32);
        let mut depth = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = ray_direction(&intrinsics, &pose, u as f64 + du, v as f64 + dv, 1);
                        let c = trace(&objects, spec.cell_size, &o, &d).map_or(BACKGROUND, |h| h.1);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (ss * ss) as f64;
                img.put_pixel(u as u32, v as u32, Rgb(acc.map(|c| quantize(c / n))));
                let d = ray_direction(&intrinsics, &pose, u as f64, v as f64, 1);
                let t = trace(&objects, spec.cell_size, &o, &d).map_or(far, |h| h.0.min(far));
                depth.push(t as f32);
            }
        }
        views.push(View {
            file: format!("images/{i:03}.png"),
            image: rgb8_to_tensor(&img),
            camera: Camera::new(intrinsics, pose),
            split: Split::auto(i),
        });
        depths.push(Tensor::new(&[h, w], depth));
    }
    let dataset = SceneDataset::new(views, near, far)?;
    if let Some(dir) = out_dir {
        save_native(&dataset, dir)?;
        for (i, d) in depths.iter().enumerate() {
            write_pfm(&dir.join(format!("depth_gt/{i:03}.pfm")), w, h, d.data())?;
        }
    }
    Ok(ToyScene { dataset, depth: depths })
}

/// Writes raw bytes, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

/// Appends one line to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!((-2..6).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn padding_shifts_principal_point_content() {
        let img = Tensor::<f32>::from_f64(&[6, 5, 3], &(0..90).map(|i| i as f64).collect::<Vec<_>>());
        let (p, left, top) = pad_reflect(&img, 8);
        assert_eq!(p.shape(), &[8, 8, 3]);
        assert_eq!((left, top), (1, 1));
        // Original pixel (0, 0) now sits at (left, top).
        assert_eq!(&p.data()[(top * 8 + left) * 3..][..3], &img.data()[..3]);
    }

    #[test]
    fn nerf_focal_and_axes() {
        assert!((focal_from_fov(800, 0.6911112) - 1111.111).abs() < 1e-3);
        let id = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let p = pose_from_nerf(&id);
        assert_eq!(p.rotation, Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)));
    }

    #[test]
    fn pure_alpha_is_white() {
        let img = image::RgbaImage::from_pixel(2, 2, image::Rgba([10, 200, 30, 0]));
        assert!(composite_over_white(&img).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sphere_center_depth_and_background() {
        let spec = ToySceneSpec {
            num_views: 4,
            width: 16,
            height: 16,
            ..Default::default()
        };
        let scene = generate_toy_scene(&spec, None).unwrap();
        assert_eq!((scene.dataset.near, scene.dataset.far), (2.0, 4.0));
        for (v, d) in scene.dataset.views.iter().zip(&scene.depth) {
            assert!((d.data()[8 * 16 + 8] - 2.0).abs() < 1e-6);
            // Corners miss the sphere.
            assert_eq!(d.data()[0], 4.0);
            assert!(v.image.data()[..3].iter().all(|&c| (c - 51.0 / 255.0).abs() < 1e-6));
        }
    }

    #[test]
    fn toy_spec_rejects_few_views() {
        let spec = ToySceneSpec {
            num_views: 3,
            ..Default::default()
        };
        assert!(generate_toy_scene(&spec, None).is_err());
    }
}
