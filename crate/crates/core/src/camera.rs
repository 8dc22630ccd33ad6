//! Pinhole cameras, ray generation, projection and differentiable sampling.
//!
//! Camera frame convention: x right, y down, z forward. Poses map camera
//! coordinates to world coordinates. Pixel centres sit on integer coordinates.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Depth below which a point counts as behind the camera plane.
pub const Z_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the image downsampled by `scale`.
    pub fn scaled(&self, scale: usize) -> Result<Self> {
        if scale == 0 || !self.width.is_multiple_of(scale) || !self.height.is_multiple_of(scale) {
            return Err(Error::InvalidInput(format!(
                "scale {scale} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let s = scale as f64;
        Ok(Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / scale,
            height: self.height / scale,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates.
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll so that image
    /// rows run against it.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            let alt = if forward.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !ortho.is_finite() || ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper rotation (orthonormality error {ortho:.3e}, det {det:.6})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite camera translation".into()));
        }
        Ok(())
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix4(m: &[f64; 16]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

/// One ray per pixel of a (possibly downsampled) image, row-major.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    pub height: usize,
    pub width: usize,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn origins_tensor<T: Scalar>(&self) -> Tensor<T> {
        vec3_tensor(&self.origins)
    }

    pub fn directions_tensor<T: Scalar>(&self) -> Tensor<T> {
        vec3_tensor(&self.directions)
    }
}

fn vec3_tensor<T: Scalar>(v: &[Vector3<f64>]) -> Tensor<T> {
    let data = v.iter().flat_map(|p| [p.x, p.y, p.z]).map(T::lit).collect();
    Tensor::new(&[v.len(), 3], data)
}

/// Unit world-space direction through pixel `(u, v)` of the image
/// downsampled by `scale`.
pub fn ray_direction(intrinsics: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64, scale: usize) -> Vector3<f64> {
    let s = scale as f64;
    let d = Vector3::new(
        (u - intrinsics.cx / s) / (intrinsics.fx / s),
        (v - intrinsics.cy / s) / (intrinsics.fy / s),
        1.0,
    );
    (pose.rotation * d).normalize()
}

pub fn generate_rays(intrinsics: &CameraIntrinsics, pose: &CameraPose, scale: usize) -> Result<RayBundle> {
    let scaled = intrinsics.scaled(scale)?;
    let (h, w) = (scaled.height, scaled.width);
    let mut directions = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            directions.push(ray_direction(intrinsics, pose, u as f64, v as f64, scale));
        }
    }
    Ok(RayBundle {
        origins: vec![pose.translation; h * w],
        directions,
        height: h,
        width: w,
    })
}

/// `o + t d`
pub fn point_at(origin: &Vector3<f64>, direction: &Vector3<f64>, t: f64) -> Vector3<f64> {
    origin + direction * t
}

/// Pixel coordinates of a world point and whether it lands inside the image
/// in front of the camera.
pub fn project_point(x: &Vector3<f64>, intrinsics: &CameraIntrinsics, pose: &CameraPose) -> (Vector2<f64>, bool) {
    let p = pose.world_to_camera(x);
    let z = p.z.max(Z_EPS);
    let uv = Vector2::new(intrinsics.fx * p.x / z + intrinsics.cx, intrinsics.fy * p.y / z + intrinsics.cy);
    let inside = p.z > Z_EPS
        && uv.x >= 0.0
        && uv.x < intrinsics.width as f64
        && uv.y >= 0.0
        && uv.y < intrinsics.height as f64;
    (uv, inside)
}

/// Differentiable `x = o + t d` for a `[N, 1]` depth column.
pub fn rays_at<T: Scalar>(t: &Var<T>, rays: &RayBundle) -> Var<T> {
    assert_eq!(t.value().len(), rays.len(), "one depth per ray");
    let origins = rays.origins_tensor::<T>();
    let dirs = rays.directions_tensor::<T>();
    let mut out = origins.clone();
    for ((o, d), &tv) in out
        .data_mut()
        .chunks_exact_mut(3)
        .zip(dirs.data().chunks_exact(3))
        .zip(t.data())
    {
        for k in 0..3 {
            o[k] += tv * d[k];
        }
    }
    Var::from_op(
        out,
        vec![t.clone()],
        Box::new(move |g, _, p| {
            let d = g
                .data()
                .chunks_exact(3)
                .zip(dirs.data().chunks_exact(3))
                .map(|(g, d)| g[0] * d[0] + g[1] * d[1] + g[2] * d[2])
                .collect();
            vec![Some(Tensor::new(p[0].shape(), d))]
        }),
    )
}

/// Differentiable projection of `[N, 3]` world points into `camera`.
///
/// Returns `[N, 2]` pixel coordinates and a per-point flag that is false for
/// points at or behind the camera plane; those rows carry no gradient.
pub fn project_points<T: Scalar>(points: &Var<T>, camera: &Camera) -> (Var<T>, Vec<bool>) {
    assert_eq!(points.cols(), 3, "points must be [N, 3]");
    let r = camera.pose.rotation.transpose();
    let o = camera.pose.translation;
    let k = camera.intrinsics;
    let n = points.rows();
    let mut uv = Vec::with_capacity(2 * n);
    let mut cam = Vec::with_capacity(3 * n);
    let mut front = Vec::with_capacity(n);
    for p in points.data().chunks_exact(3) {
        let x = Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64()) - o;
        let c = r * x;
        let ok = c.z > Z_EPS;
        let z = c.z.max(Z_EPS);
        uv.push(T::lit(k.fx * c.x / z + k.cx));
        uv.push(T::lit(k.fy * c.y / z + k.cy));
        cam.extend_from_slice(&[c.x, c.y, z]);
        front.push(ok);
    }
    let mask = front.clone();
    let out = Var::from_op(
        Tensor::new(&[n, 2], uv),
        vec![points.clone()],
        Box::new(move |g, _, p| {
            let mut d = vec![T::zero(); 3 * n];
            for i in 0..n {
                if !front[i] {
                    continue;
                }
                let (x, y, z) = (cam[3 * i], cam[3 * i + 1], cam[3 * i + 2]);
                let gu = g.data()[2 * i].as_f64();
                let gv = g.data()[2 * i + 1].as_f64();
                // d(u, v)/d(camera point), then back through the rotation.
                let gc = Vector3::new(gu * k.fx / z, gv * k.fy / z, -(gu * k.fx * x + gv * k.fy * y) / (z * z));
                let gw = r.transpose() * gc;
                d[3 * i] = T::lit(gw.x);
                d[3 * i + 1] = T::lit(gw.y);
                d[3 * i + 2] = T::lit(gw.z);
            }
            vec![Some(Tensor::new(p[0].shape(), d))]
        }),
    );
    (out, mask)
}

struct Tap {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn tap(u: f64, v: f64, w: usize, h: usize, valid: bool) -> Option<Tap> {
    if !valid || !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    Some(Tap {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: u - x0,
        fy: v - y0,
    })
}

/// Differentiable bilinear lookup of `[N, 2]` pixel coordinates `(u, v)` in
/// an `[H, W, C]` map.
///
/// Queries outside `[0, W-1] × [0, H-1]`, or flagged invalid, read zeros.
/// Gradients flow to both the map and the coordinates.
pub fn bilinear_sample<T: Scalar>(map: &Var<T>, coords: &Var<T>, valid: Option<&[bool]>) -> Var<T> {
    let shape = map.shape();
    assert_eq!(shape.len(), 3, "map must be [H, W, C]");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert_eq!(coords.cols(), 2, "coords must be [N, 2]");
    let n = coords.rows();
    if let Some(m) = valid {
        assert_eq!(m.len(), n, "mask length");
    }
    let valid: Vec<bool> = valid.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; n]);
    let src = map.data();
    let mut out = vec![T::zero(); n * c];
    let corner = |x: isize, y: isize| -> Option<usize> {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| (y as usize * w + x as usize) * c)
    };
    for i in 0..n {
        let uv = &coords.data()[2 * i..2 * i + 2];
        let Some(tp) = tap(uv[0].as_f64(), uv[1].as_f64(), w, h, valid[i]) else {
            continue;
        };
        let o = &mut out[i * c..(i + 1) * c];
        for (dx, dy, wt) in [
            (0, 0, (1.0 - tp.fx) * (1.0 - tp.fy)),
            (1, 0, tp.fx * (1.0 - tp.fy)),
            (0, 1, (1.0 - tp.fx) * tp.fy),
            (1, 1, tp.fx * tp.fy),
        ] {
            if let Some(s) = corner(tp.x0 + dx, tp.y0 + dy) {
                let wt = T::lit(wt);
                for (ov, &sv) in o.iter_mut().zip(&src[s..s + c]) {
                    *ov += wt * sv;
                }
            }
        }
    }
    Var::from_op(
        Tensor::new(&[n, c], out),
        vec![map.clone(), coords.clone()],
        Box::new(move |g, _, p| {
            let (map, coords) = (&p[0], &p[1]);
            let gd = g.data();
            let src = map.data();
            let corner = |x: isize, y: isize| -> Option<usize> {
                (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| (y as usize * w + x as usize) * c)
            };
            let mut gmap = map.requires_grad().then(|| vec![T::zero(); h * w * c]);
            let mut gcoord = coords.requires_grad().then(|| vec![T::zero(); 2 * n]);
            for i in 0..n {
                let uv = &coords.data()[2 * i..2 * i + 2];
                let Some(tp) = tap(uv[0].as_f64(), uv[1].as_f64(), w, h, valid[i]) else {
                    continue;
                };
                let gi = &gd[i * c..(i + 1) * c];
                let idx = [
                    corner(tp.x0, tp.y0),
                    corner(tp.x0 + 1, tp.y0),
                    corner(tp.x0, tp.y0 + 1),
                    corner(tp.x0 + 1, tp.y0 + 1),
                ];
                if let Some(gm) = gmap.as_mut() {
                    let wts = [
                        (1.0 - tp.fx) * (1.0 - tp.fy),
                        tp.fx * (1.0 - tp.fy),
                        (1.0 - tp.fx) * tp.fy,
                        tp.fx * tp.fy,
                    ];
                    for (s, wt) in idx.iter().zip(wts) {
                        if let Some(s) = *s {
                            let wt = T::lit(wt);
                            for (m, &gv) in gm[s..s + c].iter_mut().zip(gi) {
                                *m += wt * gv;
                            }
                        }
                    }
                }
                if let Some(gc) = gcoord.as_mut() {
                    let dot = |s: Option<usize>| -> T {
                        s.map(|s| src[s..s + c].iter().zip(gi).map(|(&a, &b)| a * b).sum())
                            .unwrap_or_else(T::zero)
                    };
                    let (v00, v10, v01, v11) = (dot(idx[0]), dot(idx[1]), dot(idx[2]), dot(idx[3]));
                    let fx = T::lit(tp.fx);
                    let fy = T::lit(tp.fy);
                    let one = T::one();
                    gc[2 * i] = (one - fy) * (v10 - v00) + fy * (v11 - v01);
                    gc[2 * i + 1] = (one - fx) * (v01 - v00) + fx * (v11 - v10);
                }
            }
            vec![
                gmap.map(|d| Tensor::new(map.shape(), d)),
                gcoord.map(|d| Tensor::new(coords.shape(), d)),
            ]
        }),
    )
}

/// Upsamples an `[H, W, C]` grid to `[2H, 2W, C]` bilinearly, mapping fine
/// pixel `(u, v)` to coarse coordinate `(u/2, v/2)` with edge replication.
/// This matches how intrinsics scale between marching levels.
pub fn upsample_bilinear2<T: Scalar>(x: &Var<T>) -> Var<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 3, "expected [H, W, C]");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (h2, w2) = (2 * h, 2 * w);
    // Each fine pixel reads at most 4 coarse pixels with weights in {1, .5, .25}.
    let taps = move |fy: usize, fx: usize| -> [(usize, f64); 4] {
        let (y0, y1, wy) = if fy.is_multiple_of(2) { (fy / 2, fy / 2, 0.0) } else { (fy / 2, (fy / 2 + 1).min(h - 1), 0.5) };
        let (x0, x1, wx) = if fx.is_multiple_of(2) { (fx / 2, fx / 2, 0.0) } else { (fx / 2, (fx / 2 + 1).min(w - 1), 0.5) };
        [
            (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
            (y0 * w + x1, (1.0 - wy) * wx),
            (y1 * w + x0, wy * (1.0 - wx)),
            (y1 * w + x1, wy * wx),
        ]
    };
    let src = x.data();
    let mut out = vec![T::zero(); h2 * w2 * c];
    for fy in 0..h2 {
        for fx in 0..w2 {
            let o = (fy * w2 + fx) * c;
            for (s, wt) in taps(fy, fx) {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::lit(wt);
                for ch in 0..c {
                    out[o + ch] += wt * src[s * c + ch];
                }
            }
        }
    }
    Var::from_op(
        Tensor::new(&[h2, w2, c], out),
        vec![x.clone()],
        Box::new(move |g, _, p| {
            let gd = g.data();
            let mut d = vec![T::zero(); h * w * c];
            for fy in 0..h2 {
                for fx in 0..w2 {
                    let o = (fy * w2 + fx) * c;
                    for (s, wt) in taps(fy, fx) {
                        if wt == 0.0 {
                            continue;
                        }
                        let wt = T::lit(wt);
                        for ch in 0..c {
                            d[s * c + ch] += wt * gd[o + ch];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(p[0].shape(), d))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 16.0,
            width: w,
            height: h,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let eye = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        CameraPose::look_at(eye, target, Vector3::y())
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let rays = generate_rays(&intr(32, 32), &CameraPose::identity(), 1).unwrap();
        let i = 16 * 32 + 16;
        assert_eq!(rays.origins[i], Vector3::zeros());
        assert!((rays.directions[i] - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn one_focal_length_offset_is_45_degrees() {
        let d = ray_direction(&intr(32, 32), &CameraPose::identity(), 116.0, 16.0, 1);
        let expect = Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert!((d - expect).norm() < 1e-12);
    }

    #[test]
    fn non_divisible_scale_is_rejected() {
        assert!(generate_rays(&intr(30, 32), &CameraPose::identity(), 4).is_err());
    }

    #[test]
    fn point_at_examples() {
        let o = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(point_at(&Vector3::zeros(), &Vector3::z(), 0.0), Vector3::zeros());
        assert_eq!(point_at(&o, &Vector3::z(), 2.0), Vector3::new(1.0, 2.0, 5.0));
        let d = Vector3::new(0.6, 0.0, 0.8);
        let lhs = point_at(&o, &d, 0.7) + point_at(&o, &d, 1.9) - o;
        assert!((lhs - point_at(&o, &d, 2.6)).norm() < 1e-12);
    }

    #[test]
    fn project_examples() {
        let k = intr(32, 32);
        let (uv, ok) = project_point(&Vector3::new(0.0, 0.0, 1.0), &k, &CameraPose::identity());
        assert!(ok);
        assert_eq!(uv, Vector2::new(16.0, 16.0));
        let (_, ok) = project_point(&Vector3::new(0.0, 0.0, -1.0), &k, &CameraPose::identity());
        assert!(!ok);
    }

    #[test]
    fn ray_projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics {
            fx: 70.0,
            fy: 75.0,
            cx: 31.5,
            cy: 30.0,
            width: 64,
            height: 64,
        };
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let scale = [1usize, 2, 4][rng.gen_range(0..3)];
            let rays = generate_rays(&k, &pose, scale).unwrap();
            let u = rng.gen_range(0..rays.width);
            let v = rng.gen_range(0..rays.height);
            let i = v * rays.width + u;
            assert!((rays.directions[i].norm() - 1.0).abs() < 1e-6);
            let x = point_at(&rays.origins[i], &rays.directions[i], rng.gen_range(0.1..5.0));
            let (uv, ok) = project_point(&x, &k, &pose);
            assert!(ok || u == 0 || v == 0, "{uv:?} at pixel ({u}, {v})");
            let s = scale as f64;
            assert!((uv.x / s - u as f64).abs() < 1e-5 && (uv.y / s - v as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn bilinear_examples() {
        let map = Var::constant(Tensor::<f64>::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]));
        let q = Var::constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 0.5, 0.5, 1.5, 0.0]));
        let out = bilinear_sample(&map, &q, None);
        assert_eq!(out.data(), &[0.0, 1.5, 0.0]);
        let masked = bilinear_sample(&map, &q, Some(&[false, true, true]));
        assert_eq!(masked.data(), &[0.0, 1.5, 0.0]);
    }

    #[test]
    fn upsample_keeps_even_pixels_and_averages_odd() {
        let x = Var::constant(Tensor::<f64>::new(&[2, 2, 1], vec![0.0, 2.0, 4.0, 6.0]));
        let y = upsample_bilinear2(&x);
        assert_eq!(y.shape(), &[4, 4, 1]);
        assert_eq!(
            y.data(),
            &[0.0, 1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 5.0, 6.0, 6.0, 4.0, 5.0, 6.0, 6.0]
        );
    }
}
