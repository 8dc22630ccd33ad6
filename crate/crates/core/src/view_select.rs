//! Working-set selection: three source views and their barycentric weights.
//!
//! Camera centres are flattened to 2D (stereographically for hemispherical
//! rigs, orthographically for roughly planar captures), triangulated with a
//! Delaunay triangulation, and the triangle closest to the projected target
//! position provides the working set.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Max point-to-plane distance, as a fraction of the constellation diameter,
/// below which cameras count as fronto-parallel.
pub const PLANE_TOLERANCE: f64 = 0.05;

/// Incircle tolerance on normalised coordinates.
pub const INCIRCLE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewConfiguration {
    Hemisphere,
    FrontoParallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkingSet {
    pub view_ids: [usize; 3],
    pub weights: [f64; 3],
}

impl WorkingSet {
    /// Re-indexes view ids through `map` (e.g. constellation slot to dataset view).
    pub fn remap(&self, map: &[usize]) -> Self {
        Self {
            view_ids: self.view_ids.map(|i| map[i]),
            weights: self.weights,
        }
    }
}

#[derive(Clone, Debug)]
struct PlaneFit {
    centroid: Vector3<f64>,
    normal: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

fn fit_plane(points: &[Vector3<f64>]) -> PlaneFit {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let col = |i: usize| eig.eigenvectors.column(order[i]).into_owned();
    let e1 = col(0);
    let normal = col(2);
    let e2 = normal.cross(&e1);
    PlaneFit { centroid, normal, e1, e2 }
}

fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max((a - b).norm());
        }
    }
    d
}

/// Largest distance from a camera centre to the least-squares plane.
pub fn plane_residual(centers: &[Vector3<f64>]) -> f64 {
    let fit = fit_plane(centers);
    centers
        .iter()
        .map(|p| (p - fit.centroid).dot(&fit.normal).abs())
        .fold(0.0, f64::max)
}

pub fn classify_configuration(centers: &[Vector3<f64>]) -> Result<ViewConfiguration> {
    if centers.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "configuration needs at least 4 views, got {}",
            centers.len()
        )));
    }
    let residual = plane_residual(centers);
    if residual < PLANE_TOLERANCE * diameter(centers) {
        Ok(ViewConfiguration::FrontoParallel)
    } else {
        Ok(ViewConfiguration::Hemisphere)
    }
}

#[derive(Clone, Copy, Debug)]
struct SphereFit {
    center: Vector3<f64>,
    radius: f64,
}

/// Algebraic least-squares sphere; `None` when the points are (nearly) coplanar.
fn fit_sphere(points: &[Vector3<f64>]) -> Option<SphereFit> {
    if points.len() < 4 {
        return None;
    }
    // Work relative to the centroid and scale for conditioning.
    let c0 = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let scale = points.iter().map(|p| (p - c0).norm()).fold(0.0, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let n = points.len();
    let mut a = DMatrix::zeros(n, 4);
    let mut b = DMatrix::zeros(n, 1);
    for (i, p) in points.iter().enumerate() {
        let q = (p - c0) / scale;
        a[(i, 0)] = 2.0 * q.x;
        a[(i, 1)] = 2.0 * q.y;
        a[(i, 2)] = 2.0 * q.z;
        a[(i, 3)] = 1.0;
        b[(i, 0)] = q.norm_squared();
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin / smax < 1e-6 {
        return None;
    }
    let x = svd.solve(&b, 1e-12).ok()?;
    let center = Vector3::new(x[0], x[1], x[2]);
    let r2 = x[3] + center.norm_squared();
    if !(r2 > 0.0) || !r2.is_finite() {
        return None;
    }
    Some(SphereFit {
        center: c0 + center * scale,
        radius: r2.sqrt() * scale,
    })
}

/// Maps 3D camera positions to the triangulation plane.
#[derive(Clone, Debug)]
pub enum PlaneProjector {
    Orthographic {
        origin: Vector3<f64>,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
    /// Projection from `pole` onto the plane tangent to the fitted sphere at
    /// the antipode of the pole.
    Stereographic {
        pole: Vector3<f64>,
        tangent: Vector3<f64>,
        axis: Vector3<f64>,
        radius: f64,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
}

fn orthonormal_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - axis * helper.dot(axis)).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}

impl PlaneProjector {
    pub fn new(centers: &[Vector3<f64>], configuration: ViewConfiguration) -> Self {
        match configuration {
            ViewConfiguration::FrontoParallel => Self::orthographic(centers),
            ViewConfiguration::Hemisphere => match fit_sphere(centers) {
                Some(fit) => {
                    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
                    let dir = mean - fit.center;
                    let axis = if dir.norm() > 1e-12 { dir.normalize() } else { Vector3::y() };
                    let (e1, e2) = orthonormal_basis(&axis);
                    Self::Stereographic {
                        pole: fit.center - axis * fit.radius,
                        tangent: fit.center + axis * fit.radius,
                        axis,
                        radius: fit.radius,
                        e1,
                        e2,
                    }
                }
                None => {
                    log::warn!("sphere fit is degenerate for hemisphere views; using orthographic projection");
                    Self::orthographic(centers)
                }
            },
        }
    }

    fn orthographic(centers: &[Vector3<f64>]) -> Self {
        let fit = fit_plane(centers);
        Self::Orthographic {
            origin: fit.centroid,
            e1: fit.e1,
            e2: fit.e2,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        match self {
            Self::Orthographic { origin, e1, e2 } => {
                let d = p - origin;
                Vector2::new(d.dot(e1), d.dot(e2))
            }
            Self::Stereographic {
                pole,
                tangent,
                axis,
                radius,
                e1,
                e2,
            } => {
                let ray = p - pole;
                let along = ray.dot(axis).max(1e-12 * radius);
                let q = pole + ray * (2.0 * radius / along) - tangent;
                Vector2::new(q.dot(e1), q.dot(e2))
            }
        }
    }
}

pub fn project_to_plane(centers: &[Vector3<f64>], configuration: ViewConfiguration) -> Vec<Vector2<f64>> {
    let projector = PlaneProjector::new(centers, configuration);
    centers.iter().map(|p| projector.project(p)).collect()
}

fn orient(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Positive when `d` lies inside the circumcircle of the counter-clockwise
/// triangle `(a, b, c)`.
pub fn incircle(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, d: &Vector2<f64>) -> f64 {
    let (adx, ady) = (a.x - d.x, a.y - d.y);
    let (bdx, bdy) = (b.x - d.x, b.y - d.y);
    let (cdx, cdy) = (c.x - d.x, c.y - d.y);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Delaunay triangulation; triangles are counter-clockwise index triples.
///
/// Points are swept in lexicographic order to build an initial
/// triangulation, then edges are flipped until every edge is locally
/// Delaunay. Exact duplicates are ignored.
pub fn triangulate(points: &[Vector2<f64>]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 3 {
        return Err(Error::InvalidInput("triangulation needs at least 3 points".into()));
    }
    // Normalise to the unit box so the tolerances are scale free.
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max().max(1e-300);
    let pts: Vec<Vector2<f64>> = points.iter().map(|p| (p - lo) / extent).collect();

    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x).then(pts[a].y.total_cmp(&pts[b].y)));
    order.dedup_by(|a, b| (pts[*a] - pts[*b]).norm() < 1e-15);

    let orient_eps = 1e-12;
    // First point that is not collinear with the leading ones.
    let first = order[0];
    let second = order[1];
    let Some(k) = (2..order.len()).find(|&k| orient(&pts[first], &pts[second], &pts[order[k]]).abs() > orient_eps)
    else {
        return Err(Error::InvalidInput("all points are collinear".into()));
    };
    // order[0..k] are collinear and sorted along their line.
    let apex = order[k];
    let chain = &order[..k];
    let mut tris: Vec<[usize; 3]> = Vec::new();
    let ccw = |a: usize, b: usize, c: usize| -> [usize; 3] {
        if orient(&pts[a], &pts[b], &pts[c]) > 0.0 {
            [a, b, c]
        } else {
            [a, c, b]
        }
    };
    for w in chain.windows(2) {
        tris.push(ccw(w[0], w[1], apex));
    }
    // Counter-clockwise hull of the fan.
    let mut hull: Vec<usize> = if orient(&pts[chain[0]], &pts[chain[k - 1]], &pts[apex]) > 0.0 {
        let mut h = chain.to_vec();
        h.push(apex);
        h
    } else {
        let mut h = vec![apex];
        h.extend(chain.iter().rev());
        h.rotate_left(1);
        h
    };

    for &p in &order[k + 1..] {
        let n = hull.len();
        let visible: Vec<bool> = (0..n)
            .map(|i| orient(&pts[hull[i]], &pts[hull[(i + 1) % n]], &pts[p]) < -orient_eps)
            .collect();
        if !visible.iter().any(|&v| v) {
            // Lexicographically last point sits on the hull boundary only if it is
            // collinear with a hull edge; attach it to that edge's neighbours.
            continue;
        }
        for i in 0..n {
            if visible[i] {
                let (a, b) = (hull[i], hull[(i + 1) % n]);
                tris.push([b, a, p]);
            }
        }
        // Visible edges form one contiguous run; replace its interior with p.
        let start = (0..n).find(|&i| visible[i] && !visible[(i + n - 1) % n]).unwrap_or(0);
        let mut len = 0;
        while len < n && visible[(start + len) % n] {
            len += 1;
        }
        let mut next = Vec::with_capacity(n + 1);
        // Keep hull[start], drop the interior vertices, keep hull[start + len].
        next.push(hull[start]);
        next.push(p);
        let mut i = (start + len) % n;
        while i != start {
            next.push(hull[i]);
            i = (i + 1) % n;
        }
        hull = next;
    }

    lawson_flip(&pts, &mut tris);
    Ok(tris)
}

fn lawson_flip(pts: &[Vector2<f64>], tris: &mut [[usize; 3]]) {
    let max_passes = 10 * tris.len() + 10;
    for _ in 0..max_passes {
        let mut edges: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for (ti, t) in tris.iter().enumerate() {
            for e in 0..3 {
                edges.insert((t[e], t[(e + 1) % 3]), (ti, t[(e + 2) % 3]));
            }
        }
        let mut flipped = false;
        let mut touched = vec![false; tris.len()];
        for ti in 0..tris.len() {
            if touched[ti] {
                continue;
            }
            for e in 0..3 {
                let t = tris[ti];
                let (a, b, c) = (t[e], t[(e + 1) % 3], t[(e + 2) % 3]);
                let Some(&(tj, d)) = edges.get(&(b, a)) else {
                    continue;
                };
                if touched[tj] || tj == ti {
                    continue;
                }
                if incircle(&pts[a], &pts[b], &pts[c], &pts[d]) > INCIRCLE_EPS {
                    tris[ti] = [a, d, c];
                    tris[tj] = [d, b, c];
                    touched[ti] = true;
                    touched[tj] = true;
                    flipped = true;
                    break;
                }
            }
        }
        if !flipped {
            return;
        }
    }
    log::warn!("edge flipping did not converge");
}

/// Barycentric coordinates of `p` with respect to triangle `(a, b, c)`.
pub fn barycentric(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> [f64; 3] {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let det = v0.x * v1.y - v1.x * v0.y;
    let l1 = (v2.x * v1.y - v1.x * v2.y) / det;
    let l2 = (v0.x * v2.y - v2.x * v0.y) / det;
    [1.0 - l1 - l2, l1, l2]
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * s)).norm()
}

/// Distance from `p` to a triangle; zero inside.
pub fn triangle_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    let bary = barycentric(p, a, b, c);
    if bary.iter().all(|&l| l >= -1e-12) {
        return 0.0;
    }
    segment_distance(p, a, b)
        .min(segment_distance(p, b, c))
        .min(segment_distance(p, c, a))
}

fn normalized_weights(raw: [f64; 3]) -> [f64; 3] {
    let clamped = raw.map(|w| if w.is_finite() { w.max(0.0) } else { 0.0 });
    let s: f64 = clamped.iter().sum();
    if s > 0.0 {
        clamped.map(|w| w / s)
    } else {
        [1.0 / 3.0; 3]
    }
}

/// Triangulated camera constellation.
#[derive(Clone, Debug)]
pub struct ViewConstellation {
    pub centers: Vec<Vector3<f64>>,
    pub configuration: ViewConfiguration,
    pub projector: PlaneProjector,
    pub projected: Vec<Vector2<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl ViewConstellation {
    /// Classifies, projects and triangulates. Three views form a single
    /// (exactly planar) triangle.
    pub fn new(centers: &[Vector3<f64>]) -> Result<Self> {
        let configuration = match centers.len() {
            0..=2 => {
                return Err(Error::InvalidInput(format!(
                    "a working set needs at least 3 views, got {}",
                    centers.len()
                )))
            }
            3 => ViewConfiguration::FrontoParallel,
            _ => classify_configuration(centers)?,
        };
        Self::with_configuration(centers, configuration)
    }

    pub fn with_configuration(centers: &[Vector3<f64>], configuration: ViewConfiguration) -> Result<Self> {
        let projector = PlaneProjector::new(centers, configuration);
        let projected: Vec<_> = centers.iter().map(|p| projector.project(p)).collect();
        let triangles = triangulate(&projected)?;
        Ok(Self {
            centers: centers.to_vec(),
            configuration,
            projector,
            projected,
            triangles,
        })
    }
}

/// Working set from the triangle containing (or nearest to) the projected
/// target. Ties go to the lowest triangle index.
pub fn select_working_set(constellation: &ViewConstellation, target_center: &Vector3<f64>) -> WorkingSet {
    let p = constellation.projector.project(target_center);
    let pts = &constellation.projected;
    let mut best = (f64::INFINITY, 0usize);
    for (i, t) in constellation.triangles.iter().enumerate() {
        let d = triangle_distance(&p, &pts[t[0]], &pts[t[1]], &pts[t[2]]);
        if d < best.0 {
            best = (d, i);
            if d == 0.0 {
                break;
            }
        }
    }
    let t = constellation.triangles[best.1];
    let bary = barycentric(&p, &pts[t[0]], &pts[t[1]], &pts[t[2]]);
    WorkingSet {
        view_ids: t,
        weights: normalized_weights(bary),
    }
}

/// Three nearest camera centres, weighted by inverse distance.
pub fn select_proximity(centers: &[Vector3<f64>], target_center: &Vector3<f64>) -> Result<WorkingSet> {
    if centers.len() < 3 {
        return Err(Error::InvalidInput("proximity selection needs at least 3 views".into()));
    }
    let mut by_dist: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| ((c - target_center).norm(), i))
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let near = [by_dist[0], by_dist[1], by_dist[2]];
    let view_ids = near.map(|(_, i)| i);
    let weights = if near[0].0 <= 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        normalized_weights(near.map(|(d, _)| 1.0 / d))
    };
    Ok(WorkingSet { view_ids, weights })
}

/// How a working set is chosen for a target pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    #[default]
    Delaunay,
    Proximity,
}

/// Selects a working set among `candidates` (given as `(view id, centre)`);
/// returned ids are the caller's view ids.
pub fn select_views(
    candidates: &[(usize, Vector3<f64>)],
    target_center: &Vector3<f64>,
    mode: ViewSelection,
) -> Result<WorkingSet> {
    let ids: Vec<usize> = candidates.iter().map(|c| c.0).collect();
    let centers: Vec<Vector3<f64>> = candidates.iter().map(|c| c.1).collect();
    let ws = match mode {
        ViewSelection::Delaunay => select_working_set(&ViewConstellation::new(&centers)?, target_center),
        ViewSelection::Proximity => select_proximity(&centers, target_center)?,
    };
    Ok(ws.remap(&ids))
}
