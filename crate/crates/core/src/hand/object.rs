//! Rigid planar objects: circles and convex polygons with a fixed-size
//! boundary point cloud.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvError, Result};
use crate::geom::{segment_closest_pair, Pose2, Segment, Vec2};
use crate::scalar::Real;

/// Points in every object's boundary cloud.
pub const CLOUD_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind<T> {
    Circle {
        radius: T,
    },
    /// Counter-clockwise vertices about the area centroid, object frame.
    Polygon {
        vertices: Vec<Vec2<T>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape<T> {
    pub id: String,
    pub category: String,
    pub kind: ShapeKind<T>,
    /// Object-frame boundary samples.
    pub boundary_cloud: Vec<Vec2<T>>,
    pub pose: Pose2<T>,
}

/// Closest approach between a segment and an object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proximity<T> {
    /// Signed distance from the segment to the boundary; negative inside.
    pub distance: T,
    pub on_segment: Vec2<T>,
    pub on_object: Vec2<T>,
    /// Unit normal at `on_object`, pointing out of the object.
    pub normal: Vec2<T>,
}

impl<T: Real> ObjectShape<T> {
    pub fn circle(id: &str, category: &str, radius: T) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(EnvError::Contract(format!(
                "circle radius {radius} must be positive"
            )));
        }
        let cloud = (0..CLOUD_SIZE)
            .map(|k| {
                let a = T::lit(2.0 * std::f64::consts::PI * k as f64 / CLOUD_SIZE as f64);
                Vec2::from_angle(a) * radius
            })
            .collect();
        Ok(Self {
            id: id.to_string(),
            category: category.to_string(),
            kind: ShapeKind::Circle { radius },
            boundary_cloud: cloud,
            pose: Pose2::identity(),
        })
    }

    /// Convex polygon from counter-clockwise vertices; recentred on its area
    /// centroid.
    pub fn polygon(id: &str, category: &str, vertices: &[Vec2<T>]) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(EnvError::Contract(
                "polygon needs at least 3 vertices".into(),
            ));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).cross(c - b) <= T::zero() {
                return Err(EnvError::Contract(format!(
                    "polygon {id} is not strictly convex counter-clockwise at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        let centroid = polygon_centroid(vertices);
        let verts: Vec<Vec2<T>> = vertices.iter().map(|&v| v - centroid).collect();
        let cloud = perimeter_samples(&verts, CLOUD_SIZE);
        Ok(Self {
            id: id.to_string(),
            category: category.to_string(),
            kind: ShapeKind::Polygon { vertices: verts },
            boundary_cloud: cloud,
            pose: Pose2::identity(),
        })
    }

    pub fn com(&self) -> Vec2<T> {
        self.pose.translation()
    }

    /// Largest distance from the centroid to the boundary.
    pub fn bounding_radius(&self) -> T {
        match &self.kind {
            ShapeKind::Circle { radius } => *radius,
            ShapeKind::Polygon { vertices } => vertices
                .iter()
                .map(|v| v.norm())
                .fold(T::zero(), |a, b| a.max(b)),
        }
    }

    /// Width along the world x axis at the current orientation.
    pub fn horizontal_extent(&self) -> T {
        match &self.kind {
            ShapeKind::Circle { radius } => *radius + *radius,
            ShapeKind::Polygon { vertices } => {
                let xs: Vec<T> = vertices
                    .iter()
                    .map(|v| v.rotate(self.pose.theta).x)
                    .collect();
                let lo = xs.iter().copied().fold(T::infinity(), T::min);
                let hi = xs.iter().copied().fold(T::neg_infinity(), T::max);
                hi - lo
            }
        }
    }

    /// Height of the centroid above the lowest boundary point.
    pub fn rest_height(&self) -> T {
        match &self.kind {
            ShapeKind::Circle { radius } => *radius,
            ShapeKind::Polygon { vertices } => -vertices
                .iter()
                .map(|v| v.rotate(self.pose.theta).y)
                .fold(T::infinity(), T::min),
        }
    }

    /// Places the object on the table line `y = 0` at horizontal position `x`.
    pub fn rest_on_table(&mut self, x: T) {
        self.pose.x = x;
        self.pose.y = self.rest_height();
    }

    pub fn world_vertices(&self) -> Vec<Vec2<T>> {
        match &self.kind {
            ShapeKind::Circle { .. } => Vec::new(),
            ShapeKind::Polygon { vertices } => {
                vertices.iter().map(|&v| self.pose.apply(v)).collect()
            }
        }
    }

    pub fn world_cloud(&self) -> Vec<Vec2<T>> {
        self.boundary_cloud
            .iter()
            .map(|&p| self.pose.apply(p))
            .collect()
    }

    /// Signed distance from a world point to the boundary.
    pub fn signed_distance(&self, p: Vec2<T>) -> T {
        let seg = Segment::new(p, p);
        self.segment_proximity(&seg).distance
    }

    /// Closest approach, or deepest penetration, of a world segment.
    pub fn segment_proximity(&self, seg: &Segment<T>) -> Proximity<T> {
        match &self.kind {
            ShapeKind::Circle { radius } => {
                let c = self.com();
                let p = seg.closest_point(c);
                let d = p - c;
                let dist = d.norm();
                let normal = d
                    .normalized()
                    .or_else(|| (seg.b - seg.a).perp().normalized())
                    .unwrap_or(Vec2::new(T::zero(), T::one()));
                Proximity {
                    distance: dist - *radius,
                    on_segment: p,
                    on_object: c + normal * *radius,
                    normal,
                }
            }
            ShapeKind::Polygon { .. } => self.polygon_proximity(seg),
        }
    }

    fn polygon_proximity(&self, seg: &Segment<T>) -> Proximity<T> {
        let verts = self.world_vertices();
        let n = verts.len();
        // Outward edge normals and offsets: sd_e(p) = n_e . (p - v_e).
        let planes: Vec<(Vec2<T>, Vec2<T>)> = (0..n)
            .map(|i| {
                let a = verts[i];
                let b = verts[(i + 1) % n];
                let e = b - a;
                let nrm = Vec2::new(e.y, -e.x).normalized().unwrap_or(Vec2::zero());
                (nrm, a)
            })
            .collect();
        // Along the segment each sd_e is affine in u: c0 + c1 u.
        let d = seg.b - seg.a;
        let coeffs: Vec<(T, T)> = planes
            .iter()
            .map(|(nrm, v)| (nrm.dot(seg.a - *v), nrm.dot(d)))
            .collect();
        let eval = |u: T| -> (T, usize) {
            let mut best = T::neg_infinity();
            let mut arg = 0;
            for (i, &(c0, c1)) in coeffs.iter().enumerate() {
                let v = c0 + c1 * u;
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            (best, arg)
        };
        let mut cands = vec![T::zero(), T::one()];
        for i in 0..n {
            for j in i + 1..n {
                let (a0, a1) = coeffs[i];
                let (b0, b1) = coeffs[j];
                let den = a1 - b1;
                if den != T::zero() {
                    let u = (b0 - a0) / den;
                    if u > T::zero() && u < T::one() {
                        cands.push(u);
                    }
                }
            }
        }
        let mut best_u = T::zero();
        let mut best = (T::infinity(), 0);
        for &u in &cands {
            let v = eval(u);
            if v.0 < best.0 {
                best = v;
                best_u = u;
            }
        }
        let (depth, edge) = best;
        if depth < T::zero() {
            let p = seg.at(best_u);
            let nrm = planes[edge].0;
            return Proximity {
                distance: depth,
                on_segment: p,
                on_object: p - nrm * depth,
                normal: nrm,
            };
        }
        // Outside or touching: exact Euclidean closest pair against every edge.
        let mut out = Proximity {
            distance: T::infinity(),
            on_segment: seg.a,
            on_object: verts[0],
            normal: planes[0].0,
        };
        for i in 0..n {
            let edge_seg = Segment::new(verts[i], verts[(i + 1) % n]);
            let (p, q) = segment_closest_pair(seg, &edge_seg);
            let dist = (p - q).norm();
            if dist < out.distance {
                let normal = (p - q).normalized().unwrap_or(planes[i].0);
                out = Proximity {
                    distance: dist,
                    on_segment: p,
                    on_object: q,
                    normal,
                };
            }
        }
        out
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ShapeKind::Circle { .. } => "circle",
            ShapeKind::Polygon { .. } => "polygon",
        }
    }
}

/// Area centroid of a simple polygon.
fn polygon_centroid<T: Real>(v: &[Vec2<T>]) -> Vec2<T> {
    let n = v.len();
    let mut area = T::zero();
    let mut c = Vec2::zero();
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let cr = a.cross(b);
        area += cr;
        c = c + (a + b) * cr;
    }
    let k = T::one() / (T::lit(3.0) * area);
    c * k
}

/// `count` points evenly spaced by arc length along the closed polyline.
fn perimeter_samples<T: Real>(v: &[Vec2<T>], count: usize) -> Vec<Vec2<T>> {
    let n = v.len();
    let lens: Vec<T> = (0..n).map(|i| (v[(i + 1) % n] - v[i]).norm()).collect();
    let total: T = lens.iter().copied().sum();
    let mut out = Vec::with_capacity(count);
    let mut edge = 0;
    let mut start = T::zero();
    for k in 0..count {
        let s = total * T::lit(k as f64 / count as f64);
        while edge + 1 < n && start + lens[edge] <= s {
            start += lens[edge];
            edge += 1;
        }
        let u = ((s - start) / lens[edge]).min(T::one());
        out.push(v[edge] + (v[(edge + 1) % n] - v[edge]) * u);
    }
    out
}

pub const LIBRARY_HEADER: &str = "HGFOBJ 1";

/// Writes an object library.
///
/// Line format after the header, whitespace separated:
/// `id category kind n_params params... cloud_x0 cloud_y0 ... cloud_x63 cloud_y63`
/// where `kind` is `circle` (one parameter, the radius) or `polygon`
/// (`2 * V` parameters, object-frame vertices `x y` counter-clockwise).
pub fn write_library(objects: &[ObjectShape<f64>], path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str(LIBRARY_HEADER);
    s.push('\n');
    for o in objects {
        let params: Vec<f64> = match &o.kind {
            ShapeKind::Circle { radius } => vec![*radius],
            ShapeKind::Polygon { vertices } => vertices.iter().flat_map(|v| [v.x, v.y]).collect(),
        };
        write!(
            s,
            "{} {} {} {}",
            o.id,
            o.category,
            o.kind_name(),
            params.len()
        )
        .unwrap();
        for p in params {
            write!(s, " {p:e}").unwrap();
        }
        for p in &o.boundary_cloud {
            write!(s, " {:e} {:e}", p.x, p.y).unwrap();
        }
        s.push('\n');
    }
    crate::io_util::write_atomic(path, s.as_bytes()).map_err(EnvError::from)
}

pub fn read_library(path: &Path) -> Result<Vec<ObjectShape<f64>>> {
    let text = std::fs::read_to_string(path)?;
    parse_library(&text)
}

pub fn parse_library(text: &str) -> Result<Vec<ObjectShape<f64>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LIBRARY_HEADER => {}
        other => {
            return Err(EnvError::Parse {
                line: 1,
                message: format!(
                    "expected header {LIBRARY_HEADER:?}, got {:?}",
                    other.map(|o| o.1)
                ),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |m: String| EnvError::Parse {
            line: lineno,
            message: m,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 4 {
            return Err(perr("too few fields".into()));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| perr(format!("bad number {s:?}")))
        };
        let np: usize = f[3]
            .parse()
            .map_err(|_| perr("bad parameter count".into()))?;
        if f.len() != 4 + np + 2 * CLOUD_SIZE {
            return Err(perr(format!(
                "expected {} fields, found {}",
                4 + np + 2 * CLOUD_SIZE,
                f.len()
            )));
        }
        let params = f[4..4 + np]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        let mut obj = match f[2] {
            "circle" if np == 1 => ObjectShape::circle(f[0], f[1], params[0])?,
            "polygon" if np >= 6 && np.is_multiple_of(2) => {
                let v: Vec<Vec2<f64>> = params.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect();
                ObjectShape::polygon(f[0], f[1], &v)?
            }
            k => return Err(perr(format!("unknown kind {k:?} with {np} parameters"))),
        };
        let cloud = f[4 + np..]
            .chunks(2)
            .map(|c| Ok(Vec2::new(num(c[0])?, num(c[1])?)))
            .collect::<Result<Vec<_>>>()?;
        obj.boundary_cloud = cloud;
        obj.rest_on_table(0.0);
        out.push(obj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square(side: f64) -> ObjectShape<f64> {
        let h = side / 2.0;
        ObjectShape::polygon(
            "sq",
            "square",
            &[
                Vec2::new(-h, -h),
                Vec2::new(h, -h),
                Vec2::new(h, h),
                Vec2::new(-h, h),
            ],
        )
        .unwrap()
    }

    #[test]
    fn cloud_lies_on_boundary() {
        let mut c = ObjectShape::circle("c", "circle", 0.05).unwrap();
        c.pose = Pose2::new(0.3, 0.05, 0.7);
        let mut s = square(0.08);
        s.pose = Pose2::new(-0.2, 0.04, 0.3);
        for o in [&c, &s] {
            assert_eq!(o.boundary_cloud.len(), CLOUD_SIZE);
            for p in o.world_cloud() {
                assert!(
                    o.signed_distance(p).abs() < 1e-9,
                    "{}",
                    o.signed_distance(p)
                );
            }
        }
    }

    #[test]
    fn non_convex_polygon_rejected() {
        let v = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.2, 0.2),
            Vec2::new(0.0, 1.0),
        ];
        assert!(ObjectShape::polygon("x", "x", &v).is_err());
        let cw: Vec<_> = [
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
        ]
        .to_vec();
        assert!(ObjectShape::polygon("x", "x", &cw).is_err());
    }

    #[test]
    fn rest_on_table_touches_line() {
        let mut s = square(0.1);
        s.pose.theta = 0.3;
        s.rest_on_table(0.5);
        let min_y = s
            .world_vertices()
            .iter()
            .map(|v| v.y)
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(min_y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_proximity_inside_and_outside() {
        let s = square(0.2); // centred at origin
        let out = s.segment_proximity(&Segment::new(Vec2::new(0.15, -0.5), Vec2::new(0.15, 0.5)));
        assert_relative_eq!(out.distance, 0.05, epsilon = 1e-12);
        assert_relative_eq!(out.normal.x, 1.0, epsilon = 1e-12);
        let inside =
            s.segment_proximity(&Segment::new(Vec2::new(0.07, -0.5), Vec2::new(0.07, 0.5)));
        assert_relative_eq!(inside.distance, -0.03, epsilon = 1e-12);
        assert_relative_eq!(inside.normal.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(inside.on_object.x, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn library_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("objects.txt");
        let objs = vec![
            ObjectShape::circle("c1", "circle", 0.04).unwrap(),
            square(0.07),
        ];
        write_library(&objs, &path).unwrap();
        let back = read_library(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in objs.iter().zip(&back) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.boundary_cloud, b.boundary_cloud);
        }
    }

    #[test]
    fn library_parse_errors_carry_line() {
        let bad = format!("{LIBRARY_HEADER}\nc1 circle circle 1 0.05 0.1\n");
        match parse_library(&bad) {
            Err(EnvError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
