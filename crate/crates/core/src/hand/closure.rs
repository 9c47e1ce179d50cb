//! Planar force closure with Coulomb friction.
//!
//! Each contact contributes the two edges of its friction cone as planar
//! wrenches `(fx, fy, tau)`; the grasp is force closed when the origin lies
//! strictly inside the convex hull of those wrenches.

use super::contact::Contact;
use crate::geom::Vec2;
use crate::scalar::Real;

pub type Wrench<T> = [T; 3];

/// Friction-cone edge wrenches, torque taken about `com` and divided by
/// `torque_scale`.
pub fn edge_wrenches<T: Real>(
    contacts: &[Contact<T>],
    mu: T,
    com: Vec2<T>,
    torque_scale: T,
) -> Vec<Wrench<T>> {
    let mut out = Vec::with_capacity(2 * contacts.len());
    for c in contacts {
        let inward = -c.normal;
        let tangent = c.normal.perp();
        let r = c.point - com;
        for s in [T::one(), -T::one()] {
            let f = inward + tangent * (mu * s);
            out.push([f.x, f.y, r.cross(f) / torque_scale]);
        }
    }
    out
}

fn sub(a: &Wrench<impl Real>, b: &Wrench<impl Real>) -> [f64; 3] {
    [
        a[0].as_f64() - b[0].as_f64(),
        a[1].as_f64() - b[1].as_f64(),
        a[2].as_f64() - b[2].as_f64(),
    ]
}

/// Signed distance from the origin to the boundary of the convex hull of
/// `points`: positive inside, non-positive outside or when the hull is not
/// full dimensional.
pub fn hull_margin<T: Real>(points: &[Wrench<T>]) -> T {
    let n = points.len();
    if n < 4 {
        return T::zero();
    }
    let scale = points
        .iter()
        .map(|p| p.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut margin = f64::INFINITY;
    let mut facets = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let u = sub(&points[j], &points[i]);
                let v = sub(&points[k], &points[i]);
                let mut nrm = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                if len <= 1e-14 * scale * scale {
                    continue;
                }
                nrm.iter_mut().for_each(|c| *c /= len);
                let side = |p: &Wrench<T>| -> f64 {
                    let d = sub(p, &points[i]);
                    nrm[0] * d[0] + nrm[1] * d[1] + nrm[2] * d[2]
                };
                let (mut pos, mut neg) = (false, false);
                for p in points {
                    let s = side(p);
                    pos |= s > tol;
                    neg |= s < -tol;
                }
                if pos && neg {
                    continue;
                }
                // Orient the normal outward (all points on the non-positive side).
                let outward = if pos { -1.0 } else { 1.0 };
                let p0 = &points[i];
                let origin_side = -outward
                    * (nrm[0] * p0[0].as_f64() + nrm[1] * p0[1].as_f64() + nrm[2] * p0[2].as_f64());
                // origin_side < 0 means the origin is inside this facet's half-space.
                margin = margin.min(-origin_side);
                facets += 1;
                if !pos && !neg {
                    // Every point is coplanar; the hull is flat.
                    return T::zero();
                }
            }
        }
    }
    if facets == 0 {
        return T::zero();
    }
    T::lit(margin)
}

/// Force-closure test; torque about `com`.
pub fn force_closure<T: Real>(contacts: &[Contact<T>], mu: T, com: Vec2<T>) -> bool {
    closure_margin(contacts, mu, com, T::one()) > T::zero()
}

/// Hull margin of the edge wrenches, with torques normalized by `torque_scale`.
pub fn closure_margin<T: Real>(contacts: &[Contact<T>], mu: T, com: Vec2<T>, torque_scale: T) -> T {
    if contacts.len() < 2 || !(mu > T::zero()) {
        return T::zero();
    }
    let w = edge_wrenches(contacts, mu, com, torque_scale);
    let m = hull_margin(&w);
    let scale = w
        .iter()
        .flat_map(|p| p.iter())
        .map(|v| v.abs())
        .fold(T::zero(), T::max);
    if m > T::lit(1e-10) * scale {
        m
    } else {
        m.min(T::zero())
    }
}
