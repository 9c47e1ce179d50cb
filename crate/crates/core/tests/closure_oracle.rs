//! Force closure against a brute-force simplex enumeration.
//!
//! In general position the origin is interior to the hull of the friction
//! cone edges exactly when it is interior to some tetrahedron spanned by four
//! of them, which needs nothing beyond 3x3 determinants.

use handgf_core::geom::Vec2;
use handgf_core::hand::{edge_wrenches, force_closure, Contact, LinkId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type W = [f64; 3];

fn det3(a: W, b: W, c: W) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Whether the origin is strictly inside tetrahedron `p`; flat ones contain nothing.
fn origin_in_tetra(p: [W; 4]) -> bool {
    let sub = |a: W, b: W| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let (a, b, c) = (sub(p[1], p[0]), sub(p[2], p[0]), sub(p[3], p[0]));
    let d = det3(a, b, c);
    if d.abs() < 1e-12 {
        return false;
    }
    let r = [-p[0][0], -p[0][1], -p[0][2]];
    let l1 = det3(r, b, c) / d;
    let l2 = det3(a, r, c) / d;
    let l3 = det3(a, b, r) / d;
    let l0 = 1.0 - l1 - l2 - l3;
    [l0, l1, l2, l3].iter().all(|&l| l > 0.0)
}

fn brute_force_closure(w: &[W]) -> bool {
    let n = w.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    if origin_in_tetra([w[i], w[j], w[k], w[l]]) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn random_contact(rng: &mut impl Rng) -> Contact<f64> {
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r: f64 = rng.gen_range(0.3..1.0);
    let point = Vec2::new(r * a.cos(), r * a.sin());
    // Roughly outward normals, as on the boundary of a convex body.
    let tilt: f64 = rng.gen_range(-1.0..1.0);
    let normal = Vec2::new((a + tilt).cos(), (a + tilt).sin());
    Contact {
        point,
        normal,
        link: LinkId::Palm,
        gap: 0.0,
    }
}

#[test]
fn force_closure_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut agree, mut closed) = (0, 0);
    let cases = 200;
    for case in 0..cases {
        let n = rng.gen_range(1..=3);
        let contacts: Vec<Contact<f64>> = (0..n).map(|_| random_contact(&mut rng)).collect();
        let mu = rng.gen_range(0.1..1.2);
        let com = Vec2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let got = force_closure(&contacts, mu, com);
        let want = brute_force_closure(&edge_wrench_oracle(&contacts, mu, com));
        if got == want {
            agree += 1;
        } else {
            println!("case {case}: {n} contacts mu {mu:.3} implementation {got} oracle {want}");
        }
        closed += want as usize;
    }
    println!("agreement {agree}/{cases}, {closed} force closed");
    assert_eq!(agree, cases);
    assert!(
        closed >= 20 && closed <= cases - 20,
        "degenerate case mix: {closed} closed"
    );
}

/// Friction cone edges recomputed from the contact geometry.
fn edge_wrench_oracle(contacts: &[Contact<f64>], mu: f64, com: Vec2<f64>) -> Vec<W> {
    let mut out = Vec::new();
    for c in contacts {
        let (nx, ny) = (-c.normal.x, -c.normal.y);
        let (tx, ty) = (-c.normal.y, c.normal.x);
        let (rx, ry) = (c.point.x - com.x, c.point.y - com.y);
        for s in [1.0, -1.0] {
            let (fx, fy) = (nx + s * mu * tx, ny + s * mu * ty);
            out.push([fx, fy, rx * fy - ry * fx]);
        }
    }
    out
}

#[test]
fn edge_wrenches_match_recomputed_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let contacts: Vec<Contact<f64>> = (0..3).map(|_| random_contact(&mut rng)).collect();
        let com = Vec2::new(0.1, -0.05);
        let mut got = edge_wrenches(&contacts, 0.5, com, 1.0);
        let mut want = edge_wrench_oracle(&contacts, 0.5, com);
        let key = |w: &W| (w[0] * 1e6).round() as i64;
        got.sort_by_key(key);
        want.sort_by_key(key);
        for (g, w) in got.iter().zip(&want) {
            for k in 0..3 {
                assert!((g[k] - w[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_contact_is_never_force_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let c = random_contact(&mut rng);
        assert!(!force_closure(&[c], 2.0, Vec2::zero()));
    }
}

#[test]
fn antipodal_pair_with_friction_is_force_closed() {
    let c = |x: f64| Contact {
        point: Vec2::new(x, 0.0),
        normal: Vec2::new(x.signum(), 0.0),
        link: LinkId::Palm,
        gap: 0.0,
    };
    assert!(force_closure(&[c(1.0), c(-1.0)], 0.3, Vec2::zero()));
    assert!(!force_closure(&[c(1.0), c(-1.0)], 0.0, Vec2::zero()));
}
