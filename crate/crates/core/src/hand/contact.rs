use serde::{Deserialize, Serialize};

use super::model::{HandGeometry, LinkId};
use super::object::ObjectShape;
use crate::geom::Vec2;
use crate::scalar::Real;

/// Default contact tolerance band in meters.
pub const CONTACT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact<T> {
    /// World point on the object boundary.
    pub point: Vec2<T>,
    /// Unit normal pointing from the object into the hand.
    pub normal: Vec2<T>,
    pub link: LinkId,
    /// Surface gap, negative when penetrating.
    pub gap: T,
}

/// One contact per link (and the palm) that touches or penetrates the object,
/// at that link's deepest point.
pub fn detect_contacts<T: Real>(
    geometry: &HandGeometry<T>,
    object: &ObjectShape<T>,
    thickness: T,
    tol: T,
) -> Vec<Contact<T>> {
    geometry
        .bodies()
        .filter_map(|(link, seg)| {
            let prox = object.segment_proximity(&seg);
            let gap = prox.distance - thickness;
            (gap <= tol).then_some(Contact {
                point: prox.on_object,
                normal: prox.normal,
                link,
                gap,
            })
        })
        .collect()
}
