use serde::{Deserialize, Serialize};

use super::{DetectionError, Result};

/// Length of the regression target: offset (3), log size (3), heading
/// sin/cos (2), planar velocity (2).
pub const BOX_CODE: usize = 10;

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Oriented 3D box in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Meters.
    pub center: [f64; 3],
    /// Width, length, height in meters.
    pub size: [f64; 3],
    /// Heading about +z, radians in (−π, π].
    pub yaw: f64,
    /// Planar velocity, m/s.
    pub velocity: [f64; 2],
    pub class: usize,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .center
            .iter()
            .chain(&self.size)
            .chain(&self.velocity)
            .chain(std::iter::once(&self.yaw))
            .all(|v| v.is_finite());
        if !finite || self.size.iter().any(|&s| s <= 0.0) {
            return Err(DetectionError::InvalidBox(*self));
        }
        Ok(())
    }

    /// Planar distance between centers.
    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

/// Axis-aligned region objects live in; maps meters to normalized
/// coordinates in [−1, 1] per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(max[k] > min[k]) || !min[k].is_finite() || !max[k].is_finite()) {
            return Err(DetectionError::EmptyBounds { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        std::array::from_fn(|k| 0.5 * (self.max[k] - self.min[k]))
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let (c, h) = (self.center(), self.half_extent());
        std::array::from_fn(|k| (p[k] - c[k]) / h[k])
    }

    pub fn denormalize(&self, p: [f64; 3]) -> [f64; 3] {
        let (c, h) = (self.center(), self.half_extent());
        std::array::from_fn(|k| c[k] + p[k] * h[k])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Regression target for `b` relative to a normalized reference point.
pub fn encode(b: &Box3D, reference: [f64; 3], bounds: &SceneBounds) -> [f64; BOX_CODE] {
    let mut code = absolute_code(b, bounds);
    for k in 0..3 {
        code[k] -= reference[k];
    }
    code
}

/// The code with the center left in normalized coordinates rather than as
/// an offset; the loss compares predictions to this after adding the
/// reference point back.
pub fn absolute_code(b: &Box3D, bounds: &SceneBounds) -> [f64; BOX_CODE] {
    let n = bounds.normalize(b.center);
    [
        n[0],
        n[1],
        n[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

pub fn decode(code: &[f64], reference: [f64; 3], bounds: &SceneBounds, class: usize) -> Box3D {
    let center = bounds.denormalize(std::array::from_fn(|k| reference[k] + code[k]));
    Box3D {
        center,
        size: [code[3].exp(), code[4].exp(), code[5].exp()],
        yaw: code[6].atan2(code[7]),
        velocity: [code[8], code[9]],
        class,
    }
}
