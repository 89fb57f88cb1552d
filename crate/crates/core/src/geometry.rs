//! Points in R^n for n <= 3 and balls.
//!
//! Points are stored as `[f64; 3]`; coordinates beyond the working dimension
//! are kept at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const ORIGIN: Point = [0.0; 3];

pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: &Point, t: f64) -> Point {
    [a[0] * t, a[1] * t, a[2] * t]
}

/// `a + t * d`
pub fn axpy(a: &Point, t: f64, d: &Point) -> Point {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    norm(&sub(a, b))
}

/// Unit vector along coordinate axis `i`.
pub fn axis(i: usize) -> Point {
    let mut e = ORIGIN;
    e[i] = 1.0;
    e
}

/// Builds a point from a slice of at most three coordinates.
pub fn point(coords: &[f64]) -> Result<Point> {
    if coords.len() > 3 {
        return Err(Error::invalid(format!(
            "point has {} coordinates, at most 3 supported",
            coords.len()
        )));
    }
    let mut p = ORIGIN;
    p[..coords.len()].copy_from_slice(coords);
    Ok(p)
}

/// A closed ball; also used to describe spheres across which a field is not smooth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Ball { center, radius })
    }

    pub fn centered(radius: f64) -> Result<Self> {
        Ball::new(ORIGIN, radius)
    }

    pub fn contains(&self, x: &Point) -> bool {
        dist(x, &self.center) < self.radius
    }

    /// Parameters `t >= 0` where the ray `origin + t * dir` (unit `dir`) crosses the sphere.
    pub fn ray_crossings(&self, origin: &Point, dir: &Point) -> Vec<f64> {
        let oc = sub(origin, &self.center);
        let b = dot(&oc, dir);
        let c = dot(&oc, &oc) - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return Vec::new();
        }
        let root = disc.sqrt();
        // Cancellation-free pair of roots.
        let q = if b >= 0.0 { -(b + root) } else { -b + root };
        let (t1, t2) = if q != 0.0 { (q, c / q) } else { (0.0, 0.0) };
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        [lo, hi].into_iter().filter(|t| *t > 0.0).collect()
    }

    /// The part of the ray `origin + t * dir`, `t >= 0`, lying inside the ball.
    pub fn ray_chord(&self, origin: &Point, dir: &Point) -> Option<(f64, f64)> {
        let oc = sub(origin, &self.center);
        let b = dot(&oc, dir);
        let c = dot(&oc, &oc) - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let lo = -b - root;
        let hi = -b + root;
        if hi <= 0.0 {
            return None;
        }
        Some((lo.max(0.0), hi))
    }
}

/// Rotation matrix applied as `R * v`.
pub type Rotation = [[f64; 3]; 3];

pub fn rotate(r: &Rotation, v: &Point) -> Point {
    [dot(&r[0], v), dot(&r[1], v), dot(&r[2], v)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chord_through_center() {
        let b = Ball::centered(1.0).unwrap();
        let (lo, hi) = b.ray_chord(&[-3.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((lo - 2.0).abs() < 1e-15 && (hi - 4.0).abs() < 1e-15);
        assert_eq!(b.ray_crossings(&[-3.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), vec![2.0, 4.0]);
    }

    #[test]
    fn chord_from_inside_starts_at_zero() {
        let b = Ball::centered(1.0).unwrap();
        let (lo, hi) = b.ray_chord(&[0.5, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 1.5).abs() < 1e-15);
        assert_eq!(b.ray_crossings(&[0.5, 0.0, 0.0], &[-1.0, 0.0, 0.0]).len(), 1);
    }

    #[test]
    fn missing_ray() {
        let b = Ball::centered(1.0).unwrap();
        assert!(b.ray_chord(&[0.0, 2.0, 0.0], &[1.0, 0.0, 0.0]).is_none());
        assert!(b.ray_chord(&[3.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rejects_bad_radius() {
        assert!(Ball::centered(0.0).is_err());
        assert!(Ball::centered(f64::NAN).is_err());
    }
}
