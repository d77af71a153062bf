//! Points and axis-aligned boxes over any numeric coordinate type.
//!
//! Annotations live in integer pixel space ([`PixelBox`](crate::PixelBox)),
//! upstream sources sometimes ship unit-normalized boxes
//! ([`UnitBox`](crate::UnitBox)), and parsed model answers are real-valued
//! ([`ClickPoint`](crate::ClickPoint)). All three share the same containment
//! rule.

use std::fmt;

use num_traits::{Num, NumCast, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Scalar usable as a screen coordinate.
pub trait Coord: Num + NumCast + PartialOrd + Copy + fmt::Debug {}

impl<T> Coord for T where T: Num + NumCast + PartialOrd + Copy + fmt::Debug {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Coord> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    /// Lossy conversion to another coordinate type; `None` if a component
    /// does not fit.
    pub fn cast<U: Coord>(self) -> Option<Point<U>> {
        Some(Point {
            x: <U as NumCast>::from(self.x)?,
            y: <U as NumCast>::from(self.y)?,
        })
    }
}

impl<T: fmt::Display> fmt::Display for Point<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)`.
///
/// Serialized as a four-element array, the layout used by the corpus files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(
    from = "[T; 4]",
    into = "[T; 4]",
    bound(serialize = "T: Serialize + Clone", deserialize = "T: Deserialize<'de>")
)]
pub struct BBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T> From<[T; 4]> for BBox<T> {
    fn from([x_min, y_min, x_max, y_max]: [T; 4]) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl<T> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl<T: Coord> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Strictly positive extent on both axes.
    pub fn is_proper(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    /// Inclusive-edge containment.
    pub fn contains(&self, p: Point<T>) -> bool {
        self.x_min <= p.x && p.x <= self.x_max && self.y_min <= p.y && p.y <= self.y_max
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: T, height: T) -> bool {
        let zero = T::zero();
        zero <= self.x_min && self.x_max <= width && zero <= self.y_min && self.y_max <= height
    }

    /// Midpoint rounded toward negative infinity on both axes.
    pub fn floor_center(&self) -> Point<i64> {
        let mid = |a: T, b: T| -> i64 {
            let s = a.to_f64().unwrap_or(0.0) + b.to_f64().unwrap_or(0.0);
            (s / 2.0).floor() as i64
        };
        Point {
            x: mid(self.x_min, self.x_max),
            y: mid(self.y_min, self.y_max),
        }
    }

    pub fn cast<U: Coord>(self) -> Option<BBox<U>> {
        Some(BBox {
            x_min: <U as NumCast>::from(self.x_min)?,
            y_min: <U as NumCast>::from(self.y_min)?,
            x_max: <U as NumCast>::from(self.x_max)?,
            y_max: <U as NumCast>::from(self.y_max)?,
        })
    }
}

impl BBox<f64> {
    /// Scale a unit-normalized box to pixels, rounding each edge to the
    /// nearest integer. The result is not validated.
    pub fn to_pixels(&self, width: u32, height: u32) -> BBox<i64> {
        let sx = |v: f64| (v * width as f64).round() as i64;
        let sy = |v: f64| (v * height as f64).round() as i64;
        BBox {
            x_min: sx(self.x_min),
            y_min: sy(self.y_min),
            x_max: sx(self.x_max),
            y_max: sy(self.y_max),
        }
    }
}

/// Click-in-box success test with inclusive edges.
///
/// The point and box must share one pixel space.
pub fn score_click<T: Coord>(point: Point<T>, bbox: &BBox<T>) -> bool {
    bbox.contains(point)
}

/// Mixed-type variant used by the evaluator: real-valued predictions
/// against integer annotations.
pub fn score_click_pixels<P: Coord, B: Coord + ToPrimitive>(point: Point<P>, bbox: &BBox<B>) -> bool {
    match (point.cast::<f64>(), bbox.cast::<f64>()) {
        (Some(p), Some(b)) => b.contains(p),
        _ => false,
    }
}
