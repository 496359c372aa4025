//! Pixel-space boxes, 3D positions and the size/position qualifiers that
//! are resolved by scanning a perception result.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box in image pixels.
///
/// Coordinates are signed so that malformed boxes coming off the wire can be
/// represented and reported; [`BBox::within`] is the validity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub const fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    /// Area in square pixels. Degenerate or inverted boxes have area 0.
    pub fn area(&self) -> i64 {
        if self.width() <= 0 || self.height() <= 0 {
            0
        } else {
            self.width() * self.height()
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    /// True when the box is well-formed and lies inside a `width`×`height` image.
    pub fn within(&self, width: i64, height: i64) -> bool {
        0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= width
            && 0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Ordering key used for detection results: ascending `x_min`, then `y_min`.
    pub fn detection_key(&self) -> (i64, i64, i64, i64) {
        (self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl From<[i64; 4]> for BBox {
    fn from(v: [i64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Renders a bbox list as `[[..],[..]]`.
pub fn format_bbox_list(list: &[BBox]) -> String {
    let inner: Vec<String> = list.iter().map(BBox::to_string).collect();
    format!("[{}]", inner.join(","))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A size or position attribute that picks one box out of a perception result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualifier {
    None,
    Largest,
    Smallest,
    Leftmost,
    Rightmost,
}

impl Qualifier {
    pub const ALL: [Qualifier; 4] = [
        Qualifier::Largest,
        Qualifier::Smallest,
        Qualifier::Leftmost,
        Qualifier::Rightmost,
    ];

    pub fn keyword(&self) -> Option<&'static str> {
        match self {
            Qualifier::None => None,
            Qualifier::Largest => Some("largest"),
            Qualifier::Smallest => Some("smallest"),
            Qualifier::Leftmost => Some("leftmost"),
            Qualifier::Rightmost => Some("rightmost"),
        }
    }

    /// Name of the scalar the qualifier ranks boxes by.
    pub fn metric_name(&self) -> &'static str {
        match self {
            Qualifier::None => "index",
            Qualifier::Largest | Qualifier::Smallest => "area",
            Qualifier::Leftmost => "x_min",
            Qualifier::Rightmost => "x_max",
        }
    }

    pub fn metric(&self, b: &BBox) -> i64 {
        match self {
            Qualifier::None => 0,
            Qualifier::Largest | Qualifier::Smallest => b.area(),
            Qualifier::Leftmost => b.x_min,
            Qualifier::Rightmost => b.x_max,
        }
    }

    /// Whether the selected box maximizes (`true`) or minimizes the metric.
    pub fn maximizes(&self) -> bool {
        matches!(self, Qualifier::Largest | Qualifier::Rightmost)
    }
}

impl fmt::Display for Qualifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword().unwrap_or("none"))
    }
}

impl FromStr for Qualifier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "" => Ok(Qualifier::None),
            "largest" => Ok(Qualifier::Largest),
            "smallest" => Ok(Qualifier::Smallest),
            "leftmost" => Ok(Qualifier::Leftmost),
            "rightmost" => Ok(Qualifier::Rightmost),
            other => Err(format!("unknown qualifier `{other}`")),
        }
    }
}

/// Index of the box selected by `qualifier`, scanning every candidate.
///
/// Ties keep the earliest candidate, so with detection-ordered input the
/// winner is the one with the smallest `(x_min, y_min)`. `Qualifier::None`
/// selects the first candidate. Returns `None` for an empty list.
///
/// This is the single definition shared by the reference planner and the
/// parameter verification level.
pub fn resolve_qualifier(qualifier: Qualifier, candidates: &[BBox]) -> Option<usize> {
    let mut best: Option<(usize, i64)> = None;
    for (i, b) in candidates.iter().enumerate() {
        let m = qualifier.metric(b);
        let better = match best {
            None => true,
            Some((_, cur)) => {
                if qualifier.maximizes() {
                    m > cur
                } else {
                    m < cur
                }
            }
        };
        if better {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_and_center() {
        let b = BBox::new(10, 10, 20, 30);
        assert_eq!(b.area(), 200);
        assert_eq!(b.center(), (15.0, 20.0));
        assert_eq!(BBox::new(5, 5, 5, 9).area(), 0);
    }

    #[test]
    fn bounds() {
        assert!(BBox::new(0, 0, 640, 480).within(640, 480));
        assert!(!BBox::new(900, 900, 999, 999).within(640, 480));
        assert!(!BBox::new(10, 10, 10, 20).within(640, 480));
        assert!(!BBox::new(-1, 0, 10, 10).within(640, 480));
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20, 20, 30, 30)), 0.0);
        assert!((a.iou(&BBox::new(5, 0, 15, 10)) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn qualifier_resolution() {
        let list = [BBox::new(0, 0, 5, 5), BBox::new(10, 10, 20, 20)];
        assert_eq!(resolve_qualifier(Qualifier::Largest, &list), Some(1));
        assert_eq!(resolve_qualifier(Qualifier::Smallest, &list), Some(0));
        let list = [BBox::new(30, 0, 40, 10), BBox::new(5, 0, 15, 10)];
        assert_eq!(resolve_qualifier(Qualifier::Leftmost, &list), Some(1));
        assert_eq!(resolve_qualifier(Qualifier::Rightmost, &list), Some(0));
        assert_eq!(resolve_qualifier(Qualifier::None, &list), Some(0));
        assert_eq!(resolve_qualifier(Qualifier::Largest, &[]), None);
    }

    #[test]
    fn ties_keep_first() {
        let list = [BBox::new(0, 0, 10, 10), BBox::new(20, 0, 30, 10)];
        assert_eq!(resolve_qualifier(Qualifier::Largest, &list), Some(0));
        assert_eq!(resolve_qualifier(Qualifier::Smallest, &list), Some(0));
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1, 2, 3, 4);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1,2,3,4]");
        let back: BBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }
}
