use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scalar::Scalar;

/// Number of annotated landmarks per image.
pub const N_LANDMARKS: usize = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandmarkGroup {
    SoftTissue,
    Tooth,
    Skull,
    CervicalSpine,
    Ruler,
}

impl LandmarkGroup {
    pub const ALL: [LandmarkGroup; 5] = [
        LandmarkGroup::SoftTissue,
        LandmarkGroup::Tooth,
        LandmarkGroup::Skull,
        LandmarkGroup::CervicalSpine,
        LandmarkGroup::Ruler,
    ];

    pub fn cardinality(self) -> usize {
        match self {
            LandmarkGroup::SoftTissue => 13,
            LandmarkGroup::Tooth => 6,
            LandmarkGroup::Skull => 19,
            LandmarkGroup::CervicalSpine => 13,
            LandmarkGroup::Ruler => 2,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            LandmarkGroup::SoftTissue => "soft_tissue",
            LandmarkGroup::Tooth => "tooth",
            LandmarkGroup::Skull => "skull",
            LandmarkGroup::CervicalSpine => "cervical_spine",
            LandmarkGroup::Ruler => "ruler",
        }
    }
}

impl fmt::Display for LandmarkGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Names and group tags for the 53 landmarks, in annotation column order.
///
/// Landmarks are laid out group by group (soft tissue, tooth, skull,
/// cervical spine, ruler) and named `<group>_<nn>`.
#[derive(Debug)]
pub struct LandmarkLayout {
    names: Vec<String>,
    groups: Vec<LandmarkGroup>,
}

impl LandmarkLayout {
    pub fn standard() -> &'static LandmarkLayout {
        static LAYOUT: OnceLock<LandmarkLayout> = OnceLock::new();
        LAYOUT.get_or_init(|| {
            let mut names = Vec::with_capacity(N_LANDMARKS);
            let mut groups = Vec::with_capacity(N_LANDMARKS);
            for group in LandmarkGroup::ALL {
                for i in 1..=group.cardinality() {
                    names.push(format!("{}_{i:02}", group.prefix()));
                    groups.push(group);
                }
            }
            debug_assert_eq!(names.len(), N_LANDMARKS);
            LandmarkLayout { names, groups }
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[LandmarkGroup] {
        &self.groups
    }

    pub fn group_of(&self, name: &str) -> Option<LandmarkGroup> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.groups[i])
    }

    /// Indices of the two calibration ruler landmarks.
    pub fn ruler_indices(&self) -> (usize, usize) {
        let mut it = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == LandmarkGroup::Ruler)
            .map(|(i, _)| i);
        let a = it.next().expect("layout has ruler landmarks");
        let b = it.next().expect("layout has two ruler landmarks");
        (a, b)
    }
}

/// The 53 landmark coordinates of one image, in original-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet<T> {
    points: Vec<Point2<T>>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<Point2<T>>) -> Result<Self> {
        Self::with_id("<unnamed>", points)
    }

    /// Same as [`LandmarkSet::new`] but names the image in errors.
    pub fn with_id(id: &str, points: Vec<Point2<T>>) -> Result<Self> {
        if points.len() != N_LANDMARKS {
            return Err(Error::LandmarkCount {
                id: id.to_string(),
                expected: N_LANDMARKS,
                found: points.len(),
            });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidLandmark {
                    id: id.to_string(),
                    index,
                    reason: "non-finite coordinate".into(),
                });
            }
            if p.x < T::zero() || p.y < T::zero() {
                return Err(Error::InvalidLandmark {
                    id: id.to_string(),
                    index,
                    reason: format!("negative coordinate ({}, {})", p.x, p.y),
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2<T>> {
        self.points
    }

    pub fn names(&self) -> &'static [String] {
        LandmarkLayout::standard().names()
    }

    pub fn groups(&self) -> &'static [LandmarkGroup] {
        LandmarkLayout::standard().groups()
    }

    /// Checks every point lies within `[0, width) x [0, height)`.
    pub fn check_bounds(&self, id: &str, height: usize, width: usize) -> Result<()> {
        let (w, h) = (T::from_usize_lossy(width), T::from_usize_lossy(height));
        for (index, p) in self.points.iter().enumerate() {
            if p.x >= w || p.y >= h {
                return Err(Error::InvalidLandmark {
                    id: id.to_string(),
                    index,
                    reason: format!("({}, {}) outside {width}x{height} image", p.x, p.y),
                });
            }
        }
        Ok(())
    }

    /// Pixel distance between the two ruler landmarks.
    pub fn ruler_length_px(&self) -> T {
        let (a, b) = LandmarkLayout::standard().ruler_indices();
        self.points[a].distance(&self.points[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_cardinalities_sum_to_53() {
        let total: usize = LandmarkGroup::ALL.iter().map(|g| g.cardinality()).sum();
        assert_eq!(total, N_LANDMARKS);
        let layout = LandmarkLayout::standard();
        for g in LandmarkGroup::ALL {
            let n = layout.groups().iter().filter(|x| **x == g).count();
            assert_eq!(n, g.cardinality(), "{g}");
        }
        assert_eq!(layout.group_of("ruler_02"), Some(LandmarkGroup::Ruler));
        assert_eq!(layout.group_of("skull_19"), Some(LandmarkGroup::Skull));
        assert_eq!(layout.group_of("skull_20"), None);
    }

    #[test]
    fn rejects_wrong_count_and_negative() {
        let pts = vec![Point2::new(1.0, 1.0); 52];
        assert!(matches!(
            LandmarkSet::<f64>::new(pts),
            Err(Error::LandmarkCount { found: 52, .. })
        ));
        let mut pts = vec![Point2::new(1.0, 1.0); 53];
        pts[3].y = -0.5;
        assert!(LandmarkSet::<f64>::new(pts.clone()).is_err());
        pts[3].y = f64::NAN;
        assert!(LandmarkSet::<f64>::new(pts).is_err());
    }

    #[test]
    fn bounds_check() {
        let set = LandmarkSet::<f32>::new(vec![Point2::new(9.5, 4.0); 53]).unwrap();
        assert!(set.check_bounds("a", 5, 10).is_ok());
        assert!(set.check_bounds("a", 4, 10).is_err());
    }
}
