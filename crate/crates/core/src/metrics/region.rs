//! Front/rear split of the LiDAR frame: front is `x > 0`, rear is `x <= 0`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rangeview::{ray_grid, PointCloud, RangeImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Full,
    Front,
    Rear,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Full, Region::Front, Region::Rear];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Front => "front",
            Region::Rear => "rear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown region '{s}'")))
    }

    pub fn contains(self, p: &[f64; 3]) -> bool {
        match self {
            Region::Full => true,
            Region::Front => p[0] > 0.0,
            Region::Rear => p[0] <= 0.0,
        }
    }

    pub fn restrict(self, cloud: &PointCloud) -> PointCloud {
        cloud.filter(|p| self.contains(p))
    }

    /// Drops returns whose point falls outside the region.
    pub fn restrict_range(self, range: &RangeImage) -> RangeImage {
        let mut out = range.clone();
        if self == Region::Full {
            return out;
        }
        for (i, r) in ray_grid(&range.sensor).iter().enumerate() {
            if out.depth[i] > 0.0 && !self.contains(r) {
                out.depth[i] = 0.0;
                out.intensity[i] = 0.0;
            }
        }
        out
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(front, rear)`; every point lands in exactly one.
pub fn region_partition(cloud: &PointCloud) -> (PointCloud, PointCloud) {
    (Region::Front.restrict(cloud), Region::Rear.restrict(cloud))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangeview::{project_points, unproject};
    use crate::synthworld::{generate_sample, Weather, WorldConfig};
    use proptest::prelude::*;

    #[test]
    fn uniform_azimuth_splits_in_half() {
        let n = 1000;
        let pts = (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * (k as f64 + 0.25) / n as f64;
                [10.0 * a.cos(), 10.0 * a.sin(), -1.0]
            })
            .collect();
        let cloud = PointCloud::new(pts, vec![0.5; n]).unwrap();
        let (front, rear) = region_partition(&cloud);
        assert_eq!(front.len(), n / 2);
        assert_eq!(rear.len(), n / 2);
    }

    #[test]
    fn restricted_range_matches_restricted_cloud() {
        let s = generate_sample(&WorldConfig::default(), 4, Weather::Clean).unwrap();
        for region in Region::ALL {
            let a = unproject(&region.restrict_range(&s.range_image));
            let b = region.restrict(&unproject(&s.range_image));
            assert_eq!(a.points, b.points);
            assert_eq!(project_points(&b, &s.range_image.sensor).unwrap().returns(), a.len());
        }
    }

    #[test]
    fn names_round_trip() {
        for r in Region::ALL {
            assert_eq!(Region::parse(r.as_str()).unwrap(), r);
        }
        assert!(Region::parse("left").is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_mirror_swaps(pts in prop::collection::vec(
            (-20f64..20.0, -20f64..20.0, -3f64..3.0).prop_filter("off the split plane", |p| p.0 != 0.0), 0..200)) {
            let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let n = pts.len();
            let cloud = PointCloud::new(pts.clone(), vec![0.0; n]).unwrap();
            let mirrored = PointCloud::new(pts.iter().map(|p| [-p[0], p[1], p[2]]).collect(), vec![0.0; n]).unwrap();
            let (f, r) = region_partition(&cloud);
            let (mf, mr) = region_partition(&mirrored);
            prop_assert_eq!(f.len() + r.len(), n);
            prop_assert_eq!(f.len(), mr.len());
            prop_assert_eq!(r.len(), mf.len());
        }
    }
}
