//! Camera-frame geometry: pinhole intrinsics, pixel-plus-depth back
//! projection and the pairwise distance gate used for interaction edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-skew pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidIntrinsics("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    /// Forward projection of a camera-frame point to pixel coordinates and depth.
    pub fn project(&self, p: Point3) -> PixelObservation {
        PixelObservation {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
        }
    }
}

impl Default for CameraIntrinsics {
    /// 356x200 frames with a roughly 80 degree horizontal field of view.
    fn default() -> Self {
        CameraIntrinsics { fx: 210.0, fy: 210.0, cx: 178.0, cy: 100.0 }
    }
}

/// A point in the camera frame, meters, z along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        euclidean_distance(*self, Point3::ORIGIN)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

/// Bounding-box center in pixels with the estimated depth at that pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelObservation {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Closed-form inverse of the zero-skew pinhole matrix.
pub fn invert_intrinsics(k: &CameraIntrinsics) -> Result<[[f64; 3]; 3]> {
    k.validate()?;
    let (ifx, ify) = (1.0 / k.fx, 1.0 / k.fy);
    Ok([[ifx, 0.0, -k.cx * ifx], [0.0, ify, -k.cy * ify], [0.0, 0.0, 1.0]])
}

/// Lifts a pixel with depth into the camera frame: `depth * K^-1 [u, v, 1]^T`.
pub fn inverse_project(obs: &PixelObservation, k: &CameraIntrinsics) -> Result<Point3> {
    if !(obs.depth > 0.0) || !obs.depth.is_finite() {
        return Err(Error::InvalidObservation(format!("depth must be positive, got {}", obs.depth)));
    }
    let m = invert_intrinsics(k)?;
    let ray = [obs.u, obs.v, 1.0];
    let row = |r: &[f64; 3]| obs.depth * (r[0] * ray[0] + r[1] * ray[1] + r[2] * ray[2]);
    Ok(Point3::new(row(&m[0]), row(&m[1]), row(&m[2])))
}

pub fn euclidean_distance(p: Point3, q: Point3) -> f64 {
    let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance gate for interaction edges; the boundary is inclusive.
pub fn within_range(p: Point3, q: Point3, mu: f64) -> Result<bool> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("distance threshold must be positive, got {mu}")));
    }
    Ok(euclidean_distance(p, q) <= mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k(fx: f64, fy: f64, cx: f64, cy: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fy, cx, cy).unwrap()
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
            }
        }
        out
    }

    #[test]
    fn inverse_intrinsics_examples() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(invert_intrinsics(&k(1.0, 1.0, 0.0, 0.0)).unwrap(), id);
        assert_eq!(
            invert_intrinsics(&k(2.0, 2.0, 0.0, 0.0)).unwrap(),
            [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            invert_intrinsics(&k(1.0, 1.0, 3.0, 4.0)).unwrap(),
            [[1.0, 0.0, -3.0], [0.0, 1.0, -4.0], [0.0, 0.0, 1.0]]
        );
        let kk = k(523.7, 498.1, 171.3, 99.9);
        let prod = matmul(&invert_intrinsics(&kk).unwrap(), &kk.matrix());
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(prod[i][j], id[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_focal_length() {
        assert!(matches!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0), Err(Error::InvalidIntrinsics(_))));
        let bad = CameraIntrinsics { fx: 1.0, fy: -2.0, cx: 0.0, cy: 0.0 };
        assert!(matches!(invert_intrinsics(&bad), Err(Error::InvalidIntrinsics(_))));
    }

    #[test]
    fn inverse_projection_examples() {
        let obs = |u, v, depth| PixelObservation { u, v, depth };
        assert_eq!(inverse_project(&obs(0.0, 0.0, 1.0), &k(1.0, 1.0, 0.0, 0.0)).unwrap(), Point3::new(0.0, 0.0, 1.0));
        assert_eq!(inverse_project(&obs(2.0, 2.0, 1.0), &k(2.0, 2.0, 0.0, 0.0)).unwrap(), Point3::new(1.0, 1.0, 1.0));
        assert_eq!(inverse_project(&obs(3.0, 4.0, 2.0), &k(1.0, 1.0, 3.0, 4.0)).unwrap(), Point3::new(0.0, 0.0, 2.0));
        assert!(matches!(
            inverse_project(&obs(1.0, 1.0, 0.0), &k(1.0, 1.0, 0.0, 0.0)),
            Err(Error::InvalidObservation(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(euclidean_distance(p, p), 0.0);
        assert_eq!(euclidean_distance(Point3::ORIGIN, Point3::new(0.0, 0.0, 4.0)), 4.0);
        assert_eq!(euclidean_distance(Point3::new(1.0, 1.0, 0.0), Point3::new(4.0, 5.0, 0.0)), 5.0);
    }

    #[test]
    fn range_gate_examples() {
        let p = Point3::new(0.5, -1.0, 2.0);
        assert!(within_range(p, p, 3.0).unwrap());
        assert!(!within_range(Point3::ORIGIN, Point3::new(0.0, 0.0, 4.0), 3.0).unwrap());
        assert!(within_range(Point3::ORIGIN, Point3::new(0.0, 0.0, 3.0), 3.0).unwrap());
        assert!(matches!(within_range(p, p, 0.0), Err(Error::Config(_))));
    }

    fn point() -> impl Strategy<Value = Point3> {
        (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn projection_roundtrip(
            u in -500.0..900.0f64, v in -500.0..700.0f64, depth in 0.05..200.0f64,
            fx in 50.0..2000.0f64, fy in 50.0..2000.0f64, cx in 0.0..800.0f64, cy in 0.0..600.0f64,
        ) {
            let kk = k(fx, fy, cx, cy);
            let obs = PixelObservation { u, v, depth };
            let back = kk.project(inverse_project(&obs, &kk).unwrap());
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            prop_assert!(rel(back.u, u) < 1e-9);
            prop_assert!(rel(back.v, v) < 1e-9);
            prop_assert!(rel(back.depth, depth) < 1e-9);
        }

        #[test]
        fn distance_is_a_metric(p in point(), q in point(), r in point()) {
            let d = euclidean_distance;
            prop_assert!(d(p, q) >= 0.0);
            prop_assert_eq!(d(p, q), d(q, p));
            prop_assert!(d(p, r) <= d(p, q) + d(q, r) + 1e-9);
        }

        #[test]
        fn gate_monotone_in_threshold(p in point(), q in point(), mu in 0.1..40.0f64, extra in 0.0..40.0f64) {
            if within_range(p, q, mu).unwrap() {
                prop_assert!(within_range(p, q, mu + extra).unwrap());
            }
        }
    }
}
