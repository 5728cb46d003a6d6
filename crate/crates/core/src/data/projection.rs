//! Albers equal-area conic projection on a spherical earth, centered on a
//! configured lon/lat box. Output is in kilometres with the box center at
//! the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Point;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl DomainBox {
    /// A box covering the northeastern US plus neighboring states.
    pub const NORTHEAST_US: DomainBox = DomainBox {
        lon_min: -85.0,
        lon_max: -66.0,
        lat_min: 36.0,
        lat_max: 48.0,
    };

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.lon_min + self.lon_max),
            0.5 * (self.lat_min + self.lat_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub domain: DomainBox,
    lon0: f64,
    n: f64,
    c: f64,
    rho0: f64,
}

impl Projection {
    /// Standard parallels sit one sixth of the latitude range inside the box.
    pub fn new(domain: DomainBox) -> Result<Self> {
        if !(domain.lon_min < domain.lon_max && domain.lat_min < domain.lat_max) {
            return Err(Error::invalid("domain box must have positive extent"));
        }
        if domain.lat_min < -89.0 || domain.lat_max > 89.0 {
            return Err(Error::invalid("domain box must avoid the poles"));
        }
        let span = domain.lat_max - domain.lat_min;
        let phi1 = (domain.lat_min + span / 6.0).to_radians();
        let phi2 = (domain.lat_max - span / 6.0).to_radians();
        let n = 0.5 * (phi1.sin() + phi2.sin());
        if n.abs() < 1e-6 {
            return Err(Error::invalid(
                "domain box straddles the equator symmetrically; conic projection undefined",
            ));
        }
        let c = phi1.cos().powi(2) + 2.0 * n * phi1.sin();
        let (lon0, lat0) = domain.center();
        let rho0 = EARTH_RADIUS_KM * (c - 2.0 * n * lat0.to_radians().sin()).sqrt() / n;
        Ok(Projection {
            domain,
            lon0,
            n,
            c,
            rho0,
        })
    }

    pub fn project(&self, lon: f64, lat: f64) -> Result<Point> {
        if !self.domain.contains(lon, lat) {
            return Err(Error::OutOfDomain { lon, lat });
        }
        Ok(self.project_unchecked(lon, lat))
    }

    pub fn project_unchecked(&self, lon: f64, lat: f64) -> Point {
        let rho = EARTH_RADIUS_KM * (self.c - 2.0 * self.n * lat.to_radians().sin()).sqrt() / self.n;
        let theta = self.n * (lon - self.lon0).to_radians();
        [rho * theta.sin(), self.rho0 - rho * theta.cos()]
    }

    pub fn inverse(&self, p: Point) -> (f64, f64) {
        let [x, y] = p;
        let dy = self.rho0 - y;
        let sign = self.n.signum();
        let rho = sign * (x * x + dy * dy).sqrt();
        let theta = (sign * x).atan2(sign * dy);
        let s = (self.c - (rho * self.n / EARTH_RADIUS_KM).powi(2)) / (2.0 * self.n);
        let lat = s.clamp(-1.0, 1.0).asin().to_degrees();
        let lon = self.lon0 + (theta / self.n).to_degrees();
        (lon, lat)
    }
}

/// Great-circle distance in km.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proj() -> Projection {
        Projection::new(DomainBox::NORTHEAST_US).unwrap()
    }

    #[test]
    fn origin_maps_to_origin() {
        let p = proj();
        let (lon, lat) = DomainBox::NORTHEAST_US.center();
        let xy = p.project(lon, lat).unwrap();
        assert!(xy[0].abs() < 1e-9 && xy[1].abs() < 1e-9);
    }

    #[test]
    fn distances_track_great_circle() {
        let p = proj();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let lon: f64 = rng.random_range(-83.0..-68.0);
            let lat: f64 = rng.random_range(37.0..47.0);
            let bearing: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            // Destination 100 km away along the bearing (spherical formula).
            let d = 100.0 / EARTH_RADIUS_KM;
            let (p1, l1) = (lat.to_radians(), lon.to_radians());
            let p2 = (p1.sin() * d.cos() + p1.cos() * d.sin() * bearing.cos()).asin();
            let l2 = l1
                + (bearing.sin() * d.sin() * p1.cos()).atan2(d.cos() - p1.sin() * p2.sin());
            let (lon2, lat2) = (l2.to_degrees(), p2.to_degrees());
            assert!((haversine_km(lon, lat, lon2, lat2) - 100.0).abs() < 1e-6);
            let a = p.project(lon, lat).unwrap();
            let b = p.project(lon2, lat2).unwrap();
            let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((e - 100.0).abs() < 1.0, "euclidean {e}");
        }
    }

    #[test]
    fn inverse_round_trips() {
        let p = proj();
        for &(lon, lat) in &[(-84.9, 36.1), (-70.0, 42.3), (-66.0, 48.0), (-75.5, 40.0)] {
            let xy = p.project(lon, lat).unwrap();
            let (lo, la) = p.inverse(xy);
            assert!((lo - lon).abs() < 1e-9 && (la - lat).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_box_is_rejected() {
        assert!(matches!(proj().project(-90.0, 40.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn injective_on_grid() {
        let p = proj();
        let mut seen = std::collections::HashSet::new();
        // 0.01 degree grid over a 3 x 3 degree sub-box.
        for i in 0..300 {
            for j in 0..300 {
                let xy = p.project(-80.0 + i as f64 * 0.01, 40.0 + j as f64 * 0.01).unwrap();
                assert!(seen.insert((xy[0].to_bits(), xy[1].to_bits())));
            }
        }
    }
}
