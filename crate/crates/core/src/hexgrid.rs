//! Planar hexagonal tessellation with axial coordinates.
//!
//! The grid is pointy-top: a cell's center sits at
//! `x = s*sqrt(3)*(q + r/2)`, `y = s*1.5*r` for edge length `s`.
//! Geographic coordinates are flattened onto a local tangent plane with an
//! equirectangular projection about a per-dataset origin, which keeps the
//! geometry exactly testable for the city-scale windows this crate targets.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mean Earth radius in meters, used by the local projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Half-width of the local-area window around the origin, in degrees.
pub const LOCAL_WINDOW_DEG: f64 = 5.0;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Named grid resolutions with their edge lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Hex6,
    Hex7,
    Hex8,
    Hex9,
    Hex10,
    Custom,
}

impl Resolution {
    /// Edge length in meters for the fixed resolutions; `None` for `Custom`.
    pub fn edge_length_m(self) -> Option<f64> {
        match self {
            Resolution::Hex6 => Some(3725.0),
            Resolution::Hex7 => Some(1406.0),
            Resolution::Hex8 => Some(531.0),
            Resolution::Hex9 => Some(201.0),
            Resolution::Hex10 => Some(76.0),
            Resolution::Custom => None,
        }
    }

    pub fn fixed() -> [Resolution; 5] {
        [
            Resolution::Hex6,
            Resolution::Hex7,
            Resolution::Hex8,
            Resolution::Hex9,
            Resolution::Hex10,
        ]
    }

    pub fn parse(s: &str) -> Result<Resolution> {
        match s.to_ascii_lowercase().as_str() {
            "hex6" => Ok(Resolution::Hex6),
            "hex7" => Ok(Resolution::Hex7),
            "hex8" => Ok(Resolution::Hex8),
            "hex9" => Ok(Resolution::Hex9),
            "hex10" => Ok(Resolution::Hex10),
            "custom" => Ok(Resolution::Custom),
            other => Err(Error::Config(format!("unknown resolution `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resolution::Hex6 => "hex6",
            Resolution::Hex7 => "hex7",
            Resolution::Hex8 => "hex8",
            Resolution::Hex9 => "hex9",
            Resolution::Hex10 => "hex10",
            Resolution::Custom => "custom",
        }
    }
}

/// Tessellation parameters: projection origin plus hexagon edge length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexGridConfig {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub edge_length_m: f64,
    pub resolution: Resolution,
}

impl HexGridConfig {
    /// Grid at one of the named resolutions.
    pub fn new(origin_lat: f64, origin_lon: f64, resolution: Resolution) -> Result<HexGridConfig> {
        let edge = resolution
            .edge_length_m()
            .ok_or_else(|| Error::Config("custom resolution needs an explicit edge length".into()))?;
        let cfg = HexGridConfig {
            origin_lat,
            origin_lon,
            edge_length_m: edge,
            resolution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Grid with an explicit edge length.
    pub fn custom(origin_lat: f64, origin_lon: f64, edge_length_m: f64) -> Result<HexGridConfig> {
        let cfg = HexGridConfig {
            origin_lat,
            origin_lon,
            edge_length_m,
            resolution: Resolution::Custom,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.origin_lat.abs() <= 90.0 && self.origin_lon.abs() <= 180.0) {
            return Err(Error::Coordinate {
                lat: self.origin_lat,
                lon: self.origin_lon,
            });
        }
        if !(self.edge_length_m > 0.0) {
            return Err(Error::Config(format!(
                "edge_length_m must be positive, got {}",
                self.edge_length_m
            )));
        }
        if let Some(table_edge) = self.resolution.edge_length_m() {
            let rel = (self.edge_length_m - table_edge).abs() / table_edge;
            if rel > 1e-3 {
                return Err(Error::Config(format!(
                    "edge length {} disagrees with {} ({} m) by more than 0.1%",
                    self.edge_length_m,
                    self.resolution.name(),
                    table_edge
                )));
            }
        }
        Ok(())
    }
}

/// Axial coordinates of one hexagonal cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub q: i32,
    pub r: i32,
}

impl CellId {
    pub fn new(q: i32, r: i32) -> CellId {
        CellId { q, r }
    }

    /// Packs (q, r) into one 64-bit key; a bijection over the full i32 range.
    pub fn key(self) -> u64 {
        ((self.q as u32 as u64) << 32) | (self.r as u32 as u64)
    }

    pub fn from_key(key: u64) -> CellId {
        CellId {
            q: (key >> 32) as u32 as i32,
            r: key as u32 as i32,
        }
    }
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.q, self.r)
    }
}

/// Point on the local tangent plane, in meters east/north of the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64) -> LocalPoint {
        LocalPoint { x, y }
    }

    pub fn distance(self, other: LocalPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection onto the local plane around the grid origin.
pub fn project(lat: f64, lon: f64, cfg: &HexGridConfig) -> Result<LocalPoint> {
    if !(lat.is_finite() && lon.is_finite() && lat.abs() <= 90.0 && lon.abs() <= 180.0) {
        return Err(Error::Coordinate { lat, lon });
    }
    if (lat - cfg.origin_lat).abs() >= LOCAL_WINDOW_DEG || (lon - cfg.origin_lon).abs() >= LOCAL_WINDOW_DEG {
        return Err(Error::OutOfWindow {
            lat,
            lon,
            origin_lat: cfg.origin_lat,
            origin_lon: cfg.origin_lon,
            window_deg: LOCAL_WINDOW_DEG,
        });
    }
    let x = EARTH_RADIUS_M * cfg.origin_lat.to_radians().cos() * (lon - cfg.origin_lon).to_radians();
    let y = EARTH_RADIUS_M * (lat - cfg.origin_lat).to_radians();
    Ok(LocalPoint { x, y })
}

/// Inverse of [`project`]; used when materializing synthetic corpora.
pub fn unproject(p: LocalPoint, cfg: &HexGridConfig) -> (f64, f64) {
    let lat = cfg.origin_lat + (p.y / EARTH_RADIUS_M).to_degrees();
    let lon = cfg.origin_lon + (p.x / (EARTH_RADIUS_M * cfg.origin_lat.to_radians().cos())).to_degrees();
    (lat, lon)
}

/// Center of a cell on the local plane.
pub fn cell_center(c: CellId, cfg: &HexGridConfig) -> LocalPoint {
    let s = cfg.edge_length_m;
    LocalPoint {
        x: s * SQRT3 * (c.q as f64 + c.r as f64 / 2.0),
        y: s * 1.5 * c.r as f64,
    }
}

/// The hexagon containing `p`. Edge and vertex ties resolve by cube rounding.
pub fn point_to_cell(p: LocalPoint, cfg: &HexGridConfig) -> CellId {
    let s = cfg.edge_length_m;
    let qf = (SQRT3 / 3.0 * p.x - p.y / 3.0) / s;
    let rf = (2.0 / 3.0 * p.y) / s;
    axial_round(qf, rf)
}

// Cube rounding: round each cube coordinate, then repair the one with the
// largest rounding error so the constraint x+y+z=0 holds.
fn axial_round(qf: f64, rf: f64) -> CellId {
    let xf = qf;
    let zf = rf;
    let yf = -xf - zf;

    let mut x = xf.round();
    let y = yf.round();
    let mut z = zf.round();

    let dx = (x - xf).abs();
    let dy = (y - yf).abs();
    let dz = (z - zf).abs();

    if dx > dy && dx > dz {
        x = -y - z;
    } else if dz >= dy {
        z = -x - y;
    }
    // When dy is largest only y needs repair, which q/r do not depend on.
    CellId {
        q: x as i32,
        r: z as i32,
    }
}

/// The six axial neighbor offsets, in fixed order.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// The six neighbors of `c`, in the fixed offset order.
pub fn neighbors(c: CellId) -> [CellId; 6] {
    let mut out = [c; 6];
    for (i, (dq, dr)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        out[i] = CellId::new(c.q + dq, c.r + dr);
    }
    out
}

/// Area of one hexagon in square kilometers: (3*sqrt(3)/2) * edge_km^2.
pub fn cell_area_km2(cfg: &HexGridConfig) -> f64 {
    let edge_km = cfg.edge_length_m / 1000.0;
    1.5 * SQRT3 * edge_km * edge_km
}
