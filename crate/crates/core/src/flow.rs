//! Check-in ingestion and higher-order mobility flows.
//!
//! Raw records are grouped into per-user trajectories, routes between
//! consecutive points are approximated by straight segments, and each
//! trajectory is expanded into the ordered sequence of hexagonal cells it
//! traverses. Road-network routing and map matching are deliberately out of
//! scope; `source_kind` records that flows were derived by interpolation.

use crate::error::{Error, Result};
use crate::hexgrid::{point_to_cell, project, CellId, HexGridConfig, LocalPoint};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Default trajectory split gap for sparse check-in data: 6 hours.
pub const DEFAULT_CHECKIN_GAP_S: i64 = 6 * 3600;
/// Default trajectory split gap for continuous GPS data: 10 minutes.
pub const DEFAULT_CONTINUOUS_GAP_S: i64 = 600;
/// Trajectories shorter than this are dropped.
pub const DEFAULT_MIN_LEN: usize = 3;

/// One raw check-in or GPS fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInRecord {
    pub user_id: String,
    /// May be empty for continuous data.
    pub location_id: String,
    /// Seconds since epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Time-ordered run of one user's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub user_id: String,
    pub records: Vec<CheckInRecord>,
}

impl Trajectory {
    pub fn new(trajectory_id: String, user_id: String, records: Vec<CheckInRecord>) -> Result<Trajectory> {
        if records.is_empty() {
            return Err(Error::EmptyTrajectory(trajectory_id));
        }
        for w in records.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::Format {
                    path: trajectory_id.clone(),
                    details: "records not sorted by timestamp".into(),
                });
            }
        }
        if records.iter().any(|r| r.user_id != user_id) {
            return Err(Error::Format {
                path: trajectory_id.clone(),
                details: "records from multiple users".into(),
            });
        }
        Ok(Trajectory {
            trajectory_id,
            user_id,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// How a flow's cell sequence was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    CheckinInterpolated,
    Continuous,
}

/// A trajectory rewritten as the cells it traverses, consecutive duplicates
/// removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityFlow {
    pub trajectory_id: String,
    pub user_id: String,
    pub cells: Vec<CellId>,
    pub source_kind: SourceKind,
}

/// User-by-location and user-by-cell interaction sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub n_users: usize,
    pub n_locations: usize,
    pub n_cells: usize,
    pub loc_matrix_sparsity: f64,
    pub cell_matrix_sparsity: f64,
}

/// Column names for [`load_checkins`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub user_id: String,
    pub location_id: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            user_id: "user_id".into(),
            location_id: "location_id".into(),
            timestamp: "timestamp".into(),
            lat: "lat".into(),
            lon: "lon".into(),
        }
    }
}

#[derive(Debug)]
pub struct LoadedCheckins {
    pub records: Vec<CheckInRecord>,
    pub malformed_rows: usize,
    pub total_rows: usize,
}

/// Reads a header-first CSV of check-ins. Malformed rows are skipped and
/// counted; more than 50% malformed is treated as a data-quality failure.
pub fn load_checkins(path: &Path, schema: &CsvSchema) -> Result<LoadedCheckins> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(&display, std::io::Error::other(e.to_string())),
            _ => Error::Format {
                path: display.clone(),
                details: e.to_string(),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            path: display.clone(),
            details: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                path: display.clone(),
                column: name.to_string(),
            })
    };
    let c_user = col(&schema.user_id)?;
    let c_loc = col(&schema.location_id)?;
    let c_ts = col(&schema.timestamp)?;
    let c_lat = col(&schema.lat)?;
    let c_lon = col(&schema.lon)?;

    let mut records = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for row in reader.records() {
        total += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        let parsed = (|| -> Option<CheckInRecord> {
            let user_id = row.get(c_user)?.trim().to_string();
            let location_id = row.get(c_loc)?.trim().to_string();
            let timestamp: i64 = row.get(c_ts)?.trim().parse().ok()?;
            let lat: f64 = row.get(c_lat)?.trim().parse().ok()?;
            let lon: f64 = row.get(c_lon)?.trim().parse().ok()?;
            if user_id.is_empty() || timestamp < 0 {
                return None;
            }
            if !(lat.is_finite() && lon.is_finite() && lat.abs() <= 90.0 && lon.abs() <= 180.0) {
                return None;
            }
            Some(CheckInRecord {
                user_id,
                location_id,
                timestamp,
                lat,
                lon,
            })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }

    if total > 0 && malformed * 2 > total {
        return Err(Error::DataQuality {
            path: display,
            malformed,
            total,
        });
    }
    Ok(LoadedCheckins {
        records,
        malformed_rows: malformed,
        total_rows: total,
    })
}

pub fn write_checkins(path: &Path, records: &[CheckInRecord]) -> Result<()> {
    let display = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(&display, std::io::Error::other(e.to_string())))?;
    w.write_record(["user_id", "location_id", "timestamp", "lat", "lon"])
        .map_err(|e| Error::io(&display, std::io::Error::other(e.to_string())))?;
    for r in records {
        w.write_record([
            r.user_id.as_str(),
            r.location_id.as_str(),
            &r.timestamp.to_string(),
            &format!("{:.7}", r.lat),
            &format!("{:.7}", r.lon),
        ])
        .map_err(|e| Error::io(&display, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(&display, e))?;
    Ok(())
}

/// Splits records into per-user trajectories at time gaps larger than
/// `gap_threshold_s`, dropping trajectories shorter than `min_len`.
pub fn build_trajectories(records: &[CheckInRecord], gap_threshold_s: i64, min_len: usize) -> Vec<Trajectory> {
    assert!(gap_threshold_s > 0, "gap threshold must be positive");
    assert!(min_len >= 1, "min_len must be at least 1");

    let mut by_user: BTreeMap<&str, Vec<&CheckInRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r);
    }

    let mut out = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.timestamp);
        let mut seq: u32 = 0;
        let mut current: Vec<CheckInRecord> = Vec::new();
        let flush = |current: &mut Vec<CheckInRecord>, seq: &mut u32, out: &mut Vec<Trajectory>| {
            if current.len() >= min_len {
                let id = format!("{user}:{seq:04}");
                *seq += 1;
                out.push(Trajectory {
                    trajectory_id: id,
                    user_id: user.to_string(),
                    records: std::mem::take(current),
                });
            } else {
                current.clear();
            }
        };
        for r in recs {
            if let Some(last) = current.last() {
                if r.timestamp - last.timestamp > gap_threshold_s {
                    flush(&mut current, &mut seq, &mut out);
                }
            }
            current.push(r.clone());
        }
        flush(&mut current, &mut seq, &mut out);
    }
    out.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    out
}

/// Evenly spaced points along the segment `a..b` with spacing at most
/// `step_m`; both endpoints included. A degenerate segment yields `[a]`.
pub fn interpolate_route(a: LocalPoint, b: LocalPoint, step_m: f64) -> Vec<LocalPoint> {
    assert!(step_m > 0.0, "step must be positive");
    let dist = a.distance(b);
    if dist == 0.0 {
        return vec![a];
    }
    let n = (dist / step_m).ceil() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            LocalPoint::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
        })
        .collect()
}

/// Ordered cells hit when sampling the segment at a quarter edge length,
/// consecutive duplicates removed. First and last cells are the endpoint
/// cells by construction.
pub fn cells_on_segment(a: LocalPoint, b: LocalPoint, cfg: &HexGridConfig) -> Vec<CellId> {
    cells_on_segment_with_step(a, b, cfg, cfg.edge_length_m / 4.0)
}

pub fn cells_on_segment_with_step(a: LocalPoint, b: LocalPoint, cfg: &HexGridConfig, step_m: f64) -> Vec<CellId> {
    let mut cells = Vec::new();
    for p in interpolate_route(a, b, step_m) {
        let c = point_to_cell(p, cfg);
        if cells.last() != Some(&c) {
            cells.push(c);
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// Interpolate straight-line routes between consecutive records and
    /// collect every traversed cell.
    Checkin,
    /// Map each record to its cell directly; no interpolation.
    Continuous,
}

/// Expands one trajectory into its cell sequence.
pub fn to_flow(tr: &Trajectory, cfg: &HexGridConfig, mode: FlowMode) -> Result<MobilityFlow> {
    if tr.records.is_empty() {
        return Err(Error::EmptyTrajectory(tr.trajectory_id.clone()));
    }
    let points: Vec<LocalPoint> = tr
        .records
        .iter()
        .map(|r| project(r.lat, r.lon, cfg))
        .collect::<Result<_>>()?;

    let mut cells: Vec<CellId> = Vec::new();
    let push = |c: CellId, cells: &mut Vec<CellId>| {
        if cells.last() != Some(&c) {
            cells.push(c);
        }
    };
    match mode {
        FlowMode::Checkin => {
            push(point_to_cell(points[0], cfg), &mut cells);
            for w in points.windows(2) {
                for c in cells_on_segment(w[0], w[1], cfg) {
                    push(c, &mut cells);
                }
            }
        }
        FlowMode::Continuous => {
            for p in &points {
                push(point_to_cell(*p, cfg), &mut cells);
            }
        }
    }
    Ok(MobilityFlow {
        trajectory_id: tr.trajectory_id.clone(),
        user_id: tr.user_id.clone(),
        cells,
        source_kind: match mode {
            FlowMode::Checkin => SourceKind::CheckinInterpolated,
            FlowMode::Continuous => SourceKind::Continuous,
        },
    })
}

/// Sparsity of the user-by-location and user-by-cell visit matrices.
pub fn sparsity_report(trajectories: &[Trajectory], cfg: &HexGridConfig) -> Result<SparsityReport> {
    if trajectories.is_empty() {
        return Err(Error::EmptyCorpus("sparsity_report needs trajectories".into()));
    }
    let mut users = BTreeSet::new();
    let mut locations = BTreeSet::new();
    let mut cells = BTreeSet::new();
    let mut user_loc = BTreeSet::new();
    let mut user_cell = BTreeSet::new();

    for tr in trajectories {
        users.insert(tr.user_id.clone());
        for r in &tr.records {
            // Continuous rows carry no POI id; fall back to the raw
            // coordinate so every record names some location.
            let loc = if r.location_id.is_empty() {
                format!("@{:.7},{:.7}", r.lat, r.lon)
            } else {
                r.location_id.clone()
            };
            let cell = point_to_cell(project(r.lat, r.lon, cfg)?, cfg);
            user_loc.insert((tr.user_id.clone(), loc.clone()));
            user_cell.insert((tr.user_id.clone(), cell.key()));
            locations.insert(loc);
            cells.insert(cell.key());
        }
    }

    let sparsity = |nnz: usize, rows: usize, cols: usize| -> f64 {
        let total = rows * cols;
        if total == 0 {
            return 0.0;
        }
        (total - nnz) as f64 / total as f64
    };
    Ok(SparsityReport {
        n_users: users.len(),
        n_locations: locations.len(),
        n_cells: cells.len(),
        loc_matrix_sparsity: sparsity(user_loc.len(), users.len(), locations.len()),
        cell_matrix_sparsity: sparsity(user_cell.len(), users.len(), cells.len()),
    })
}

/// Writes flows as `trajectory_id,user_id,key;key;...`, one line per flow.
pub fn write_flows(path: &Path, flows: &[MobilityFlow]) -> Result<()> {
    let display = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    for flow in flows {
        let keys: Vec<String> = flow.cells.iter().map(|c| c.key().to_string()).collect();
        writeln!(f, "{},{},{}", flow.trajectory_id, flow.user_id, keys.join(";"))
            .map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

/// Reads a flow file written by [`write_flows`]. Source kind is not stored in
/// the file; the caller states it.
pub fn read_flows(path: &Path, source_kind: SourceKind) -> Result<Vec<MobilityFlow>> {
    let display = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut flows = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (tid, uid, cells) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Format {
                    path: display,
                    details: format!("line {}: expected 3 comma-separated fields", lineno + 1),
                })
            }
        };
        let cells: Vec<CellId> = cells
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u64>().map(CellId::from_key).map_err(|_| Error::Format {
                    path: display.clone(),
                    details: format!("line {}: bad cell key `{s}`", lineno + 1),
                })
            })
            .collect::<Result<_>>()?;
        if cells.is_empty() {
            return Err(Error::Format {
                path: display,
                details: format!("line {}: flow has no cells", lineno + 1),
            });
        }
        flows.push(MobilityFlow {
            trajectory_id: tid.to_string(),
            user_id: uid.to_string(),
            cells,
            source_kind,
        });
    }
    Ok(flows)
}

/// Local origin for a record set: centroid of the bounding box.
pub fn bbox_centroid(records: &[CheckInRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus("no records to locate an origin".into()));
    }
    let mut lat_min = f64::INFINITY;
    let mut lat_max = f64::NEG_INFINITY;
    let mut lon_min = f64::INFINITY;
    let mut lon_max = f64::NEG_INFINITY;
    for r in records {
        lat_min = lat_min.min(r.lat);
        lat_max = lat_max.max(r.lat);
        lon_min = lon_min.min(r.lon);
        lon_max = lon_max.max(r.lon);
    }
    Ok(((lat_min + lat_max) / 2.0, (lon_min + lon_max) / 2.0))
}
