//! Mapping a distributed pressure-sensor array onto contact keypoints.
//!
//! Sensors and keypoints live on a flattened 2-D hand chart split into a
//! grid of square regions. A keypoint reads the bilinear interpolation of
//! the sensors in its own region, falling back to the nearest sensor when no
//! sensor rectangle encloses it.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow2tactile::binarize_forces;
use crate::perception::TactileFrame;

/// Upper end of the sensor range, newtons.
pub const MAX_READING: f64 = 5.0;
pub const SHADOW_SENSORS: usize = 148;
pub const SHADOW_PALM_SENSORS: usize = 66;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionGrid {
    /// Lower-left corner of region 0.
    pub origin: [f64; 2],
    pub side: f64,
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.side > 0.0) || self.rows == 0 || self.cols == 0 || self.origin.iter().any(|v| !v.is_finite()) {
            return Err(invalid("region grid needs a positive side and at least one row and column"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower-left corner of region `id`; regions are numbered row-major from
    /// the bottom-left.
    pub fn square_origin(&self, id: usize) -> [f64; 2] {
        let (r, c) = (id / self.cols, id % self.cols);
        [self.origin[0] + c as f64 * self.side, self.origin[1] + r as f64 * self.side]
    }

    /// Half-open containment `[o, o + side)` in both axes.
    pub fn contains(&self, id: usize, p: [f64; 2]) -> bool {
        let o = self.square_origin(id);
        (0..2).all(|k| p[k] >= o[k] && p[k] < o[k] + self.side)
    }
}

/// Region holding `p`.
pub fn assign_region(grid: &RegionGrid, p: [f64; 2]) -> Result<usize> {
    let outside = || Error::OutOfDomain(format!("chart position {p:?} is outside the region grid"));
    if p.iter().any(|v| !v.is_finite()) {
        return Err(outside());
    }
    let guess = |k: usize, n: usize| -> Option<usize> {
        let f = ((p[k] - grid.origin[k]) / grid.side).floor();
        (f >= -1.0 && f <= n as f64).then(|| f.max(0.0) as usize)
    };
    let (Some(c), Some(r)) = (guess(0, grid.cols), guess(1, grid.rows)) else {
        return Err(outside());
    };
    // The division can land one cell off near an edge; settle it with the
    // exact containment test.
    for dr in [0i64, -1, 1] {
        for dc in [0i64, -1, 1] {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= grid.rows as i64 || cc >= grid.cols as i64 {
                continue;
            }
            let id = rr as usize * grid.cols + cc as usize;
            if grid.contains(id, p) {
                return Ok(id);
            }
        }
    }
    Err(outside())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpPath {
    Node,
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub path: InterpPath,
}

/// Reading at `query` from sensors `(position, reading)` of one region.
///
/// A query on a sensor returns that sensor. Otherwise the smallest
/// axis-aligned rectangle with sensors on all four corners that encloses the
/// query is interpolated bilinearly; without one, the nearest sensor wins.
pub fn interpolate_region_bilinear(sensors: &[([f64; 2], f64)], query: [f64; 2]) -> Result<Interpolated> {
    if sensors.is_empty() {
        return Err(invalid("no sensors to interpolate from"));
    }
    if let Some((_, v)) = sensors.iter().find(|(p, _)| *p == query) {
        return Ok(Interpolated { value: *v, path: InterpPath::Node });
    }
    let at = |x: f64, y: f64| sensors.iter().find(|(p, _)| p[0] == x && p[1] == y).map(|s| s.1);
    let mut best: Option<(f64, f64)> = None;
    for (a, va) in sensors {
        if a[0] > query[0] || a[1] > query[1] {
            continue;
        }
        for (b, vb) in sensors {
            if b[0] < query[0] || b[1] < query[1] || b[0] <= a[0] || b[1] <= a[1] {
                continue;
            }
            let area = (b[0] - a[0]) * (b[1] - a[1]);
            if best.is_some_and(|(ba, _)| ba <= area) {
                continue;
            }
            let (Some(v_rb), Some(v_lt)) = (at(b[0], a[1]), at(a[0], b[1])) else {
                continue;
            };
            let u = (query[0] - a[0]) / (b[0] - a[0]);
            let w = (query[1] - a[1]) / (b[1] - a[1]);
            let value = (1.0 - u) * (1.0 - w) * va + u * (1.0 - w) * v_rb + (1.0 - u) * w * v_lt + u * w * vb;
            best = Some((area, value));
        }
    }
    if let Some((_, value)) = best {
        return Ok(Interpolated { value, path: InterpPath::Bilinear });
    }
    let d2 = |p: &[f64; 2]| (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2);
    let nearest = sensors
        .iter()
        .min_by(|a, b| d2(&a.0).total_cmp(&d2(&b.0)))
        .expect("non-empty");
    Ok(Interpolated { value: nearest.1, path: InterpPath::Nearest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub region: usize,
}

impl Sensor {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorLayout {
    pub sensors: Vec<Sensor>,
    pub grid: RegionGrid,
}

impl SensorLayout {
    /// Checks ids, regions and that every region owns a sensor.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let mut seen = vec![false; self.grid.len()];
        for (i, s) in self.sensors.iter().enumerate() {
            if s.id != i {
                return Err(invalid(format!("sensor {i} carries id {}", s.id)));
            }
            let r = assign_region(&self.grid, s.position())?;
            if r != s.region {
                return Err(invalid(format!("sensor {i} is labelled region {} but lies in {r}", s.region)));
            }
            seen[r] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("region {r} has no sensors")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layout: SensorLayout = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn region_sensors(&self, region: usize, readings: &[f64]) -> Vec<([f64; 2], f64)> {
        self.sensors.iter().filter(|s| s.region == region).map(|s| (s.position(), readings[s.id])).collect()
    }
}

/// Representative 148-sensor chart: 66 sensors on the palm (bottom two rows
/// of regions) and 82 on the fingers (top two rows), each region carrying a
/// regular sub-grid.
pub fn shadow_sensor_layout() -> SensorLayout {
    let grid = RegionGrid { origin: [0.0, 0.0], side: 0.03, rows: 4, cols: 4 };
    // (columns, rows) of each region's sub-grid, region-major.
    let mut shapes = Vec::new();
    shapes.extend([(3, 3); 6]);
    shapes.extend([(2, 3); 2]);
    shapes.extend([(2, 5); 7]);
    shapes.push((3, 4));
    let mut sensors = Vec::new();
    for (region, &(nx, ny)) in shapes.iter().enumerate() {
        let o = grid.square_origin(region);
        let at = |i: usize, n: usize| 0.1 + 0.8 * i as f64 / (n - 1) as f64;
        for j in 0..ny {
            for i in 0..nx {
                sensors.push(Sensor {
                    id: sensors.len(),
                    x: o[0] + grid.side * at(i, nx),
                    y: o[1] + grid.side * at(j, ny),
                    region,
                });
            }
        }
    }
    SensorLayout { sensors, grid }
}

/// Chart positions for the 456-keypoint hand layout: the palm grid over the
/// bottom half of the chart, then one 3x4 patch per finger link in five
/// finger strips over the top half.
pub fn shadow_keypoint_chart() -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(456);
    // Finger links in layout order: four fingers, then the thumb.
    let links_per_finger = [3usize, 3, 3, 3, 2];
    for (f, &links) in links_per_finger.iter().enumerate() {
        let x0 = 0.12 * f as f64 / 5.0;
        for l in 0..links {
            let y0 = 0.06 + 0.06 * l as f64 / links as f64;
            let h = 0.06 / links as f64;
            for i in 0..crate::flow2tactile::SHADOW_ALONG {
                for j in 0..crate::flow2tactile::SHADOW_AROUND {
                    out.push([
                        x0 + 0.024 * (j as f64 + 0.5) / crate::flow2tactile::SHADOW_AROUND as f64,
                        y0 + h * (i as f64 + 0.5) / crate::flow2tactile::SHADOW_ALONG as f64,
                    ]);
                }
            }
        }
    }
    let (rows, cols) = (crate::flow2tactile::SHADOW_PALM_ROWS, crate::flow2tactile::SHADOW_PALM_COLS);
    for r in 0..rows {
        for c in 0..cols {
            out.push([0.12 * (c as f64 + 0.5) / cols as f64, 0.06 * (r as f64 + 0.5) / rows as f64]);
        }
    }
    out
}

fn check_readings(layout: &SensorLayout, readings: &[f64]) -> Result<()> {
    if readings.len() != layout.sensors.len() {
        return Err(invalid(format!("{} readings for {} sensors", readings.len(), layout.sensors.len())));
    }
    if let Some(r) = readings.iter().find(|r| !(0.0..=MAX_READING).contains(*r)) {
        return Err(invalid(format!("reading {r} outside [0, {MAX_READING}] N")));
    }
    Ok(())
}

/// Interpolated force at every keypoint, before thresholding.
pub fn keypoint_forces(layout: &SensorLayout, keypoint_chart: &[[f64; 2]], readings: &[f64]) -> Result<Vec<Interpolated>> {
    check_readings(layout, readings)?;
    keypoint_chart
        .iter()
        .map(|&q| {
            let region = assign_region(&layout.grid, q)?;
            interpolate_region_bilinear(&layout.region_sensors(region, readings), q)
        })
        .collect()
}

pub fn sensors_to_keypoints(
    layout: &SensorLayout,
    keypoint_chart: &[[f64; 2]],
    readings: &[f64],
    tau: f64,
) -> Result<TactileFrame> {
    let forces: Vec<f64> = keypoint_forces(layout, keypoint_chart, readings)?.iter().map(|v| v.value).collect();
    binarize_forces(&forces, tau)
}

/// One row of a recorded sensor stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSample {
    pub timestamp: f64,
    pub readings: Vec<f64>,
}

/// Reads headerless `timestamp, r_0, ..., r_{n-1}` rows.
pub fn read_sensor_stream<R: Read>(input: R, n_sensors: usize) -> Result<Vec<SensorSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n_sensors + 1 {
            return Err(invalid(format!("row {line} has {} fields, expected {}", rec.len(), n_sensors + 1)));
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| invalid(format!("row {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(SensorSample { timestamp: vals[0], readings: vals[1..].to_vec() });
    }
    Ok(out)
}
