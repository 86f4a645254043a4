//! CSV datasets, prediction grids and result writers.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_hull_filter, validate, LocationSet, Metric, Point};
use crate::workflow::PredictionRow;

/// Which CSV columns hold coordinates, values and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSpec {
    pub x: String,
    pub y: String,
    pub value: String,
    pub covariates: Vec<String>,
    pub delimiter: char,
    pub metric: Metric,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            x: "x".into(),
            y: "y".into(),
            value: "z".into(),
            covariates: vec![],
            delimiter: ',',
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub locations: LocationSet,
    pub values: Vec<f64>,
    pub covariates: Vec<(String, Vec<f64>)>,
    pub units: Option<String>,
    /// Rows skipped because the value was missing.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.locations.metric()
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn column(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
}

/// Reads a headered CSV. Rows with a missing value are dropped with a
/// warning; any other malformed field is an error naming its line.
pub fn load_csv(path: &Path, spec: &ColumnSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, &path.display().to_string(), spec)
}

pub fn read_csv<R: std::io::Read>(input: R, name: &str, spec: &ColumnSpec) -> Result<Dataset> {
    if !spec.delimiter.is_ascii() {
        return Err(Error::Argument(format!("delimiter {:?} is not ASCII", spec.delimiter)));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let ix = column(&headers, &spec.x, name)?;
    let iy = column(&headers, &spec.y, name)?;
    let iz = column(&headers, &spec.value, name)?;
    let icov: Vec<usize> = spec
        .covariates
        .iter()
        .map(|c| column(&headers, c, name))
        .collect::<Result<_>>()?;

    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut covs: Vec<Vec<f64>> = vec![vec![]; icov.len()];
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse { path: name.into(), line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, label: &str| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: name.into(),
                line,
                message: format!("cannot parse {label} `{s}`"),
            })
        };
        if is_missing(rec.get(iz).unwrap_or("")) {
            dropped += 1;
            continue;
        }
        let p = [field(ix, &spec.x)?, field(iy, &spec.y)?];
        validate(p, spec.metric).map_err(|e| Error::Parse {
            path: name.into(),
            line,
            message: e.to_string(),
        })?;
        coords.push(p);
        values.push(field(iz, &spec.value)?);
        for (k, &i) in icov.iter().enumerate() {
            covs[k].push(field(i, &spec.covariates[k])?);
        }
    }
    if dropped > 0 {
        warn!("{name}: dropped {dropped} rows with a missing `{}`", spec.value);
    }
    if values.is_empty() {
        return Err(Error::Empty(format!("{name} has no usable rows")));
    }
    Ok(Dataset {
        name: name.into(),
        locations: LocationSet::new(coords, spec.metric)?,
        values,
        covariates: spec.covariates.iter().cloned().zip(covs).collect(),
        units: None,
        dropped,
    })
}

pub fn save_csv(ds: &Dataset, path: &Path, spec: &ColumnSpec) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::WriterBuilder::new().delimiter(spec.delimiter as u8).from_writer(file);
    let mut header = vec![spec.x.clone(), spec.y.clone(), spec.value.clone()];
    header.extend(ds.covariates.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let p = ds.locations.point(i);
        let mut row = vec![format!("{}", p[0]), format!("{}", p[1]), format!("{}", ds.values[i])];
        row.extend(ds.covariates.iter().map(|(_, v)| format!("{}", v[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Regular nx × ny grid over the box, edges included, x varying fastest.
/// With `hull` set, only points inside its convex hull are kept.
pub fn make_grid(lo: Point, hi: Point, nx: usize, ny: usize, hull: Option<&LocationSet>) -> Result<Vec<Point>> {
    if nx == 0 || ny == 0 {
        return Err(Error::Argument("grid resolution must be positive".into()));
    }
    if !(hi[0] >= lo[0] && hi[1] >= lo[1]) {
        return Err(Error::Argument("grid box is inverted".into()));
    }
    let at = |lo: f64, hi: f64, n: usize, i: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut grid = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            grid.push([at(lo[0], hi[0], nx, i), at(lo[1], hi[1], ny, j)]);
        }
    }
    if let Some(locs) = hull {
        grid = convex_hull_filter(&grid, locs)?;
    }
    if grid.is_empty() {
        return Err(Error::Empty("prediction grid is empty".into()));
    }
    Ok(grid)
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let name = path.display().to_string();
    let ix = column(&headers, "x", &name)?;
    let iy = column(&headers, "y", &name)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| -> Result<f64> {
            rec.get(i).unwrap_or("").parse().map_err(|_| Error::Parse {
                path: name.clone(),
                line,
                message: "cannot parse grid coordinate".into(),
            })
        };
        out.push([get(ix)?, get(iy)?]);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{name} has no grid points")));
    }
    Ok(out)
}

pub fn write_grid_csv<W: Write>(out: W, grid: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y"])?;
    for p in grid {
        w.write_record(&[format!("{}", p[0]), format!("{}", p[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: x, y, prediction, variance, nnz, eta_star, [seconds,] error.
pub fn write_predictions_csv<W: Write>(out: W, rows: &[PredictionRow], timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x", "y", "prediction", "variance", "nnz", "eta_star"];
    if timings {
        header.push("seconds");
    }
    header.push("error");
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for r in rows {
        let mut row = vec![
            format!("{}", r.x),
            format!("{}", r.y),
            format!("{}", r.prediction),
            format!("{}", r.variance),
            r.nnz.to_string(),
            opt(r.eta_star),
        ];
        if timings {
            row.push(r.seconds.map_or(String::new(), |s| format!("{s:.6}")));
        }
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
