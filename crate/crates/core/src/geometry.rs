//! Spatial coordinates, distance metrics, neighbor ordering and convex-hull
//! filtering of prediction grids.
//!
//! Points are stored twice: as given (planar `(x, y)` or `(lon, lat)` in
//! degrees) and embedded in R³. In chordal mode the embedding is the unit
//! sphere, so the chordal distance is the Euclidean distance between embedded
//! points. Every distance in this module goes through [`embed`] and
//! [`embedded_distance`], which keeps the exhaustive and bucketed neighbor
//! searches bit-for-bit consistent.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A location as supplied by the user.
pub type Point = [f64; 2];

/// Distances at or below this are treated as coincident locations.
pub const COINCIDENCE_TOL: f64 = 1e-12;

/// Above this many locations, neighbor screening switches from an exhaustive
/// scan to a bucket grid.
pub const EXHAUSTIVE_SCAN_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Straight-line distance between points on the unit sphere; coordinates
    /// are `(lon, lat)` in degrees.
    Chordal,
}

/// Checks that `p` is finite and, for chordal distance, a valid (lon, lat).
pub fn validate(p: Point, metric: Metric) -> Result<()> {
    if !p[0].is_finite() || !p[1].is_finite() {
        return Err(Error::Domain(format!("non-finite point ({}, {})", p[0], p[1])));
    }
    if metric == Metric::Chordal {
        let (lon, lat) = (p[0], p[1]);
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Domain(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..360.0).contains(&lon) {
            return Err(Error::Domain(format!("longitude {lon} outside [-180, 360)")));
        }
    }
    Ok(())
}

/// Maps a validated point into R³.
pub fn embed(p: Point, metric: Metric) -> [f64; 3] {
    match metric {
        Metric::Euclidean => [p[0], p[1], 0.0],
        Metric::Chordal => {
            let (lon, lat) = (p[0].to_radians(), p[1].to_radians());
            [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
        }
    }
}

#[inline]
pub fn embedded_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance between two points under `metric`.
pub fn distance(a: Point, b: Point, metric: Metric) -> Result<f64> {
    validate(a, metric)?;
    validate(b, metric)?;
    Ok(embedded_distance(&embed(a, metric), &embed(b, metric)))
}

/// Ordered spatial coordinates with a distance metric.
#[derive(Debug, Clone)]
pub struct LocationSet {
    coords: Vec<Point>,
    embedded: Vec<[f64; 3]>,
    metric: Metric,
}

impl LocationSet {
    /// Validates the coordinates and rejects coincident locations.
    pub fn new(coords: Vec<Point>, metric: Metric) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Argument("location set is empty".into()));
        }
        for &p in &coords {
            validate(p, metric)?;
        }
        let embedded: Vec<[f64; 3]> = coords.iter().map(|&p| embed(p, metric)).collect();
        if let Some((i, j)) = find_duplicate(&embedded) {
            return Err(Error::DuplicateLocation(i, j));
        }
        Ok(Self {
            coords,
            embedded,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> Point {
        self.coords[i]
    }

    /// Distance between stored locations `i` and `j`.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        embedded_distance(&self.embedded[i], &self.embedded[j])
    }

    /// Distances from `s0` to every location, in storage order.
    pub fn distances_to(&self, s0: Point) -> Result<Vec<f64>> {
        validate(s0, self.metric)?;
        let e0 = embed(s0, self.metric);
        Ok(self
            .embedded
            .iter()
            .map(|e| embedded_distance(e, &e0))
            .collect())
    }

    /// New set holding the locations at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> LocationSet {
        LocationSet {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            embedded: idx.iter().map(|&i| self.embedded[i]).collect(),
            metric: self.metric,
        }
    }

    /// Index of a stored location within [`COINCIDENCE_TOL`] of `s0`, if any.
    pub fn coincident_with(&self, s0: Point) -> Result<Option<usize>> {
        let d = self.distances_to(s0)?;
        Ok(d.iter()
            .enumerate()
            .filter(|(_, &x)| x <= COINCIDENCE_TOL)
            .min_by(|a, b| cmp_dist_index((*a.1, a.0), (*b.1, b.0)))
            .map(|(i, _)| i))
    }

    /// Axis-aligned bounding box `(min, max)` of the raw coordinates.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.coords {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

fn find_duplicate(pts: &[[f64; 3]]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if pts[j][0] - pts[i][0] > COINCIDENCE_TOL {
                break;
            }
            if embedded_distance(&pts[i], &pts[j]) <= COINCIDENCE_TOL {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

#[inline]
fn cmp_dist_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Locations sorted by increasing distance to a target point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborOrdering {
    pub target: Point,
    /// Indices into the location set, nearest first. Ties keep the original
    /// index order.
    pub permutation: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborOrdering {
    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> NeighborOrdering {
        let k = k.min(self.len());
        NeighborOrdering {
            target: self.target,
            permutation: self.permutation[..k].to_vec(),
            distances: self.distances[..k].to_vec(),
        }
    }
}

pub fn order_by_distance(locs: &LocationSet, s0: Point) -> Result<NeighborOrdering> {
    let d = locs.distances_to(s0)?;
    let mut permutation: Vec<usize> = (0..locs.len()).collect();
    permutation.sort_by(|&a, &b| cmp_dist_index((d[a], a), (d[b], b)));
    let distances = permutation.iter().map(|&i| d[i]).collect();
    Ok(NeighborOrdering {
        target: s0,
        permutation,
        distances,
    })
}

/// Indices of the `k` nearest locations to `s0`, nearest first.
pub fn knn_candidates(locs: &LocationSet, s0: Point, k: usize) -> Result<Vec<usize>> {
    Ok(NeighborIndex::new(locs).knn(s0, k)?.permutation)
}

/// Reusable nearest-neighbor index.
///
/// Small sets are scanned exhaustively; above [`EXHAUSTIVE_SCAN_LIMIT`]
/// locations are bucketed into a uniform grid in the embedding space and
/// searched ring by ring. Both paths order by `(distance, index)` and return
/// identical results.
pub struct NeighborIndex<'a> {
    locs: &'a LocationSet,
    grid: Option<BucketGrid>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(locs: &'a LocationSet) -> Self {
        let grid = (locs.len() > EXHAUSTIVE_SCAN_LIMIT).then(|| BucketGrid::build(locs));
        Self { locs, grid }
    }

    /// Forces the bucket-grid path regardless of size.
    pub fn with_bucket_grid(locs: &'a LocationSet) -> Self {
        Self {
            locs,
            grid: Some(BucketGrid::build(locs)),
        }
    }

    pub fn locations(&self) -> &LocationSet {
        self.locs
    }

    pub fn knn(&self, s0: Point, k: usize) -> Result<NeighborOrdering> {
        let n = self.locs.len();
        if k == 0 {
            return Err(Error::Argument("number of neighbors must be positive".into()));
        }
        if k > n {
            return Err(Error::Argument(format!(
                "requested {k} neighbors but only {n} locations are available"
            )));
        }
        validate(s0, self.locs.metric)?;
        let e0 = embed(s0, self.locs.metric);
        let mut cand: Vec<(f64, usize)> = match &self.grid {
            None => self
                .locs
                .embedded
                .iter()
                .enumerate()
                .map(|(i, e)| (embedded_distance(e, &e0), i))
                .collect(),
            Some(grid) => grid.candidates(self.locs, &e0, k),
        };
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, |a, b| cmp_dist_index(*a, *b));
            cand.truncate(k);
        }
        cand.sort_by(|a, b| cmp_dist_index(*a, *b));
        Ok(NeighborOrdering {
            target: s0,
            permutation: cand.iter().map(|c| c.1).collect(),
            distances: cand.iter().map(|c| c.0).collect(),
        })
    }
}

struct BucketGrid {
    origin: [f64; 3],
    cell: f64,
    lo: [i64; 3],
    hi: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl BucketGrid {
    fn build(locs: &LocationSet) -> Self {
        let mut mn = [f64::INFINITY; 3];
        let mut mx = [f64::NEG_INFINITY; 3];
        for e in &locs.embedded {
            for k in 0..3 {
                mn[k] = mn[k].min(e[k]);
                mx[k] = mx[k].max(e[k]);
            }
        }
        let mut ext: Vec<f64> = (0..3).map(|k| mx[k] - mn[k]).collect();
        ext.sort_by(|a, b| b.total_cmp(a));
        // Points live on a surface (plane or sphere): size cells by the two
        // largest extents so each holds a handful of points.
        let area = (ext[0] * ext[1]).max(ext[0] * ext[0] * 1e-8).max(f64::MIN_POSITIVE);
        let cell = (2.0 * area / locs.len() as f64)
            .sqrt()
            .max(ext[0] * 1e-6)
            .max(f64::MIN_POSITIVE);
        let mut grid = BucketGrid {
            origin: mn,
            cell,
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
            buckets: HashMap::new(),
        };
        for (i, e) in locs.embedded.iter().enumerate() {
            let c = grid.cell_of(e);
            for k in 0..3 {
                grid.lo[k] = grid.lo[k].min(c[k]);
                grid.hi[k] = grid.hi[k].max(c[k]);
            }
            grid.buckets.entry(c).or_default().push(i);
        }
        grid
    }

    fn cell_of(&self, e: &[f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for k in 0..3 {
            c[k] = ((e[k] - self.origin[k]) / self.cell).floor() as i64;
        }
        c
    }

    /// Points guaranteed to include the `k` nearest (with ties) to `e0`.
    fn candidates(&self, locs: &LocationSet, e0: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        let c0 = self.cell_of(e0);
        let max_ring = (0..3)
            .map(|d| (c0[d] - self.lo[d]).abs().max((self.hi[d] - c0[d]).abs()))
            .max()
            .unwrap_or(0);
        let mut out: Vec<(f64, usize)> = Vec::new();
        let mut kth = Vec::new();
        for r in 0..=max_ring {
            self.visit_ring(c0, r, |idx| {
                for &i in idx {
                    out.push((embedded_distance(&locs.embedded[i], e0), i));
                }
            });
            if out.len() >= k {
                // Anything outside ring r is at least r cells away.
                kth.clear();
                kth.extend(out.iter().map(|c| c.0));
                kth.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                if kth[k - 1] < r as f64 * self.cell {
                    return out;
                }
            }
        }
        out
    }

    fn visit_ring<F: FnMut(&[usize])>(&self, c0: [i64; 3], r: i64, mut f: F) {
        let range = |d: usize| -> (i64, i64) {
            ((c0[d] - r).max(self.lo[d]), (c0[d] + r).min(self.hi[d]))
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let ring = (x - c0[0]).abs().max((y - c0[1]).abs()).max((z - c0[2]).abs());
                    if ring != r {
                        continue;
                    }
                    if let Some(v) = self.buckets.get(&[x, y, z]) {
                        f(v);
                    }
                }
            }
        }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull vertices in counter-clockwise order (monotone chain).
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    Ok(hull)
}

/// Keeps grid points inside or on the convex hull of `locs`.
pub fn convex_hull_filter(grid: &[Point], locs: &LocationSet) -> Result<Vec<Point>> {
    if locs.metric() != Metric::Euclidean {
        return Err(Error::Argument(
            "convex-hull filtering requires planar coordinates".into(),
        ));
    }
    let hull = convex_hull(locs.coords())?;
    let (lo, hi) = locs.bounding_box();
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let tol = 1e-12 * scale * scale;
    Ok(grid
        .iter()
        .copied()
        .filter(|&g| inside_convex(&hull, g, tol))
        .collect())
}

fn inside_convex(hull: &[Point], p: Point, tol: f64) -> bool {
    let n = hull.len();
    (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= -tol)
}
