//! Planar geometry used by label generation, inference and scoring.
//!
//! All coordinates are image pixels with x to the right and y downward.
//! Ground-truth polygons follow the paired-vertex convention: a polygon
//! with `2n` vertices lists one long side in reading order in its first `n`
//! vertices and the opposite side in reverse in the last `n`, so vertex `i`
//! faces vertex `2n - 1 - i`.

use geo::{Area, BooleanOps};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest component (in grid cells) that [`mask_to_polygons`] keeps.
pub const MIN_COMPONENT_AREA: usize = 4;

/// Retained height fraction of the positive region.
pub const HEIGHT_SHRINK_RATIO: f64 = 0.2;

/// Retained width fraction of the positive region for quadrilaterals.
pub const QUAD_WIDTH_SHRINK_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Closed polygon, vertices in stored order. The closing edge is implicit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    /// Builds a polygon from a flat `[x0, y0, x1, y1, ...]` list.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::MalformedPolygon(format!(
                "flat coordinate list has odd length {}",
                coords.len()
            )));
        }
        Ok(Self::new(
            coords
                .chunks_exact(2)
                .map(|c| Point::new(c[0], c[1]))
                .collect(),
        ))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn rect(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self::new(vec![
            Point::new(left, top),
            Point::new(right, top),
            Point::new(right, bottom),
            Point::new(left, bottom),
        ])
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Signed shoelace area; positive for clockwise order on screen (y down).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn bounding_box(&self) -> Option<AxisAlignedBox> {
        let first = self.vertices.first()?;
        let mut bb = AxisAlignedBox::new(first.x, first.y, first.x, first.y);
        for p in &self.vertices[1..] {
            bb.left = bb.left.min(p.x);
            bb.top = bb.top.min(p.y);
            bb.right = bb.right.max(p.x);
            bb.bottom = bb.bottom.max(p.y);
        }
        Some(bb)
    }

    pub fn centroid(&self) -> Option<Point> {
        let n = self.vertices.len();
        if n == 0 {
            return None;
        }
        let a = self.signed_area();
        if a.abs() < 1e-12 {
            let sx: f64 = self.vertices.iter().map(|p| p.x).sum();
            let sy: f64 = self.vertices.iter().map(|p| p.y).sum();
            return Some(Point::new(sx / n as f64, sy / n as f64));
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cross = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * cross;
            cy += (p.y + q.y) * cross;
        }
        Some(Point::new(cx / (6.0 * a), cy / (6.0 * a)))
    }

    /// Point-in-polygon test where points on the boundary count as inside.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        if n == 0 {
            return false;
        }
        if n < 3 {
            return (0..n).any(|i| on_segment(p, self.vertices[i], self.vertices[(i + 1) % n]));
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[j];
            if on_segment(p, a, b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon::new(self.vertices.iter().copied().map(f).collect())
    }

    /// Checks the paired-vertex convention and returns the pair count `n`.
    pub fn pair_count(&self) -> Result<usize> {
        let len = self.vertices.len();
        if !len.is_multiple_of(2) {
            return Err(Error::MalformedPolygon(format!(
                "paired polygon needs an even vertex count, got {len}"
            )));
        }
        if len < 4 {
            return Err(Error::MalformedPolygon(format!(
                "paired polygon needs at least 4 vertices, got {len}"
            )));
        }
        Ok(len / 2)
    }

    /// Vertex `i` of the first side and its partner on the opposite side.
    fn pair(&self, i: usize) -> (Point, Point) {
        let len = self.vertices.len();
        (self.vertices[i], self.vertices[len - 1 - i])
    }

    fn to_geo(&self) -> geo::Polygon<f64> {
        let coords: Vec<geo::Coord<f64>> = self
            .vertices
            .iter()
            .map(|p| geo::Coord { x: p.x, y: p.y })
            .collect();
        geo::Polygon::new(geo::LineString::new(coords), vec![])
    }
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let len = a.distance(b);
    let tol = 1e-9 * (1.0 + len);
    if cross.abs() > tol * (1.0 + len) {
        return false;
    }
    p.x >= a.x.min(b.x) - tol
        && p.x <= a.x.max(b.x) + tol
        && p.y >= a.y.min(b.y) - tol
        && p.y <= a.y.max(b.y) + tol
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl AxisAlignedBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    /// Box spanned by `(top, right, bottom, left)` distances around `anchor`.
    pub fn from_distances(anchor: Point, d: [f64; 4]) -> Self {
        Self::new(anchor.x - d[3], anchor.y - d[0], anchor.x + d[1], anchor.y + d[2])
    }

    pub fn width(&self) -> f64 {
        (self.right - self.left).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.bottom - self.top).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.left && p.x <= self.right && p.y >= self.top && p.y <= self.bottom
    }

    pub fn iou(&self, other: &AxisAlignedBox) -> f64 {
        let w = (self.right.min(other.right) - self.left.max(other.left)).max(0.0);
        let h = (self.bottom.min(other.bottom) - self.top.max(other.top)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon::rect(self.left, self.top, self.right, self.bottom)
    }
}

/// Open polyline with cached cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative_length: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::MalformedInput("empty polyline".into()));
        }
        let mut cumulative_length = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative_length.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            cumulative_length.push(acc);
        }
        Ok(Self {
            points,
            cumulative_length,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn cumulative_length(&self) -> &[f64] {
        &self.cumulative_length
    }

    pub fn length(&self) -> f64 {
        *self.cumulative_length.last().unwrap_or(&0.0)
    }

    /// True when the polyline has zero total length.
    pub fn is_degenerate(&self) -> bool {
        self.length() <= 0.0
    }

    /// Point at arc length `s`, clamped to the polyline.
    pub fn point_at(&self, s: f64) -> Point {
        let total = self.length();
        if self.points.len() == 1 || total <= 0.0 {
            return self.points[0];
        }
        let s = s.clamp(0.0, total);
        let seg = match self
            .cumulative_length
            .partition_point(|&c| c <= s)
            .checked_sub(1)
        {
            Some(i) => i.min(self.points.len() - 2),
            None => 0,
        };
        let (c0, c1) = (self.cumulative_length[seg], self.cumulative_length[seg + 1]);
        let t = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.points[seg].lerp(self.points[seg + 1], t)
    }
}

/// Polyline through the midpoints of the paired vertices, in reading order.
pub fn center_line(poly: &Polygon) -> Result<Polyline> {
    let n = poly.pair_count()?;
    let mids = (0..n)
        .map(|i| {
            let (a, b) = poly.pair(i);
            a.midpoint(b)
        })
        .collect();
    Polyline::new(mids)
}

/// Mean distance between paired vertices.
pub fn average_pair_height(poly: &Polygon) -> Result<f64> {
    let n = poly.pair_count()?;
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = poly.pair(i);
            a.distance(b)
        })
        .sum();
    Ok(total / n as f64)
}

/// Retained width fraction of the central quadrilateral for a polygon with
/// `vertex_count` vertices.
pub fn width_shrink_ratio(vertex_count: usize) -> f64 {
    if vertex_count <= 4 {
        QUAD_WIDTH_SHRINK_RATIO
    } else {
        (0.1 * ((vertex_count / 2) as f64 - 1.0)).min(1.0)
    }
}

/// The quadrilateral around the middle of the center axis, as
/// `[top_start, top_end, bottom_end, bottom_start]`.
///
/// With an even pair count this is spanned by the two central pairs. With an
/// odd pair count the middle pair sits on the axis midpoint, so the quad is
/// spanned by virtual pairs half a segment to either side of it.
pub fn central_quad(poly: &Polygon) -> Result<[Point; 4]> {
    let n = poly.pair_count()?;
    let (top_a, bot_a, top_b, bot_b);
    if n % 2 == 0 {
        let (t0, b0) = poly.pair(n / 2 - 1);
        let (t1, b1) = poly.pair(n / 2);
        (top_a, bot_a, top_b, bot_b) = (t0, b0, t1, b1);
    } else {
        let m = n / 2;
        let (tp, bp) = poly.pair(m - 1);
        let (tm, bm) = poly.pair(m);
        let (tn, bn) = poly.pair(m + 1);
        (top_a, bot_a) = (tp.midpoint(tm), bp.midpoint(bm));
        (top_b, bot_b) = (tm.midpoint(tn), bm.midpoint(bn));
    }
    Ok([top_a, top_b, bot_b, bot_a])
}

/// The positive confidence region of a text instance: its central quad
/// shrunk about its own center, keeping [`HEIGHT_SHRINK_RATIO`] of the
/// height and [`width_shrink_ratio`] of the width.
///
/// Degenerate (zero-area) polygons yield an empty polygon.
pub fn shrink_positive_region(poly: &Polygon) -> Result<Polygon> {
    let quad = central_quad(poly)?;
    if poly.area() <= 1e-12 || Polygon::new(quad.to_vec()).area() <= 1e-12 {
        return Ok(Polygon::default());
    }
    let w = width_shrink_ratio(poly.len());
    let h = HEIGHT_SHRINK_RATIO;
    // bilinear patch: u runs along the reading direction, v from top to bottom
    let at = |u: f64, v: f64| {
        let top = quad[0].lerp(quad[1], u);
        let bottom = quad[3].lerp(quad[2], u);
        top.lerp(bottom, v)
    };
    let (u0, u1) = (0.5 - 0.5 * w, 0.5 + 0.5 * w);
    let (v0, v1) = (0.5 - 0.5 * h, 0.5 + 0.5 * h);
    Ok(Polygon::new(vec![
        at(u0, v0),
        at(u1, v0),
        at(u1, v1),
        at(u0, v1),
    ]))
}

/// `k` points evenly spaced by arc length, endpoints included.
///
/// `k == 1` yields the arc-length midpoint; a zero-length line yields `k`
/// copies of its first point.
pub fn uniform_points(line: &Polyline, k: usize) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::MalformedInput("uniform_points needs k >= 1".into()));
    }
    let total = line.length();
    if total <= 0.0 {
        return Ok(vec![line.points()[0]; k]);
    }
    if k == 1 {
        return Ok(vec![line.point_at(0.5 * total)]);
    }
    let step = total / (k - 1) as f64;
    Ok((0..k).map(|i| line.point_at(i as f64 * step)).collect())
}

/// Area of the intersection of two simple polygons.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    if a.vertices.len() < 3 || b.vertices.len() < 3 {
        return 0.0;
    }
    a.to_geo().intersection(&b.to_geo()).unsigned_area()
}

/// Intersection over union of two simple polygons by exact clipping.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 && area_b <= 0.0 {
        return 0.0;
    }
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    if let (Some(ba), Some(bb)) = (a.bounding_box(), b.bounding_box()) {
        if ba.right < bb.left || bb.right < ba.left || ba.bottom < bb.top || bb.bottom < ba.top {
            return 0.0;
        }
    }
    let inter = intersection_area(a, b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Marks every cell whose center `((x + 0.5) * stride, (y + 0.5) * stride)`
/// lies inside `poly` (boundary inclusive).
pub fn rasterize(poly: &Polygon, width: usize, height: usize, stride: f64) -> BinaryGrid {
    let mut grid = BinaryGrid::new(width, height);
    rasterize_into(poly, stride, &mut grid, |cell| *cell = 1);
    grid
}

/// Calls `mark` for every covered cell of `grid`; shared with label
/// generation, which writes owner ids instead of plain ones.
pub(crate) fn rasterize_into<C>(
    poly: &Polygon,
    stride: f64,
    grid: &mut impl GridCells<C>,
    mut mark: impl FnMut(&mut C),
) {
    let Some(bb) = poly.bounding_box() else {
        return;
    };
    let (width, height) = grid.dims();
    if width == 0 || height == 0 {
        return;
    }
    let lo = |v: f64| ((v / stride - 0.5).ceil().max(0.0)) as usize;
    let hi = |v: f64, n: usize| (((v / stride - 0.5).floor()).min(n as f64 - 1.0)) as isize;
    let (x0, x1) = (lo(bb.left), hi(bb.right, width));
    let (y0, y1) = (lo(bb.top), hi(bb.bottom, height));
    if x1 < x0 as isize || y1 < y0 as isize {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let c = Point::new((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            if poly.contains(c) {
                mark(grid.cell_mut(x, y));
            }
        }
    }
}

pub(crate) trait GridCells<C> {
    fn dims(&self) -> (usize, usize);
    fn cell_mut(&mut self, x: usize, y: usize) -> &mut C;
}

impl GridCells<u8> for BinaryGrid {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn cell_mut(&mut self, x: usize, y: usize) -> &mut u8 {
        &mut self.data[y * self.width + x]
    }
}

/// Outer boundaries of the 8-connected foreground components of `mask`, in
/// grid-cell units (cell `(x, y)` spans `[x, x+1] x [y, y+1]`). Components
/// smaller than [`MIN_COMPONENT_AREA`] cells are dropped. Polygons are
/// ordered by decreasing component size, ties by first cell in scan order.
pub fn mask_to_polygons(mask: &BinaryGrid) -> Vec<Polygon> {
    let (labels, sizes) = label_components(mask);
    let mut order: Vec<usize> = (0..sizes.len())
        .filter(|&c| sizes[c] >= MIN_COMPONENT_AREA)
        .collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|c| trace_outer_boundary(&labels, mask.width, mask.height, c as u32 + 1))
        .collect()
}

/// 8-connected component labels (0 = background, components from 1) and
/// per-component sizes.
pub fn label_components(mask: &BinaryGrid) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = ((idx % w) as isize, (idx / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.data[n] != 0 && labels[n] == 0 {
                        labels[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Follows the pixel cracks around component `id`, returning the loop with
/// the largest enclosed area (the outer boundary; the rest are holes).
fn trace_outer_boundary(labels: &[u32], w: usize, h: usize, id: u32) -> Polygon {
    use std::collections::HashMap;

    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[y as usize * w + x as usize] == id
    };
    // Directed cracks, clockwise around each cell on screen.
    let mut edges: Vec<((isize, isize), (isize, isize))> = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(x, y) {
                continue;
            }
            if !inside(x, y - 1) {
                edges.push(((x, y), (x + 1, y)));
            }
            if !inside(x + 1, y) {
                edges.push(((x + 1, y), (x + 1, y + 1)));
            }
            if !inside(x, y + 1) {
                edges.push(((x + 1, y + 1), (x, y + 1)));
            }
            if !inside(x - 1, y) {
                edges.push(((x, y + 1), (x, y)));
            }
        }
    }
    let mut outgoing: HashMap<(isize, isize), Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        outgoing.entry(e.0).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut best: Option<(f64, Vec<Point>)> = None;
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut cur = start;
        loop {
            used[cur] = true;
            let (from, to) = edges[cur];
            ring.push(Point::new(from.0 as f64, from.1 as f64));
            let din = (to.0 - from.0, to.1 - from.1);
            let next = outgoing[&to]
                .iter()
                .copied()
                .min_by_key(|&e| {
                    let (a, b) = edges[e];
                    let dout = (b.0 - a.0, b.1 - a.1);
                    // at a diagonal saddle take the turn that joins the two
                    // 8-connected cells
                    din.0 * dout.1 - din.1 * dout.0
                })
                .expect("every crack endpoint starts another crack");
            if next == start || used[next] {
                break;
            }
            cur = next;
        }
        let poly = Polygon::new(ring);
        let area = poly.area();
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, poly.vertices));
        }
    }
    Polygon::new(simplify_collinear(best.map(|b| b.1).unwrap_or_default()))
}

fn simplify_collinear(pts: Vec<Point>) -> Vec<Point> {
    let n = pts.len();
    if n < 4 {
        return pts;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = pts[(i + n - 1) % n];
        let cur = pts[i];
        let next = pts[(i + 1) % n];
        let cross = (cur.x - prev.x) * (next.y - cur.y) - (cur.y - prev.y) * (next.x - cur.x);
        if cross.abs() > 1e-12 {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(l: f64, t: f64, r: f64, b: f64) -> Polygon {
        Polygon::rect(l, t, r, b)
    }

    #[test]
    fn center_line_of_rectangle() {
        let poly = rect(0.0, 0.0, 40.0, 10.0);
        let line = center_line(&poly).unwrap();
        assert_eq!(line.points(), &[Point::new(0.0, 5.0), Point::new(40.0, 5.0)]);
        assert!(!line.is_degenerate());
    }

    #[test]
    fn center_line_of_six_vertex_polygon_pairs_outer_vertices() {
        let poly = Polygon::from_flat(&[0., 0., 10., 2., 20., 0., 20., 10., 10., 12., 0., 10.]).unwrap();
        let line = center_line(&poly).unwrap();
        assert_eq!(
            line.points(),
            &[Point::new(0.0, 5.0), Point::new(10.0, 7.0), Point::new(20.0, 5.0)]
        );
    }

    #[test]
    fn center_line_of_flat_rectangle_is_degenerate_in_height_only() {
        let poly = rect(0.0, 0.0, 40.0, 0.0);
        let line = center_line(&poly).unwrap();
        assert_eq!(line.points(), &[Point::new(0.0, 0.0), Point::new(40.0, 0.0)]);
        let dot = Polygon::from_flat(&[3., 3., 3., 3., 3., 3., 3., 3.]).unwrap();
        assert!(center_line(&dot).unwrap().is_degenerate());
    }

    #[test]
    fn center_line_rejects_malformed_polygons() {
        let odd = Polygon::from_flat(&[0., 0., 1., 0., 1., 1.]).unwrap();
        assert!(matches!(center_line(&odd), Err(Error::MalformedPolygon(_))));
        let two = Polygon::from_flat(&[0., 0., 1., 0.]).unwrap();
        assert!(matches!(center_line(&two), Err(Error::MalformedPolygon(_))));
    }

    #[test]
    fn width_ratio_follows_vertex_count() {
        assert_eq!(width_shrink_ratio(4), 0.2);
        assert!((width_shrink_ratio(6) - 0.2).abs() < 1e-12);
        assert!((width_shrink_ratio(8) - 0.3).abs() < 1e-12);
        assert_eq!(width_shrink_ratio(22), 1.0);
        assert_eq!(width_shrink_ratio(40), 1.0);
    }

    #[test]
    fn shrink_rectangle_keeps_a_fifth_of_each_side() {
        let s = shrink_positive_region(&rect(0.0, 0.0, 100.0, 20.0)).unwrap();
        let bb = s.bounding_box().unwrap();
        assert!((bb.left - 40.0).abs() < 1e-9 && (bb.right - 60.0).abs() < 1e-9);
        assert!((bb.top - 8.0).abs() < 1e-9 && (bb.bottom - 12.0).abs() < 1e-9);
    }

    #[test]
    fn shrink_curved_polygon_uses_central_segment() {
        // 8 vertices, 4 pairs at x = 0, 30, 60, 90; central quad spans x in [30, 60]
        let poly = Polygon::from_flat(&[
            0., 0., 30., 0., 60., 0., 90., 0., 90., 10., 60., 10., 30., 10., 0., 10.,
        ])
        .unwrap();
        let bb = shrink_positive_region(&poly).unwrap().bounding_box().unwrap();
        assert!((bb.width() - 0.3 * 30.0).abs() < 1e-9);
        assert!((bb.height() - 2.0).abs() < 1e-9);
        assert!(((bb.left + bb.right) / 2.0 - 45.0).abs() < 1e-9);
    }

    #[test]
    fn shrink_with_full_width_ratio_keeps_segment_width() {
        let mut flat = Vec::new();
        for i in 0..11 {
            flat.extend([i as f64 * 10.0, 0.0]);
        }
        for i in (0..11).rev() {
            flat.extend([i as f64 * 10.0, 10.0]);
        }
        let poly = Polygon::from_flat(&flat).unwrap();
        assert_eq!(poly.len(), 22);
        let bb = shrink_positive_region(&poly).unwrap().bounding_box().unwrap();
        // odd pair count: one segment centred on the middle pair at x = 50
        assert!((bb.left - 45.0).abs() < 1e-9 && (bb.right - 55.0).abs() < 1e-9);
    }

    #[test]
    fn shrink_degenerate_polygon_is_empty() {
        let s = shrink_positive_region(&rect(0.0, 0.0, 40.0, 0.0)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn uniform_points_examples() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(24.0, 0.0)]).unwrap();
        let pts = uniform_points(&line, 25).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert!((p.x - i as f64).abs() < 1e-12 && p.y == 0.0);
        }
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)]).unwrap();
        assert_eq!(uniform_points(&line, 1).unwrap(), vec![Point::new(5.0, 0.0)]);
        let line = Polyline::new(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
        ])
        .unwrap();
        assert_eq!(
            uniform_points(&line, 3).unwrap(),
            vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 10.0)]
        );
    }

    #[test]
    fn uniform_points_on_degenerate_line_repeats_first_point() {
        let line = Polyline::new(vec![Point::new(2.0, 3.0), Point::new(2.0, 3.0)]).unwrap();
        assert_eq!(uniform_points(&line, 4).unwrap(), vec![Point::new(2.0, 3.0); 4]);
        assert!(Polyline::new(vec![]).is_err());
        assert!(uniform_points(&line, 0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(polygon_iou(&a, &rect(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = rect(0.5, 0.0, 1.5, 1.0);
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(polygon_iou(&Polygon::default(), &Polygon::default()), 0.0);
    }

    #[test]
    fn rasterize_examples() {
        let full = rasterize(&rect(0.0, 0.0, 16.0, 16.0), 4, 4, 4.0);
        assert_eq!(full.count(), 16);
        assert_eq!(rasterize(&Polygon::default(), 4, 4, 4.0).count(), 0);
        let cells = |g: &BinaryGrid| -> Vec<(usize, usize)> {
            (0..4)
                .flat_map(|y| (0..4).map(move |x| (x, y)))
                .filter(|&(x, y)| g.get(x, y))
                .collect()
        };
        // centers at 2 and 6 are inside; the center at 10 sits on the edge
        // of a 10 px square and counts as inside as well
        let g = rasterize(&rect(0.0, 0.0, 9.5, 9.5), 4, 4, 4.0);
        assert_eq!(cells(&g), vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let g = rasterize(&rect(0.0, 0.0, 10.0, 10.0), 4, 4, 4.0);
        assert_eq!(g.count(), 9);
        assert!(g.get(2, 2) && !g.get(3, 0));
    }

    #[test]
    fn rasterize_counts_boundary_as_inside() {
        // cell centers at 2 and 6 lie exactly on the edges
        let g = rasterize(&rect(2.0, 2.0, 6.0, 6.0), 4, 4, 4.0);
        assert_eq!(g.count(), 4);
    }

    #[test]
    fn mask_to_polygons_examples() {
        assert!(mask_to_polygons(&BinaryGrid::new(8, 8)).is_empty());

        let mut m = BinaryGrid::new(10, 8);
        for y in 2..5 {
            for x in 1..7 {
                m.set(x, y, true);
            }
        }
        let polys = mask_to_polygons(&m);
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].len(), 4);
        assert!((polys[0].area() - 18.0).abs() < 1e-12);
        assert_eq!(rasterize(&polys[0], 10, 8, 1.0), m);
    }

    #[test]
    fn mask_to_polygons_separates_blobs_and_drops_speckle() {
        let mut m = BinaryGrid::new(20, 10);
        for y in 1..4 {
            for x in 1..4 {
                m.set(x, y, true);
            }
        }
        for y in 5..9 {
            for x in 10..18 {
                m.set(x, y, true);
            }
        }
        m.set(19, 0, true);
        let polys = mask_to_polygons(&m);
        assert_eq!(polys.len(), 2);
        assert!((polys[0].area() - 32.0).abs() < 1e-12);
        assert!((polys[1].area() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_cells_form_one_component() {
        let mut m = BinaryGrid::new(6, 6);
        for (x, y) in [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)] {
            m.set(x, y, true);
        }
        let polys = mask_to_polygons(&m);
        assert_eq!(polys.len(), 1);
        assert!((polys[0].area() - 5.0).abs() < 1e-12);
        let back = rasterize(&polys[0], 6, 6, 1.0);
        for (x, y) in [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)] {
            assert!(back.get(x, y));
        }
    }

    #[test]
    fn outer_boundary_ignores_holes() {
        let mut m = BinaryGrid::new(7, 7);
        for y in 1..6 {
            for x in 1..6 {
                m.set(x, y, !(x == 3 && y == 3));
            }
        }
        let polys = mask_to_polygons(&m);
        assert_eq!(polys.len(), 1);
        assert!((polys[0].area() - 25.0).abs() < 1e-12);
    }
}
