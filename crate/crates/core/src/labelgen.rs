//! Dense per-level training targets for the anchor, detector and
//! recognizer heads.
//!
//! Every instance is owned by exactly one pyramid level, chosen by its mean
//! pair height. Inside that level the cells of its shrunk central region are
//! positive anchors; each positive cell carries the box distances, the
//! sampling-point offsets and the label sequence of its owner. Weak
//! instances (anchor point plus transcription, no polygon) only produce
//! confidence and recognition targets.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::error::{Error, Result};
use crate::geometry::{
    self, center_line, rasterize_into, shrink_positive_region, uniform_points, AxisAlignedBox,
    BinaryGrid, GridCells, Point, Polygon,
};

/// Default boundary between the stride-4 and stride-8 levels, in pixels of
/// average text height.
pub const LEVEL_SPLIT_HEIGHT: f64 = 40.0;

/// One annotated text instance. Exactly one of `polygon` / `anchor` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "flat_polygon"
    )]
    pub polygon: Option<Polygon>,
    #[serde(rename = "anchor_hint", alias = "anchor", default, skip_serializing_if = "Option::is_none", with = "pair_point")]
    pub anchor: Option<Point>,
    pub text: String,
    /// `false` for instances excluded from scoring (heavily clipped or
    /// unreadable).
    #[serde(default = "default_care", skip_serializing_if = "is_true")]
    pub care: bool,
}

fn default_care() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

impl InstanceAnnotation {
    pub fn with_polygon(polygon: Polygon, text: impl Into<String>) -> Self {
        Self {
            polygon: Some(polygon),
            anchor: None,
            text: text.into(),
            care: true,
        }
    }

    pub fn weak(anchor: Point, text: impl Into<String>) -> Self {
        Self {
            polygon: None,
            anchor: Some(anchor),
            text: text.into(),
            care: true,
        }
    }

    pub fn is_weak(&self) -> bool {
        self.polygon.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.polygon, &self.anchor) {
            (Some(p), None) => {
                p.pair_count()?;
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::MalformedInput(
                    "instance needs exactly one of polygon / anchor".into(),
                ))
            }
        }
        if self.text.is_empty() {
            return Err(Error::MalformedInput("empty transcription".into()));
        }
        Ok(())
    }

    /// The anchor hint for weak instances, or the center-line midpoint of
    /// the polygon otherwise.
    pub fn anchor_point(&self) -> Result<Point> {
        if let Some(a) = self.anchor {
            return Ok(a);
        }
        let poly = self.polygon.as_ref().expect("validated instance");
        let line = center_line(poly)?;
        Ok(uniform_points(&line, 1)?[0])
    }

    /// Strips the polygon, keeping its center-line midpoint as anchor hint.
    pub fn to_weak(&self) -> Result<Self> {
        Ok(Self {
            polygon: None,
            anchor: Some(self.anchor_point()?),
            text: self.text.clone(),
            care: self.care,
        })
    }
}

mod flat_polygon {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<Polygon>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match p {
            Some(p) => s.serialize_some(&p.to_flat()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Polygon>, D::Error> {
        let flat: Option<Vec<f64>> = Option::deserialize(d)?;
        flat.map(|f| Polygon::from_flat(&f).map_err(serde::de::Error::custom))
            .transpose()
    }
}

mod pair_point {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<Point>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match p {
            Some(p) => s.serialize_some(&[p.x, p.y]),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Point>, D::Error> {
        let xy: Option<[f64; 2]> = Option::deserialize(d)?;
        Ok(xy.map(|[x, y]| Point::new(x, y)))
    }
}

/// A pyramid level and the open height interval of the text it owns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level_index: u8,
    pub stride: usize,
    pub min_height: f64,
    /// `None` means unbounded.
    pub max_height: Option<f64>,
}

impl LevelSpec {
    fn admits(&self, h: f64) -> bool {
        // lower bound inclusive except at zero so that the split value goes
        // to the coarser level
        let lower = if self.min_height <= 0.0 {
            h > 0.0
        } else {
            h >= self.min_height
        };
        lower && self.max_height.is_none_or(|m| h < m)
    }
}

/// The stride-4 / stride-8 pair split at [`LEVEL_SPLIT_HEIGHT`].
pub fn default_levels() -> Vec<LevelSpec> {
    vec![
        LevelSpec {
            level_index: 2,
            stride: 4,
            min_height: 0.0,
            max_height: Some(LEVEL_SPLIT_HEIGHT),
        },
        LevelSpec {
            level_index: 3,
            stride: 8,
            min_height: LEVEL_SPLIT_HEIGHT,
            max_height: None,
        },
    ]
}

/// Mean distance between paired polygon vertices.
pub fn average_height(inst: &InstanceAnnotation) -> Result<f64> {
    match &inst.polygon {
        Some(p) => geometry::average_pair_height(p),
        None => Err(Error::NotApplicable(
            "weak instance has no polygon to measure".into(),
        )),
    }
}

/// Position in `levels` of the level owning text of average height `h`.
pub fn assign_level(h: f64, levels: &[LevelSpec]) -> Result<usize> {
    if !(h > 0.0) {
        return Err(Error::NoLevel(h));
    }
    levels
        .iter()
        .position(|l| l.admits(h))
        .ok_or(Error::NoLevel(h))
}

/// Dense targets of one level.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    pub spec: LevelSpec,
    pub width: usize,
    pub height: usize,
    pub num_points: usize,
    /// Owning instance of each positive cell.
    pub owner: Vec<Option<usize>>,
    /// Set on positive cells owned by weak instances.
    pub weak: Vec<bool>,
    /// `(top, right, bottom, left)` pixel distances, channel-major `4 x HW`.
    pub geometry: Vec<f64>,
    /// Stride-normalized offsets `(x0, y0, x1, y1, ...)`, channel-major
    /// `2K x HW`.
    pub sampling: Vec<f64>,
}

impl LevelTargets {
    fn empty(spec: LevelSpec, width: usize, height: usize, num_points: usize) -> Self {
        let cells = width * height;
        Self {
            spec,
            width,
            height,
            num_points,
            owner: vec![None; cells],
            weak: vec![false; cells],
            geometry: vec![0.0; 4 * cells],
            sampling: vec![0.0; 2 * num_points * cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn confidence(&self) -> BinaryGrid {
        BinaryGrid {
            width: self.width,
            height: self.height,
            data: self.owner.iter().map(|o| o.is_some() as u8).collect(),
        }
    }

    pub fn is_positive(&self, cell: usize) -> bool {
        self.owner[cell].is_some()
    }

    /// Positive cells whose detection and sampling targets are valid.
    pub fn is_full(&self, cell: usize) -> bool {
        self.owner[cell].is_some() && !self.weak[cell]
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cells()).filter(|&c| self.owner[c].is_some())
    }

    pub fn geometry_at(&self, cell: usize) -> [f64; 4] {
        let n = self.cells();
        [0, 1, 2, 3].map(|ch| self.geometry[ch * n + cell])
    }

    pub fn sampling_at(&self, cell: usize) -> Vec<f64> {
        let n = self.cells();
        (0..2 * self.num_points)
            .map(|ch| self.sampling[ch * n + cell])
            .collect()
    }

    pub fn cell_center(&self, cell: usize) -> Point {
        cell_center(cell % self.width, cell / self.width, self.spec.stride)
    }
}

pub fn cell_center(x: usize, y: usize, stride: usize) -> Point {
    let s = stride as f64;
    Point::new((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
}

/// Per-instance targets shared by all levels.
#[derive(Debug, Clone)]
pub struct InstanceTarget {
    pub labels: Vec<usize>,
    pub is_weak: bool,
    /// Index into [`TargetBundle::levels`]; `None` when skipped.
    pub level: Option<usize>,
    pub bbox: Option<AxisAlignedBox>,
    pub mask: Option<BinaryGrid>,
}

/// All targets of one image.
#[derive(Debug, Clone)]
pub struct TargetBundle {
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<LevelTargets>,
    pub instances: Vec<InstanceTarget>,
}

/// Label generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelConfig {
    pub levels: Vec<LevelSpec>,
    pub num_points: usize,
    /// Level index (2 or 3) that owns weak instances, which carry no height.
    pub weak_level: u8,
    /// Radius in cells of the positive disc around a weak anchor.
    pub weak_radius: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            num_points: 25,
            weak_level: 2,
            weak_radius: 1.0,
        }
    }
}

struct Claim {
    instance: usize,
    area: f64,
}

struct OwnerGrid {
    width: usize,
    height: usize,
    cells: Vec<Option<Claim>>,
    overlaps: usize,
}

impl GridCells<Option<Claim>> for OwnerGrid {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn cell_mut(&mut self, x: usize, y: usize) -> &mut Option<Claim> {
        &mut self.cells[y * self.width + x]
    }
}

impl OwnerGrid {
    fn claim(slot: &mut Option<Claim>, instance: usize, area: f64, overlaps: &mut usize) {
        match slot {
            Some(c) if c.instance == instance => {}
            Some(c) => {
                *overlaps += 1;
                if area < c.area || (area == c.area && instance < c.instance) {
                    *slot = Some(Claim { instance, area });
                }
            }
            None => *slot = Some(Claim { instance, area }),
        }
    }
}

/// Level assignment of every instance: `None` for skipped instances.
fn assign_instances(insts: &[InstanceAnnotation], cfg: &LabelConfig) -> Vec<Option<usize>> {
    insts
        .iter()
        .map(|inst| {
            if !inst.care || inst.validate().is_err() {
                return None;
            }
            if inst.is_weak() {
                return cfg.levels.iter().position(|l| l.level_index == cfg.weak_level);
            }
            let h = average_height(inst).ok()?;
            match assign_level(h, &cfg.levels) {
                Ok(l) => Some(l),
                Err(e) => {
                    warn!("skipping instance {:?}: {e}", inst.text);
                    None
                }
            }
        })
        .collect()
}

/// Confidence target of one level: owner instance per positive cell.
///
/// Non-weak instances cover the rasterized shrunk central region (falling
/// back to the polygon cell nearest its center when the region covers no
/// cell center); weak instances cover a disc around their anchor. Cells
/// claimed twice go to the instance with the smaller polygon area.
pub fn build_confidence_gt(
    insts: &[InstanceAnnotation],
    assigned: &[Option<usize>],
    level: usize,
    cfg: &LabelConfig,
    image_size: (usize, usize),
) -> Vec<Option<usize>> {
    let spec = cfg.levels[level];
    let stride = spec.stride as f64;
    let (gw, gh) = (image_size.0 / spec.stride, image_size.1 / spec.stride);
    let mut grid = OwnerGrid {
        width: gw,
        height: gh,
        cells: (0..gw * gh).map(|_| None).collect(),
        overlaps: 0,
    };
    for (i, inst) in insts.iter().enumerate() {
        if assigned[i] != Some(level) {
            continue;
        }
        let mut overlaps = 0;
        match (&inst.polygon, inst.anchor) {
            (Some(poly), _) => {
                let area = poly.area();
                let Ok(region) = shrink_positive_region(poly) else {
                    continue;
                };
                let mut hit = false;
                rasterize_into(&region, stride, &mut grid, |slot| {
                    hit = true;
                    OwnerGrid::claim(slot, i, area, &mut overlaps);
                });
                if !hit {
                    if let Some((x, y)) = fallback_cell(poly, &region, spec.stride, gw, gh) {
                        OwnerGrid::claim(&mut grid.cells[y * gw + x], i, area, &mut overlaps);
                    } else {
                        warn!("instance {:?} covers no cell center at stride {}", inst.text, spec.stride);
                    }
                }
            }
            (None, Some(a)) => {
                let (cx, cy) = ((a.x / stride).floor(), (a.y / stride).floor());
                let r = cfg.weak_radius;
                let span = r.ceil() as isize;
                for dy in -span..=span {
                    for dx in -span..=span {
                        if ((dx * dx + dy * dy) as f64) > r * r {
                            continue;
                        }
                        let (x, y) = (cx as isize + dx, cy as isize + dy);
                        if x < 0 || y < 0 || x >= gw as isize || y >= gh as isize {
                            continue;
                        }
                        let slot = &mut grid.cells[y as usize * gw + x as usize];
                        OwnerGrid::claim(slot, i, f64::INFINITY, &mut overlaps);
                    }
                }
            }
            (None, None) => {}
        }
        grid.overlaps += overlaps;
    }
    if grid.overlaps > 0 {
        warn!(
            "{} overlapping positive cells at stride {} resolved toward smaller instances",
            grid.overlaps, spec.stride
        );
    }
    grid.cells.into_iter().map(|c| c.map(|c| c.instance)).collect()
}

/// Cell whose center lies in `poly` and is nearest the region's centroid.
fn fallback_cell(
    poly: &Polygon,
    region: &Polygon,
    stride: usize,
    gw: usize,
    gh: usize,
) -> Option<(usize, usize)> {
    let target = region.centroid().or_else(|| poly.centroid())?;
    let bb = poly.bounding_box()?;
    let s = stride as f64;
    let x0 = ((bb.left / s).floor().max(0.0)) as usize;
    let y0 = ((bb.top / s).floor().max(0.0)) as usize;
    let x1 = ((bb.right / s).floor() as usize).min(gw.saturating_sub(1));
    let y1 = ((bb.bottom / s).floor() as usize).min(gh.saturating_sub(1));
    let mut best: Option<(f64, (usize, usize))> = None;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let c = cell_center(x, y, stride);
            if !poly.contains(c) {
                continue;
            }
            let d = c.distance(target);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, (x, y)));
            }
        }
    }
    best.map(|b| b.1)
}

/// Box distances `(top, right, bottom, left)` from each full positive cell
/// center to its owner's bounding box.
pub fn build_geometry_gt(
    insts: &[InstanceAnnotation],
    targets: &mut LevelTargets,
) {
    let n = targets.cells();
    for cell in 0..n {
        let Some(owner) = targets.owner[cell] else {
            continue;
        };
        let Some(poly) = &insts[owner].polygon else {
            continue;
        };
        let bb = poly.bounding_box().expect("nonempty polygon");
        let c = targets.cell_center(cell);
        let d = [c.y - bb.top, bb.right - c.x, bb.bottom - c.y, c.x - bb.left];
        for (ch, v) in d.into_iter().enumerate() {
            targets.geometry[ch * n + cell] = v;
        }
    }
}

/// Offsets of the `K` uniform center-line points from each full positive
/// cell center, divided by the stride.
pub fn build_sampling_gt(insts: &[InstanceAnnotation], targets: &mut LevelTargets) -> Result<()> {
    let n = targets.cells();
    let k = targets.num_points;
    let stride = targets.spec.stride as f64;
    let mut cache: Vec<Option<Vec<Point>>> = vec![None; insts.len()];
    for cell in 0..n {
        let Some(owner) = targets.owner[cell] else {
            continue;
        };
        let Some(poly) = &insts[owner].polygon else {
            continue;
        };
        if cache[owner].is_none() {
            cache[owner] = Some(uniform_points(&center_line(poly)?, k)?);
        }
        let pts = cache[owner].as_ref().expect("filled above");
        let c = targets.cell_center(cell);
        for (i, p) in pts.iter().enumerate() {
            targets.sampling[(2 * i) * n + cell] = (p.x - c.x) / stride;
            targets.sampling[(2 * i + 1) * n + cell] = (p.y - c.y) / stride;
        }
    }
    Ok(())
}

/// Full-resolution mask of every non-weak instance.
pub fn build_mask_gt(insts: &[InstanceAnnotation], image_size: (usize, usize)) -> Vec<Option<BinaryGrid>> {
    insts
        .iter()
        .map(|inst| {
            inst.polygon
                .as_ref()
                .map(|p| geometry::rasterize(p, image_size.0, image_size.1, 1.0))
        })
        .collect()
}

/// Label sequence of every instance; `None` when nothing of the
/// transcription survives the alphabet.
pub fn build_text_gt(insts: &[InstanceAnnotation]) -> Vec<Option<Vec<usize>>> {
    insts
        .iter()
        .map(|inst| {
            let enc = alphabet::encode(&inst.text);
            if !enc.dropped.is_empty() {
                warn!("dropping out-of-alphabet symbols {:?} from {:?}", enc.dropped, inst.text);
            }
            if enc.labels.is_empty() {
                warn!("transcription {:?} is empty after filtering; instance skipped", inst.text);
                None
            } else {
                Some(enc.labels)
            }
        })
        .collect()
}

/// Builds every target of one image of size `(width, height)`.
pub fn build_targets(
    insts: &[InstanceAnnotation],
    image_size: (usize, usize),
    cfg: &LabelConfig,
) -> Result<TargetBundle> {
    let texts = build_text_gt(insts);
    let mut assigned = assign_instances(insts, cfg);
    for (a, t) in assigned.iter_mut().zip(&texts) {
        if t.is_none() {
            *a = None;
        }
    }
    let masks = build_mask_gt(insts, image_size);
    let mut levels = Vec::with_capacity(cfg.levels.len());
    for (li, spec) in cfg.levels.iter().enumerate() {
        let (gw, gh) = (image_size.0 / spec.stride, image_size.1 / spec.stride);
        let mut t = LevelTargets::empty(*spec, gw, gh, cfg.num_points);
        t.owner = build_confidence_gt(insts, &assigned, li, cfg, image_size);
        for cell in 0..t.cells() {
            if let Some(o) = t.owner[cell] {
                t.weak[cell] = insts[o].is_weak();
            }
        }
        build_geometry_gt(insts, &mut t);
        build_sampling_gt(insts, &mut t)?;
        levels.push(t);
    }
    let instances = insts
        .iter()
        .zip(texts)
        .zip(masks)
        .zip(&assigned)
        .map(|(((inst, labels), mask), level)| InstanceTarget {
            labels: labels.unwrap_or_default(),
            is_weak: inst.is_weak(),
            level: *level,
            bbox: inst.polygon.as_ref().and_then(|p| p.bounding_box()),
            mask,
        })
        .collect();
    Ok(TargetBundle {
        image_width: image_size.0,
        image_height: image_size.1,
        levels,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_inst(l: f64, t: f64, r: f64, b: f64, text: &str) -> InstanceAnnotation {
        InstanceAnnotation::with_polygon(Polygon::rect(l, t, r, b), text)
    }

    #[test]
    fn average_height_examples() {
        assert_eq!(average_height(&rect_inst(0., 0., 40., 10., "a")).unwrap(), 10.0);
        let trap = InstanceAnnotation::with_polygon(
            Polygon::from_flat(&[0., 0., 30., 0., 30., 20., 0., 10.]).unwrap(),
            "a",
        );
        assert!((average_height(&trap).unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(average_height(&rect_inst(0., 0., 40., 0., "a")).unwrap(), 0.0);
        let weak = InstanceAnnotation::weak(Point::new(1., 1.), "a");
        assert!(matches!(average_height(&weak), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn level_assignment() {
        let levels = default_levels();
        assert_eq!(levels[assign_level(30.0, &levels).unwrap()].level_index, 2);
        assert_eq!(levels[assign_level(50.0, &levels).unwrap()].level_index, 3);
        assert_eq!(levels[assign_level(40.0, &levels).unwrap()].level_index, 3);
        assert!(matches!(assign_level(0.0, &levels), Err(Error::NoLevel(_))));
    }

    #[test]
    fn empty_level_has_no_positives() {
        let insts = [rect_inst(10., 10., 90., 30., "word")];
        let b = build_targets(&insts, (128, 128), &LabelConfig::default()).unwrap();
        assert_eq!(b.levels[1].positives().count(), 0);
        assert!(b.levels[0].positives().count() > 0);
        assert_eq!(build_targets(&[], (64, 64), &LabelConfig::default()).unwrap().levels[0].positives().count(), 0);
    }

    #[test]
    fn centered_rectangle_matches_shrink_then_rasterize() {
        let inst = rect_inst(24., 40., 104., 60., "hello");
        let b = build_targets(std::slice::from_ref(&inst), (128, 128), &LabelConfig::default()).unwrap();
        let region = shrink_positive_region(inst.polygon.as_ref().unwrap()).unwrap();
        let oracle = geometry::rasterize(&region, 32, 32, 4.0);
        assert_eq!(b.levels[0].confidence(), oracle);
        assert!(oracle.count() > 0);
    }

    #[test]
    fn weak_instance_marks_plus_shaped_disc() {
        let insts = [InstanceAnnotation::weak(Point::new(17.0, 9.0), "ab")];
        let b = build_targets(&insts, (64, 64), &LabelConfig::default()).unwrap();
        let t = &b.levels[0];
        let on: Vec<(usize, usize)> = t.positives().map(|c| (c % t.width, c / t.width)).collect();
        assert_eq!(on, vec![(4, 1), (3, 2), (4, 2), (5, 2), (4, 3)]);
        assert!(t.positives().all(|c| t.weak[c] && !t.is_full(c)));
    }

    #[test]
    fn geometry_of_centered_and_shifted_anchor() {
        // 40 x 20 box centered on the cell center (18, 18) of cell (4, 4)
        let inst = rect_inst(-2., 8., 38., 28., "ab");
        let mut t = LevelTargets::empty(default_levels()[0], 16, 16, 25);
        t.owner[4 * 16 + 4] = Some(0);
        t.owner[4 * 16 + 5] = Some(0);
        build_geometry_gt(std::slice::from_ref(&inst), &mut t);
        assert_eq!(t.geometry_at(4 * 16 + 4), [10.0, 20.0, 10.0, 20.0]);
        assert_eq!(t.geometry_at(4 * 16 + 5), [10.0, 16.0, 10.0, 24.0]);
    }

    #[test]
    fn sampling_offsets_of_straight_word() {
        // center line (2,6) -> (26,6); cell (3, 1) has center (14, 6)
        let shifted = rect_inst(2., 1., 26., 11., "ab");
        let mut t = LevelTargets::empty(default_levels()[0], 8, 8, 25);
        t.owner[8 + 3] = Some(0);
        build_sampling_gt(std::slice::from_ref(&shifted), &mut t).unwrap();
        let s = t.sampling_at(8 + 3);
        for i in 0..25 {
            assert!((s[2 * i] - (i as f64 - 12.0) / 4.0).abs() < 1e-12);
            assert!(s[2 * i + 1].abs() < 1e-12);
            assert!((s[2 * i] + s[2 * (24 - i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_cells_have_no_geometry_or_sampling() {
        let insts = [
            InstanceAnnotation::weak(Point::new(30.0, 30.0), "ab"),
            rect_inst(4., 44., 60., 60., "cd"),
        ];
        let b = build_targets(&insts, (64, 64), &LabelConfig::default()).unwrap();
        let t = &b.levels[0];
        for c in t.positives() {
            if t.weak[c] {
                assert_eq!(t.geometry_at(c), [0.0; 4]);
                assert!(t.sampling_at(c).iter().all(|&v| v == 0.0));
            }
        }
        assert!(b.instances[0].mask.is_none() && b.instances[1].mask.is_some());
        assert_eq!(b.instances[0].labels, vec![1, 2]);
    }

    #[test]
    fn text_targets_filter_alphabet() {
        let insts = [
            rect_inst(0., 0., 10., 10., "ab1"),
            rect_inst(0., 0., 10., 10., "héllo"),
            rect_inst(0., 0., 10., 10., "!!"),
        ];
        let t = build_text_gt(&insts);
        assert_eq!(t[0], Some(vec![1, 2, 28]));
        assert_eq!(t[1], Some(vec![8, 12, 12, 15]));
        assert_eq!(t[2], None);
    }

    #[test]
    fn overlap_goes_to_smaller_instance() {
        let big = rect_inst(0., 10., 120., 40., "big");
        let small = rect_inst(50., 15., 70., 37., "small");
        let b = build_targets(&[big, small], (128, 64), &LabelConfig::default()).unwrap();
        let t = &b.levels[0];
        assert_eq!(t.owner[6 * t.width + 14], Some(1));
        assert_eq!(t.owner[6 * t.width + 15], Some(1));
        assert_eq!(t.owner[6 * t.width + 12], Some(0));
    }

    #[test]
    fn thin_text_falls_back_to_a_cell_inside_the_polygon() {
        let inst = rect_inst(10., 13.5, 60., 18.5, "thin");
        let b = build_targets(std::slice::from_ref(&inst), (64, 64), &LabelConfig::default()).unwrap();
        let pos: Vec<usize> = b.levels[0].positives().collect();
        assert_eq!(pos.len(), 1);
        assert!(inst.polygon.as_ref().unwrap().contains(b.levels[0].cell_center(pos[0])));
    }

    #[test]
    fn annotation_json_shapes() {
        let strong = rect_inst(0., 0., 4., 2., "Hi");
        let json = serde_json::to_string(&strong).unwrap();
        assert_eq!(json, r#"{"polygon":[0.0,0.0,4.0,0.0,4.0,2.0,0.0,2.0],"text":"Hi"}"#);
        let weak: InstanceAnnotation = serde_json::from_str(r#"{"anchor_hint":[3.5,4.0],"text":"x","care":false}"#).unwrap();
        assert_eq!(weak.anchor, Some(Point::new(3.5, 4.0)));
        assert!(weak.is_weak() && !weak.care);
        assert_eq!(strong.to_weak().unwrap().anchor, Some(Point::new(2.0, 1.0)));
    }
}
