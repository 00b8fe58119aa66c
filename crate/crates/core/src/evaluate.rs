//! Weakly supervised localization and cross-view orientation estimation.

use serde::{Deserialize, Serialize};

use crate::decompose::{pixel_to_cell, ActivationMap, DecompositionResult, Side};
use crate::error::{Error, Result};

/// Pixel box, `[x0, x1) x [y0, y1)`; `x` is the column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..self.y1).contains(&row) && (self.x0..self.x1).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let ih = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller label wins so roots follow raster order
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Box around the largest 8-connected component of `mask` (row-major,
/// `height x width`). Ties go to the component met first in raster order.
pub fn largest_component_box(mask: &[bool], height: usize, width: usize) -> Option<BBox> {
    const NONE: usize = usize::MAX;
    let mut labels = vec![NONE; height * width];
    let mut sets = DisjointSet::new();
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            // already-visited 8-neighbours: W, NW, N, NE
            let mut neighbours = [NONE; 4];
            if c > 0 {
                neighbours[0] = labels[r * width + c - 1];
            }
            if r > 0 {
                let up = (r - 1) * width;
                if c > 0 {
                    neighbours[1] = labels[up + c - 1];
                }
                neighbours[2] = labels[up + c];
                if c + 1 < width {
                    neighbours[3] = labels[up + c + 1];
                }
            }
            let label = match neighbours.iter().copied().filter(|&l| l != NONE).min() {
                Some(l) => l,
                None => sets.make(),
            };
            for &nb in neighbours.iter().filter(|&&l| l != NONE) {
                sets.union(label, nb);
            }
            labels[r * width + c] = label;
        }
    }
    let n = sets.parent.len();
    if n == 0 {
        return None;
    }
    let mut size = vec![0usize; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for r in 0..height {
        for c in 0..width {
            let l = labels[r * width + c];
            if l == NONE {
                continue;
            }
            let root = sets.find(l);
            size[root] += 1;
            let b = &mut bounds[root];
            b.0 = b.0.min(c);
            b.1 = b.1.min(r);
            b.2 = b.2.max(c + 1);
            b.3 = b.3.max(r + 1);
        }
    }
    // Roots are the minimum label of their component, and labels are
    // allocated in raster order, so the first max is the earliest component.
    let mut best = None;
    for root in 0..n {
        if size[root] > 0 && best.is_none_or(|b: usize| size[root] > size[b]) {
            best = Some(root);
        }
    }
    best.map(|b| {
        let (x0, y0, x1, y1) = bounds[b];
        BBox { x0, y0, x1, y1 }
    })
}

/// Clip negatives, upsample to the image, keep pixels at or above
/// `threshold * max`, and box the largest connected component.
pub fn segment_and_box(
    map: &ActivationMap,
    threshold: f64,
    image_h: usize,
    image_w: usize,
) -> Result<BBox> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let up = map.clipped().upsample(image_h, image_w)?;
    let max = f64::from(up.values.max());
    if max <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let cut = threshold * max;
    let mask: Vec<bool> = up
        .values
        .data()
        .iter()
        .map(|&v| f64::from(v) >= cut)
        .collect();
    largest_component_box(&mask, image_h, image_w).ok_or(Error::EmptyMask)
}

#[derive(Clone, Debug)]
pub struct LocalizationSample {
    pub map: ActivationMap,
    pub gt: BBox,
    pub image_h: usize,
    pub image_w: usize,
}

/// Fraction of samples whose predicted box has IoU > 0.5 with the ground
/// truth. Samples without any positive activation count as misses.
pub fn localization_accuracy(samples: &[LocalizationSample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for s in samples {
        match segment_and_box(&s.map, threshold, s.image_h, s.image_w) {
            Ok(pred) if iou(&pred, &s.gt) > 0.5 => hits += 1,
            Ok(_) | Err(Error::EmptyMask) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Angle in degrees, kept in `[0, 360)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AngleDeg(f64);

impl AngleDeg {
    pub fn new(degrees: f64) -> Self {
        let v = degrees.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negatives
        Self(if v >= 360.0 { 0.0 } else { v })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::ops::Sub for AngleDeg {
    type Output = AngleDeg;

    fn sub(self, rhs: Self) -> Self {
        AngleDeg::new(self.0 - rhs.0)
    }
}

/// How compass angles are read off an aerial (top-down) image around its
/// center. The default puts 0° straight down the image (South on a
/// north-up tile) and increases clockwise on screen, which matches the
/// direction panorama columns sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AerialConvention {
    pub offset_deg: f64,
    pub clockwise: bool,
}

impl Default for AerialConvention {
    fn default() -> Self {
        Self {
            offset_deg: 0.0,
            clockwise: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// Equirectangular street panorama; column 0 is the 0° reference.
    Panorama { width: usize },
    /// Top-down image rotating about its center pixel.
    Aerial {
        height: usize,
        width: usize,
        convention: AerialConvention,
    },
}

pub fn pixel_to_angle(row: usize, col: usize, projection: Projection) -> Result<AngleDeg> {
    match projection {
        Projection::Panorama { width } => {
            if col >= width {
                return Err(Error::PointOutOfRange {
                    row,
                    col,
                    height: 1,
                    width,
                });
            }
            Ok(AngleDeg::new(360.0 * col as f64 / width as f64))
        }
        Projection::Aerial {
            height,
            width,
            convention,
        } => {
            if row >= height || col >= width {
                return Err(Error::PointOutOfRange {
                    row,
                    col,
                    height,
                    width,
                });
            }
            let dy = row as f64 - (height - 1) as f64 / 2.0;
            let dx = col as f64 - (width - 1) as f64 / 2.0;
            if dx == 0.0 && dy == 0.0 {
                return Err(Error::CenterPixel);
            }
            let sweep = if convention.clockwise { -dx } else { dx };
            Ok(AngleDeg::new(
                sweep.atan2(dy).to_degrees() + convention.offset_deg,
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    Overall,
    PointSpecific,
}

fn positive_argmax(map: &ActivationMap) -> Result<(usize, usize)> {
    if map.values.max() <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(map.argmax())
}

/// Relative rotation between a street panorama (query) and an aerial image
/// (reference) from their most activated pixels.
///
/// Both maps are expected at image resolution. In point-specific mode the
/// aerial pixel comes from the point-specific map of the street argmax,
/// taken from `decomp` (query = street).
pub fn estimate_orientation(
    street_map: &ActivationMap,
    aerial_map: &ActivationMap,
    mode: OrientationMode,
    decomp: Option<&DecompositionResult>,
    convention: AerialConvention,
) -> Result<AngleDeg> {
    let (sh, sw) = street_map.dims();
    let (ah, aw) = aerial_map.dims();
    let (sr, sc) = positive_argmax(street_map)?;
    let street_angle = pixel_to_angle(sr, sc, Projection::Panorama { width: sw })?;
    let (ar, ac) = match mode {
        OrientationMode::Overall => positive_argmax(aerial_map)?,
        OrientationMode::PointSpecific => {
            let d = decomp.ok_or_else(|| {
                Error::InvalidArgument("point-specific orientation needs a decomposition".into())
            })?;
            let cell = pixel_to_cell(sr, sc, (sh, sw), d.query_grid())?;
            let map = d.point_specific_map(Side::Query, cell, Some((ah, aw)))?;
            positive_argmax(&map)?
        }
    };
    let aerial_angle = pixel_to_angle(
        ar,
        ac,
        Projection::Aerial {
            height: ah,
            width: aw,
            convention,
        },
    )?;
    Ok(aerial_angle - street_angle)
}

/// Signed error folded into `[-180, 180]`.
pub fn wrap_error(error_deg: f64) -> f64 {
    let mut e = error_deg % 360.0;
    if e > 180.0 {
        e -= 360.0;
    } else if e < -180.0 {
        e += 360.0;
    }
    e
}

/// `gt - est`, folded into `[-180, 180]`.
pub fn wrap_angle_error(gt: AngleDeg, est: AngleDeg) -> f64 {
    wrap_error(gt.value() - est.value())
}

/// Angle-error histogram with 7° bins centered on multiples of 7°; the
/// outermost bins absorb the remainder up to ±180°.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bin_width: f64,
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ErrorHistogram {
    pub const BIN_WIDTH: f64 = 7.0;
    const HALF_BINS: i64 = 25;

    pub fn new() -> Self {
        let centers = (-Self::HALF_BINS..=Self::HALF_BINS)
            .map(|i| i as f64 * Self::BIN_WIDTH)
            .collect::<Vec<_>>();
        let counts = vec![0; centers.len()];
        Self {
            bin_width: Self::BIN_WIDTH,
            centers,
            counts,
        }
    }

    pub fn bin_of(error_deg: f64) -> usize {
        let idx = (error_deg / Self::BIN_WIDTH)
            .round()
            .clamp(-Self::HALF_BINS as f64, Self::HALF_BINS as f64) as i64;
        (idx + Self::HALF_BINS) as usize
    }

    pub fn add(&mut self, error_deg: f64) {
        self.counts[Self::bin_of(error_deg)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> Vec<f64> {
        let total = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Fraction of errors strictly inside ±3.5°.
    pub fn zero_bin_fraction(&self) -> f64 {
        self.fractions()[Self::HALF_BINS as usize]
    }
}

impl Default for ErrorHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl FromIterator<f64> for ErrorHistogram {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut h = Self::new();
        iter.into_iter().for_each(|e| h.add(e));
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::MapVariant;
    use crate::tensor::Tensor;

    fn map(h: usize, w: usize, hot: &[(usize, usize, f32)]) -> ActivationMap {
        let mut data = vec![0.0; h * w];
        for &(r, c, v) in hot {
            data[r * w + c] = v;
        }
        ActivationMap::new(
            Tensor::new(vec![h, w], data).unwrap(),
            MapVariant::OverallDecomp,
        )
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5, 5, 15, 15).unwrap();
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        let c = BBox::new(20, 20, 30, 30).unwrap();
        assert_eq!(iou(&a, &c), 0.0);
        assert!(BBox::new(3, 0, 3, 4).is_err());
    }

    #[test]
    fn single_blob() {
        let m = map(
            10,
            10,
            &[(3, 4, 1.0), (3, 5, 1.0), (4, 4, 1.0), (4, 5, 1.0)],
        );
        let b = segment_and_box(&m, 0.5, 10, 10).unwrap();
        assert_eq!(b, BBox::new(4, 3, 6, 5).unwrap());
    }

    #[test]
    fn largest_of_two_blobs() {
        let mut hot = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                hot.push((6 + r, 6 + c, 0.8));
            }
        }
        hot.extend([(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        let b = segment_and_box(&map(10, 10, &hot), 0.5, 10, 10).unwrap();
        assert_eq!(b, BBox::new(6, 6, 9, 9).unwrap());
    }

    #[test]
    fn diagonal_pixels_connect() {
        let b = segment_and_box(
            &map(5, 5, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (4, 0, 1.0)]),
            0.5,
            5,
            5,
        )
        .unwrap();
        assert_eq!(b, BBox::new(0, 0, 3, 3).unwrap());
    }

    #[test]
    fn u_shape_merges_labels() {
        // two arms joined at the bottom: labels must merge
        let hot: Vec<_> = [
            (0, 0),
            (1, 0),
            (2, 0),
            (2, 1),
            (2, 2),
            (1, 2),
            (0, 2),
            (0, 4),
        ]
        .iter()
        .map(|&(r, c)| (r, c, 1.0))
        .collect();
        let b = segment_and_box(&map(3, 5, &hot), 0.5, 3, 5).unwrap();
        assert_eq!(b, BBox::new(0, 0, 3, 3).unwrap());
    }

    #[test]
    fn empty_and_negative_maps() {
        assert!(matches!(
            segment_and_box(&map(4, 4, &[]), 0.5, 4, 4),
            Err(Error::EmptyMask)
        ));
        let neg = map(4, 4, &[(1, 1, -3.0)]);
        assert!(matches!(
            segment_and_box(&neg, 0.5, 4, 4),
            Err(Error::EmptyMask)
        ));
        assert!(segment_and_box(&neg, 1.0, 4, 4).is_err());
    }

    #[test]
    fn accuracy_perfect_and_empty() {
        let gt = BBox::new(2, 1, 6, 5).unwrap();
        let mut hot = Vec::new();
        for r in 1..5 {
            for c in 2..6 {
                hot.push((r, c, 1.0));
            }
        }
        let perfect = LocalizationSample {
            map: map(8, 8, &hot),
            gt,
            image_h: 8,
            image_w: 8,
        };
        for t in [0.15, 0.5, 0.99] {
            assert_eq!(
                localization_accuracy(&[perfect.clone(), perfect.clone()], t).unwrap(),
                1.0
            );
        }
        let zero = LocalizationSample {
            map: map(8, 8, &[]),
            ..perfect.clone()
        };
        assert_eq!(localization_accuracy(std::slice::from_ref(&zero), 0.5).unwrap(), 0.0);
        assert_eq!(localization_accuracy(&[perfect, zero], 0.5).unwrap(), 0.5);
        assert!(localization_accuracy(&[], 0.5).is_err());
    }

    #[test]
    fn panorama_angles() {
        let p = Projection::Panorama { width: 360 };
        assert_eq!(pixel_to_angle(0, 0, p).unwrap().value(), 0.0);
        assert_eq!(pixel_to_angle(0, 180, p).unwrap().value(), 180.0);
        assert!(pixel_to_angle(0, 360, p).is_err());
    }

    #[test]
    fn aerial_angles() {
        let a = Projection::Aerial {
            height: 5,
            width: 5,
            convention: AerialConvention::default(),
        };
        // one step down from center: the 0° ray
        assert_eq!(pixel_to_angle(3, 2, a).unwrap().value(), 0.0);
        // left (West on a north-up tile) is a quarter turn clockwise from South
        assert!((pixel_to_angle(2, 1, a).unwrap().value() - 90.0).abs() < 1e-12);
        assert!((pixel_to_angle(1, 2, a).unwrap().value() - 180.0).abs() < 1e-12);
        assert!((pixel_to_angle(2, 3, a).unwrap().value() - 270.0).abs() < 1e-12);
        assert!(matches!(pixel_to_angle(2, 2, a), Err(Error::CenterPixel)));
        let ccw = Projection::Aerial {
            height: 5,
            width: 5,
            convention: AerialConvention {
                offset_deg: 10.0,
                clockwise: false,
            },
        };
        assert!((pixel_to_angle(2, 1, ccw).unwrap().value() - 280.0).abs() < 1e-12);
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_error(359.0), -1.0);
        assert_eq!(wrap_error(0.0), 0.0);
        assert_eq!(wrap_error(-200.0), 160.0);
        assert_eq!(wrap_error(180.0), 180.0);
        let e = wrap_angle_error(AngleDeg::new(1.0), AngleDeg::new(2.0));
        assert_eq!(e, -1.0);
        assert_eq!(AngleDeg::new(-1e-20).value(), 0.0);
        assert_eq!(AngleDeg::new(725.0).value(), 5.0);
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(ErrorHistogram::bin_of(0.0), 25);
        assert_eq!(ErrorHistogram::bin_of(3.49), 25);
        assert_eq!(ErrorHistogram::bin_of(-3.49), 25);
        assert_eq!(ErrorHistogram::bin_of(3.5), 26);
        assert_eq!(ErrorHistogram::bin_of(180.0), 50);
        assert_eq!(ErrorHistogram::bin_of(-180.0), 0);
        let h: ErrorHistogram = [0.5, -2.0, 10.0, 179.0].into_iter().collect();
        assert_eq!(h.total(), 4);
        assert!((h.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.zero_bin_fraction(), 0.5);
    }

    #[test]
    fn aligned_pair_gives_zero() {
        // street blob at 90° in a 360-wide panorama, aerial blob on the 90° ray
        let street = map(4, 360, &[(2, 90, 1.0)]);
        let aerial = map(9, 9, &[(4, 1, 1.0)]);
        let est = estimate_orientation(
            &street,
            &aerial,
            OrientationMode::Overall,
            None,
            AerialConvention::default(),
        )
        .unwrap();
        assert!(est.value().abs() < 1e-9);
        assert!(matches!(
            estimate_orientation(
                &street,
                &aerial,
                OrientationMode::PointSpecific,
                None,
                AerialConvention::default()
            ),
            Err(Error::InvalidArgument(_))
        ));
    }
}
