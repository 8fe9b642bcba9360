//! Shape descriptors of a nucleus contour.

use super::{FeatureError, Point, MICRONS_PER_PIXEL};

pub const MORPHOLOGY_LEN: usize = 8;

/// Shape descriptors in physical units (µm, µm²) where they carry units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Morphology {
    pub area: f64,
    pub perimeter: f64,
    pub circularity: f64,
    pub eccentricity: f64,
    pub solidity: f64,
    pub extent: f64,
    pub major_axis: f64,
    pub minor_axis: f64,
}

impl Morphology {
    pub fn to_array(&self) -> [f64; MORPHOLOGY_LEN] {
        [
            self.area,
            self.perimeter,
            self.circularity,
            self.eccentricity,
            self.solidity,
            self.extent,
            self.major_axis,
            self.minor_axis,
        ]
    }
}

/// Signed shoelace area in px²; positive for counter-clockwise vertices.
pub fn signed_area(contour: &[Point]) -> f64 {
    let n = contour.len();
    (0..n)
        .map(|i| {
            let (a, b) = (contour[i], contour[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

pub fn perimeter(contour: &[Point]) -> f64 {
    let n = contour.len();
    (0..n)
        .map(|i| {
            let (a, b) = (contour[i], contour[(i + 1) % n]);
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .sum()
}

/// Convex hull by monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point, a: Point, b: Point| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

pub fn morphology_features(contour: &[Point]) -> Result<Morphology, FeatureError> {
    if contour.len() < 3 {
        return Err(FeatureError::TooFewVertices {
            nucleus: None,
            vertices: contour.len(),
        });
    }
    // moments are computed about the vertex mean to avoid cancellation
    let n = contour.len() as f64;
    let cx0 = contour.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy0 = contour.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut pts: Vec<Point> = contour.iter().map(|p| [p[0] - cx0, p[1] - cy0]).collect();
    let mut area = signed_area(&pts);
    if area < 0.0 {
        pts.reverse();
        area = -area;
    }
    if !(area > 1e-12) {
        return Err(FeatureError::DegeneratePolygon { nucleus: None });
    }

    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let m = pts.len();
    for i in 0..m {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % m];
        let c = x0 * y1 - x1 * y0;
        sx += (x0 + x1) * c;
        sy += (y0 + y1) * c;
        sxx += (x0 * x0 + x0 * x1 + x1 * x1) * c;
        syy += (y0 * y0 + y0 * y1 + y1 * y1) * c;
        sxy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * c;
    }
    let mx = sx / (6.0 * area);
    let my = sy / (6.0 * area);
    let cov_xx = sxx / (12.0 * area) - mx * mx;
    let cov_yy = syy / (12.0 * area) - my * my;
    let cov_xy = sxy / (24.0 * area) - mx * my;
    let half_trace = 0.5 * (cov_xx + cov_yy);
    let disc = (0.25 * (cov_xx - cov_yy).powi(2) + cov_xy * cov_xy).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };

    let perim = perimeter(&pts);
    let hull_area = signed_area(&convex_hull(&pts)).abs();
    let (min_x, max_x) = bounds(pts.iter().map(|p| p[0]));
    let (min_y, max_y) = bounds(pts.iter().map(|p| p[1]));
    let bbox = (max_x - min_x) * (max_y - min_y);

    let s = MICRONS_PER_PIXEL;
    Ok(Morphology {
        area: area * s * s,
        perimeter: perim * s,
        circularity: 4.0 * std::f64::consts::PI * area / (perim * perim),
        eccentricity,
        solidity: (area / hull_area).min(1.0),
        extent: area / bbox,
        major_axis: 4.0 * l1.sqrt() * s,
        minor_axis: 4.0 * l2.sqrt() * s,
    })
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
