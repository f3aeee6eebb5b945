//! Text-instance shapes: cubic Bezier sides, polygons, axis-aligned boxes,
//! conversions between them, areas and IoU.
//!
//! A [`BezierText`] bounds one text instance with two cubic curves. Both
//! curves run in reading direction (start of the text to its end), so the
//! canonical control-point order is `top.P0..P3, bottom.P0..P3`.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Samples per side used when a Bezier shape has to be bounded or rasterized.
pub const BBOX_SAMPLES_PER_SIDE: usize = 64;

/// Default grid resolution for [`polygon_iou`].
pub const DEFAULT_IOU_RESOLUTION: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    #[inline]
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn distance(self, other: Self) -> T {
        (self - other).norm()
    }

    /// Rotates about `pivot` by `angle_deg` degrees (counter-clockwise in a
    /// y-up frame, which is clockwise on screen).
    pub fn rotated(self, angle_deg: T, pivot: Self) -> Self {
        if angle_deg == T::zero() {
            return self;
        }
        let (s, c) = angle_deg.to_radians().sin_cos();
        let d = self - pivot;
        Point2::new(pivot.x + c * d.x - s * d.y, pivot.y + s * d.x + c * d.y)
    }

    pub fn cast<U: Real>(self) -> Point2<U> {
        Point2::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()))
    }
}

impl<T: Real> Add for Point2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Point2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Point2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Point2::new(self.x * s, self.y * s)
    }
}

impl<T: Real> Neg for Point2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Point2::new(-self.x, -self.y)
    }
}

/// Cubic Bezier curve `B(t) = sum_i C(3,i) P_i (1-t)^(3-i) t^i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicBezier<T> {
    pub control: [Point2<T>; 4],
}

impl<T: Real> CubicBezier<T> {
    pub fn new(p0: Point2<T>, p1: Point2<T>, p2: Point2<T>, p3: Point2<T>) -> Self {
        Self {
            control: [p0, p1, p2, p3],
        }
    }

    /// Evaluates the curve, rejecting `t` outside the unit interval.
    pub fn point(&self, t: T) -> Result<Point2<T>> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::ParameterOutOfRange(t.as_f64()));
        }
        Ok(self.eval(t))
    }

    /// Bernstein-form evaluation without the range check.
    #[inline]
    pub fn eval(&self, t: T) -> Point2<T> {
        let [b0, b1, b2, b3] = bernstein(t);
        let [p0, p1, p2, p3] = self.control;
        p0 * b0 + p1 * b1 + p2 * b2 + p3 * b3
    }

    /// `n >= 2` points at uniformly spaced parameters, `t = 0` first.
    pub fn sample(&self, n: usize) -> Vec<Point2<T>> {
        let denom = T::from_usize_lossy(n.max(2) - 1);
        (0..n)
            .map(|i| self.eval(T::from_usize_lossy(i) / denom))
            .collect()
    }

    pub fn reversed(&self) -> Self {
        let [p0, p1, p2, p3] = self.control;
        Self::new(p3, p2, p1, p0)
    }

    pub fn map(&self, f: impl Fn(Point2<T>) -> Point2<T>) -> Self {
        Self {
            control: self.control.map(f),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.control.iter().all(Point2::is_finite)
    }
}

/// Cubic Bernstein basis at `t`.
#[inline]
pub fn bernstein<T: Real>(t: T) -> [T; 4] {
    let mt = T::one() - t;
    let three = T::lit(3.0);
    [mt * mt * mt, three * mt * mt * t, three * mt * t * t, t * t * t]
}

/// Two cubic curves bounding the long sides of a text instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierText<T> {
    pub top: CubicBezier<T>,
    pub bottom: CubicBezier<T>,
}

impl<T: Real> BezierText<T> {
    pub fn new(top: CubicBezier<T>, bottom: CubicBezier<T>) -> Result<Self> {
        if !top.is_finite() || !bottom.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { top, bottom })
    }

    /// Canonical order: top P0..P3, then bottom P0..P3.
    pub fn control_points(&self) -> [Point2<T>; 8] {
        let t = self.top.control;
        let b = self.bottom.control;
        [t[0], t[1], t[2], t[3], b[0], b[1], b[2], b[3]]
    }

    pub fn from_control_points(p: [Point2<T>; 8]) -> Self {
        Self {
            top: CubicBezier::new(p[0], p[1], p[2], p[3]),
            bottom: CubicBezier::new(p[4], p[5], p[6], p[7]),
        }
    }

    /// Straight-sided shape from a quadrilateral `v0 v1 v2 v3` where `v0 -> v1`
    /// is the top side and `v3 -> v2` the bottom side.
    pub fn from_quad(quad: &[Point2<T>]) -> Result<Self> {
        if quad.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "quad needs 4 vertices, got {}",
                quad.len()
            )));
        }
        let line = |a: Point2<T>, b: Point2<T>| {
            let third = T::one() / T::lit(3.0);
            let d = b - a;
            CubicBezier::new(a, a + d * third, a + d * (T::one() - third), b)
        };
        Self::new(line(quad[0], quad[1]), line(quad[3], quad[2]))
    }

    pub fn map(&self, f: impl Fn(Point2<T>) -> Point2<T> + Copy) -> Self {
        Self {
            top: self.top.map(f),
            bottom: self.bottom.map(f),
        }
    }

    pub fn translated(&self, d: Point2<T>) -> Self {
        self.map(|p| p + d)
    }

    /// Boundary polygon; see [`bezier_to_polygon`].
    pub fn to_polygon(&self, samples_per_side: usize) -> Result<PolygonText<T>> {
        bezier_to_polygon(self, samples_per_side)
    }

    pub fn cast<U: Real>(&self) -> BezierText<U> {
        BezierText::from_control_points(self.control_points().map(Point2::cast))
    }
}

/// Closed polygon, vertices in boundary order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonText<T> {
    pub vertices: Vec<Point2<T>>,
}

impl<T: Real> PolygonText<T> {
    pub fn new(vertices: Vec<Point2<T>>) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::TooFewPoints {
                required: 4,
                got: vertices.len(),
            });
        }
        if !vertices.iter().all(Point2::is_finite) {
            return Err(Error::NonFinite);
        }
        Ok(Self { vertices })
    }

    pub fn area(&self) -> T {
        polygon_area(&self.vertices)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Axis-aligned box in center/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> AxisBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Result<Self> {
        let two = T::lit(2.0);
        Self::new((x0 + x1) / two, (y0 + y1) / two, x1 - x0, y1 - y0)
    }

    /// Checks `w > 0`, `h > 0` and finiteness.
    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if !(self.w > T::zero() && self.h > T::zero()) {
            return Err(Error::DegenerateBox {
                w: self.w.as_f64(),
                h: self.h.as_f64(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn x0(&self) -> T {
        self.cx - self.w / T::lit(2.0)
    }
    #[inline]
    pub fn x1(&self) -> T {
        self.cx + self.w / T::lit(2.0)
    }
    #[inline]
    pub fn y0(&self) -> T {
        self.cy - self.h / T::lit(2.0)
    }
    #[inline]
    pub fn y1(&self) -> T {
        self.cy + self.h / T::lit(2.0)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> Point2<T> {
        Point2::new(self.cx, self.cy)
    }

    /// Rectangle as a 4-vertex polygon, clockwise on screen.
    pub fn to_polygon(&self) -> PolygonText<T> {
        PolygonText {
            vertices: vec![
                Point2::new(self.x0(), self.y0()),
                Point2::new(self.x1(), self.y0()),
                Point2::new(self.x1(), self.y1()),
                Point2::new(self.x0(), self.y1()),
            ],
        }
    }

    pub fn cast<U: Real>(&self) -> AxisBox<U> {
        AxisBox {
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

/// Axis-aligned bounds of a point set.
fn bounds<T: Real>(points: impl IntoIterator<Item = Point2<T>>) -> Option<(T, T, T, T)> {
    let mut it = points.into_iter();
    let first = it.next()?;
    let init = (first.x, first.y, first.x, first.y);
    Some(it.fold(init, |(x0, y0, x1, y1), p| {
        (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y))
    }))
}

/// Shapes that can be bounded and rigidly rotated.
pub trait Shape<T: Real>: Sized {
    /// Tight axis-aligned bounds of the boundary.
    fn bbox(&self) -> Result<AxisBox<T>>;

    /// Rotation of every defining point about `pivot`.
    fn rotated(&self, angle_deg: T, pivot: Point2<T>) -> Self;
}

impl<T: Real> Shape<T> for PolygonText<T> {
    fn bbox(&self) -> Result<AxisBox<T>> {
        let (x0, y0, x1, y1) = bounds(self.vertices.iter().copied()).ok_or(Error::TooFewPoints {
            required: 1,
            got: 0,
        })?;
        AxisBox::from_corners(x0, y0, x1, y1)
    }

    fn rotated(&self, angle_deg: T, pivot: Point2<T>) -> Self {
        PolygonText {
            vertices: self
                .vertices
                .iter()
                .map(|p| p.rotated(angle_deg, pivot))
                .collect(),
        }
    }
}

impl<T: Real> Shape<T> for BezierText<T> {
    /// Bounds of the sampled curves, not of the control points.
    fn bbox(&self) -> Result<AxisBox<T>> {
        let pts = self
            .top
            .sample(BBOX_SAMPLES_PER_SIDE)
            .into_iter()
            .chain(self.bottom.sample(BBOX_SAMPLES_PER_SIDE));
        let (x0, y0, x1, y1) = bounds(pts).expect("non-empty sample");
        AxisBox::from_corners(x0, y0, x1, y1)
    }

    fn rotated(&self, angle_deg: T, pivot: Point2<T>) -> Self {
        self.map(|p| p.rotated(angle_deg, pivot))
    }
}

pub fn bbox_of<T: Real, S: Shape<T>>(shape: &S) -> Result<AxisBox<T>> {
    shape.bbox()
}

pub fn rotate_shape<T: Real, S: Shape<T>>(shape: &S, angle_deg: T, pivot: Point2<T>) -> S {
    shape.rotated(angle_deg, pivot)
}

/// Evaluates `curve` at `t`, rejecting parameters outside `[0, 1]`.
pub fn bezier_point<T: Real>(curve: &CubicBezier<T>, t: T) -> Result<Point2<T>> {
    curve.point(t)
}

/// Boundary polygon with `2 * samples_per_side` vertices: the top curve at
/// ascending `t`, then the bottom curve at descending `t`.
pub fn bezier_to_polygon<T: Real>(
    bt: &BezierText<T>,
    samples_per_side: usize,
) -> Result<PolygonText<T>> {
    if samples_per_side < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            got: samples_per_side,
        });
    }
    let mut vertices = bt.top.sample(samples_per_side);
    let mut bottom = bt.bottom.sample(samples_per_side);
    bottom.reverse();
    vertices.extend(bottom);
    PolygonText::new(vertices)
}

/// Absolute shoelace area. Accepts any vertex count; fewer than 3 gives 0.
pub fn polygon_area<T: Real>(vertices: &[Point2<T>]) -> T {
    let n = vertices.len();
    if n < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc.abs() / T::lit(2.0)
}

/// Exact IoU of two axis-aligned boxes.
pub fn box_iou<T: Real>(a: &AxisBox<T>, b: &AxisBox<T>) -> T {
    let iw = a.x1().min(b.x1()) - a.x0().max(b.x0());
    let ih = a.y1().min(b.y1()) - a.y0().max(b.y0());
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Even-odd scanline fill of one row: marks cells whose center lies inside.
fn fill_row<T: Real>(
    vertices: &[Point2<T>],
    yc: T,
    x_origin: T,
    cell: T,
    row: &mut [bool],
    crossings: &mut Vec<T>,
) {
    row.iter_mut().for_each(|c| *c = false);
    crossings.clear();
    let n = vertices.len();
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        if (p.y <= yc) != (q.y <= yc) {
            crossings.push(p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y));
        }
    }
    crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
    let half = T::lit(0.5);
    let nx = row.len() as isize;
    for span in crossings.chunks_exact(2) {
        // cell i is inside when x_origin + (i + 0.5) * cell lies in [x_a, x_b)
        let first = ((span[0] - x_origin) / cell - half).ceil();
        let end = ((span[1] - x_origin) / cell - half).ceil();
        let first = first.to_isize().unwrap_or(0).clamp(0, nx);
        let end = end.to_isize().unwrap_or(nx).clamp(0, nx);
        for c in &mut row[first as usize..end.max(first) as usize] {
            *c = true;
        }
    }
}

/// Rasterized IoU: both polygons are scan-converted on a shared grid with
/// `resolution` cells along the longer side of their joint bounding box, and
/// IoU is the ratio of inside-cell counts. Returns 0 when the union is empty.
pub fn polygon_iou<T: Real>(a: &[Point2<T>], b: &[Point2<T>], resolution: usize) -> Result<T> {
    if resolution < 64 {
        return Err(Error::InvalidArgument(format!(
            "raster resolution must be at least 64, got {resolution}"
        )));
    }
    let Some((x0, y0, x1, y1)) = bounds(a.iter().chain(b.iter()).copied()) else {
        return Ok(T::zero());
    };
    let extent = (x1 - x0).max(y1 - y0);
    if !(extent > T::zero()) {
        return Ok(T::zero());
    }
    let cell = extent / T::from_usize_lossy(resolution);
    let cells_along = |len: T| {
        (len / cell)
            .ceil()
            .to_usize()
            .unwrap_or(resolution)
            .clamp(1, resolution)
    };
    let nx = cells_along(x1 - x0);
    let ny = cells_along(y1 - y0);

    let mut row_a = vec![false; nx];
    let mut row_b = vec![false; nx];
    let mut scratch = Vec::new();
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..ny {
        let yc = y0 + (T::from_usize_lossy(j) + T::lit(0.5)) * cell;
        fill_row(a, yc, x0, cell, &mut row_a, &mut scratch);
        fill_row(b, yc, x0, cell, &mut row_b, &mut scratch);
        for (&ia, &ib) in row_a.iter().zip(&row_b) {
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        return Ok(T::zero());
    }
    Ok(T::from_usize_lossy(inter) / T::from_usize_lossy(union))
}

/// Normalized chord-length parameters, falling back to uniform spacing when
/// coincident points leave fewer than four distinct values.
pub fn chord_length_params<T: Real>(points: &[Point2<T>]) -> Vec<T> {
    let n = points.len();
    let uniform = || {
        let d = T::from_usize_lossy(n.max(2) - 1);
        (0..n).map(|i| T::from_usize_lossy(i) / d).collect::<Vec<_>>()
    };
    let mut cum = Vec::with_capacity(n);
    let mut acc = T::zero();
    cum.push(acc);
    for w in points.windows(2) {
        acc += w[0].distance(w[1]);
        cum.push(acc);
    }
    if !(acc > T::zero()) {
        return uniform();
    }
    let params: Vec<T> = cum.into_iter().map(|c| c / acc).collect();
    let distinct = 1 + params.windows(2).filter(|w| w[1] > w[0]).count();
    if distinct < 4 {
        return uniform();
    }
    params
}

/// Least-squares cubic through `points` with endpoints pinned to the first
/// and last points and the given parameter values.
pub fn fit_bezier_side_with_params<T: Real>(
    points: &[Point2<T>],
    params: &[T],
) -> Result<CubicBezier<T>> {
    if points.len() < 4 {
        return Err(Error::TooFewPoints {
            required: 4,
            got: points.len(),
        });
    }
    if params.len() != points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} parameters",
            points.len(),
            params.len()
        )));
    }
    if !points.iter().all(Point2::is_finite) {
        return Err(Error::NonFinite);
    }
    let p0 = points[0];
    let p3 = points[points.len() - 1];

    let (mut a11, mut a12, mut a22) = (T::zero(), T::zero(), T::zero());
    let mut r1 = Point2::new(T::zero(), T::zero());
    let mut r2 = r1;
    for (&p, &t) in points.iter().zip(params) {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::ParameterOutOfRange(t.as_f64()));
        }
        let [b0, b1, b2, b3] = bernstein(t);
        let r = p - p0 * b0 - p3 * b3;
        a11 += b1 * b1;
        a12 += b1 * b2;
        a22 += b2 * b2;
        r1 = r1 + r * b1;
        r2 = r2 + r * b2;
    }
    let det = a11 * a22 - a12 * a12;
    if !(det.abs() > T::epsilon() * (a11 * a22).max(T::min_positive_value())) {
        return Err(Error::InvalidArgument(
            "parameters do not determine the interior control points".into(),
        ));
    }
    let p1 = (r1 * a22 - r2 * a12) * (T::one() / det);
    let p2 = (r2 * a11 - r1 * a12) * (T::one() / det);
    Ok(CubicBezier::new(p0, p1, p2, p3))
}

/// Chord-length parameterized least-squares fit of one text side.
pub fn fit_bezier_side<T: Real>(points: &[Point2<T>]) -> Result<CubicBezier<T>> {
    if points.len() < 4 {
        return Err(Error::TooFewPoints {
            required: 4,
            got: points.len(),
        });
    }
    fit_bezier_side_with_params(points, &chord_length_params(points))
}

/// Splits an annotation polygon into its two long sides and fits each.
///
/// The first half of the vertices is the top side in reading order, the
/// second half the bottom side traversed backwards.
pub fn polygon_to_bezier<T: Real>(poly: &PolygonText<T>) -> Result<BezierText<T>> {
    let n = poly.vertices.len();
    if n % 2 != 0 {
        return Err(Error::OddVertexCount(n));
    }
    if n < 8 {
        return Err(Error::TooFewPoints { required: 8, got: n });
    }
    let (top, bottom) = poly.vertices.split_at(n / 2);
    let bottom: Vec<_> = bottom.iter().rev().copied().collect();
    BezierText::new(fit_bezier_side(top)?, fit_bezier_side(&bottom)?)
}

fn point_segment_distance<T: Real>(p: Point2<T>, a: Point2<T>, b: Point2<T>) -> T {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if !(len2 > T::zero()) {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).max(T::zero()).min(T::one());
    p.distance(a + ab * t)
}

/// Largest distance from any of `points` to `curve`, measured against a
/// polyline of `samples` curve points.
pub fn max_deviation<T: Real>(curve: &CubicBezier<T>, points: &[Point2<T>], samples: usize) -> T {
    let poly = curve.sample(samples.max(2));
    points
        .iter()
        .map(|&p| {
            poly.windows(2)
                .map(|w| point_segment_distance(p, w[0], w[1]))
                .fold(T::infinity(), T::min)
        })
        .fold(T::zero(), T::max)
}
