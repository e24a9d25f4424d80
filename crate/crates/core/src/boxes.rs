//! Axis-aligned box geometry: IoU and its analytic gradient, the
//! center/log-size delta encoding relative to a reference box, clipping.
//!
//! Boxes live in continuous coordinates: the intersection width is
//! `max(0, min(x2) - max(x1))` with no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bound on `|tw|`, `|th|` before exponentiation in [`decode`].
pub const DELTA_LOG_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Copy> From<[T; 4]> for BBox<T> {
    fn from(a: [T; 4]) -> Self {
        Self { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }
    }
}

impl<T: Copy> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl<T: Scalar> BBox<T> {
    /// Corner-form constructor; rejects inverted or non-finite coordinates.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Input(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self {
            x1: cx - half * w,
            y1: cy - half * h,
            x2: cx + half * w,
            y2: cy + half * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite();
        finite && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    #[inline]
    pub fn cx(&self) -> T {
        (self.x1 + self.x2) * T::lit(0.5)
    }

    #[inline]
    pub fn cy(&self) -> T {
        (self.y1 + self.y2) * T::lit(0.5)
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    /// Zero area (or inverted).
    pub fn is_degenerate(&self) -> bool {
        !(self.width() > T::zero() && self.height() > T::zero())
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        (*self).into()
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::lit(self.x1.as_f64()),
            y1: U::lit(self.y1.as_f64()),
            x2: U::lit(self.x2.as_f64()),
            y2: U::lit(self.y2.as_f64()),
        }
    }
}

/// Encoded offsets of a box relative to a reference: center shift in
/// reference units and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta<T> {
    pub tx: T,
    pub ty: T,
    pub tw: T,
    pub th: T,
}

impl<T: Scalar> Delta<T> {
    pub fn new(tx: T, ty: T, tw: T, th: T) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn intersection_extent<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> (T, T) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    (iw, ih)
}

/// Intersection over union; 0 for disjoint boxes and when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (iw, ih) = intersection_extent(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() || inter <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Analytic `d IoU(pred, fixed) / d (x1, y1, x2, y2)` of `pred`.
///
/// The intersection edges are piecewise: where both boxes share an edge
/// coordinate the predicted box is taken to own it, which gives the
/// one-sided derivative in the direction that shrinks the intersection.
/// Degenerate or non-overlapping predictions get a zero gradient.
pub fn iou_grad<T: Scalar>(pred: &BBox<T>, fixed: &BBox<T>) -> [T; 4] {
    let zero = [T::zero(); 4];
    if pred.is_degenerate() {
        return zero;
    }
    let (iw, ih) = intersection_extent(pred, fixed);
    if iw <= T::zero() || ih <= T::zero() {
        return zero;
    }
    let inter = iw * ih;
    let union = pred.area() + fixed.area() - inter;
    if union <= T::zero() {
        return zero;
    }
    let (pw, ph) = (pred.width(), pred.height());
    // d(inter) / d coord
    let di = [
        if pred.x1 >= fixed.x1 { -ih } else { T::zero() },
        if pred.y1 >= fixed.y1 { -iw } else { T::zero() },
        if pred.x2 <= fixed.x2 { ih } else { T::zero() },
        if pred.y2 <= fixed.y2 { iw } else { T::zero() },
    ];
    // d(area_pred) / d coord
    let da = [-ph, -pw, ph, pw];
    let u2 = union * union;
    let mut g = zero;
    for k in 0..4 {
        // dIoU = (dI * U - I * (dA - dI)) / U^2
        g[k] = (di[k] * union - inter * (da[k] - di[k])) / u2;
    }
    g
}

/// Encodes `target` relative to `reference`.
pub fn encode<T: Scalar>(target: &BBox<T>, reference: &BBox<T>) -> Result<Delta<T>> {
    let (rw, rh) = (reference.width(), reference.height());
    let (w, h) = (target.width(), target.height());
    if !(rw > T::zero() && rh > T::zero()) {
        return Err(Error::Encoding(format!("reference extent {rw}x{rh} must be positive")));
    }
    if !(w > T::zero() && h > T::zero()) {
        return Err(Error::Encoding(format!("target extent {w}x{h} must be positive")));
    }
    Ok(Delta {
        tx: (target.cx() - reference.cx()) / rw,
        ty: (target.cy() - reference.cy()) / rh,
        tw: (w / rw).ln(),
        th: (h / rh).ln(),
    })
}

fn clamp_log<T: Scalar>(t: T) -> (T, bool) {
    let c = T::lit(DELTA_LOG_CLAMP);
    if t > c {
        (c, true)
    } else if t < -c {
        (-c, true)
    } else {
        (t, false)
    }
}

/// Inverse of [`encode`]; `tw`, `th` are clamped to `±DELTA_LOG_CLAMP`.
pub fn decode<T: Scalar>(delta: &Delta<T>, reference: &BBox<T>) -> BBox<T> {
    let (rw, rh) = (reference.width(), reference.height());
    let cx = reference.cx() + delta.tx * rw;
    let cy = reference.cy() + delta.ty * rh;
    let w = rw * clamp_log(delta.tw).0.exp();
    let h = rh * clamp_log(delta.th).0.exp();
    BBox::from_center(cx, cy, w, h)
}

/// Jacobian of [`decode`]: `jac[i][j] = d box_i / d delta_j` with box order
/// `(x1, y1, x2, y2)` and delta order `(tx, ty, tw, th)`. Clamped log
/// components have zero derivative.
pub fn decode_jacobian<T: Scalar>(delta: &Delta<T>, reference: &BBox<T>) -> [[T; 4]; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let half = T::lit(0.5);
    let (tw, cw) = clamp_log(delta.tw);
    let (th, ch) = clamp_log(delta.th);
    let dw = if cw { T::zero() } else { rw * tw.exp() * half };
    let dh = if ch { T::zero() } else { rh * th.exp() * half };
    let z = T::zero();
    [
        [rw, z, -dw, z],
        [z, rh, z, -dh],
        [rw, z, dw, z],
        [z, rh, z, dh],
    ]
}

/// Chains a box-coordinate gradient through [`decode`] to delta space.
pub fn box_grad_to_delta<T: Scalar>(box_grad: &[T; 4], delta: &Delta<T>, reference: &BBox<T>) -> [T; 4] {
    let jac = decode_jacobian(delta, reference);
    let mut out = [T::zero(); 4];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (0..4).fold(T::zero(), |acc, i| acc + box_grad[i] * jac[i][j]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clipped<T> {
    pub bbox: BBox<T>,
    /// Zero area after clipping.
    pub degenerate: bool,
}

/// Clamps every coordinate into `[0, image extent]`.
pub fn clip<T: Scalar>(b: &BBox<T>, image_w: T, image_h: T) -> Clipped<T> {
    let cl = |v: T, hi: T| v.max(T::zero()).min(hi);
    let bbox = BBox {
        x1: cl(b.x1, image_w),
        y1: cl(b.y1, image_h),
        x2: cl(b.x2, image_w),
        y2: cl(b.y2, image_h),
    };
    Clipped {
        degenerate: bbox.is_degenerate(),
        bbox,
    }
}
