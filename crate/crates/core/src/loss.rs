//! Training objective: rate, full-image distortion and the box-region losses.
//!
//! The region loss over a set of boxes is
//! `L_k = mean_b [ k + (-1)^k * mse(crop(x, b), crop(x_hat, b)) ]`:
//! `k = 0` is the mean box MSE (person boxes), `k = 1` is `1 - MSE`
//! (head boxes), which rewards destroying the region. The weighted total is
//! `lambda_r * R + lambda_bg * L_bg + lambda_hbox * L_hbox + lambda_vbox * L_vbox`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxRole {
    /// Head box.
    Hbox,
    /// Visible-person box.
    Vbox,
}

impl std::fmt::Display for BoxRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoxRole::Hbox => "hbox",
            BoxRole::Vbox => "vbox",
        })
    }
}

impl std::str::FromStr for BoxRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hbox" => Ok(BoxRole::Hbox),
            "vbox" => Ok(BoxRole::Vbox),
            other => Err(Error::Config(format!("unknown box role `{other}` (expected hbox or vbox)"))),
        }
    }
}

/// Pixel-space rectangle `(x, y, w, h)` tagged with its annotation role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub role: BoxRole,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, role: BoxRole) -> Self {
        Self { x, y, w, h, role }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Check the box invariants against an image of `width x height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite
            || self.w < 1.0
            || self.h < 1.0
            || self.x < 0.0
            || self.y < 0.0
            || self.right() > width as f64 + 1e-9
            || self.bottom() > height as f64 + 1e-9
        {
            return Err(Error::Input(format!(
                "box ({}, {}, {}, {}) is degenerate or outside a {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Integer pixel bounds `(x0, y0, x1, y1)`, half-open, from rounded edges.
    ///
    /// A valid box always covers at least one pixel in each direction.
    pub fn pixel_bounds(&self) -> (usize, usize, usize, usize) {
        let r = |v: f64| v.round().max(0.0) as usize;
        (r(self.x), r(self.y), r(self.right()), r(self.bottom()))
    }
}

/// All boxes of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxSet(pub Vec<BoundingBox>);

impl BoxSet {
    pub fn new(boxes: Vec<BoundingBox>) -> Self {
        Self(boxes)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BoundingBox> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with_role(&self, role: BoxRole) -> Vec<BoundingBox> {
        self.0.iter().filter(|b| b.role == role).copied().collect()
    }

    pub fn count(&self, role: BoxRole) -> usize {
        self.0.iter().filter(|b| b.role == role).count()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        self.0.iter().try_for_each(|b| b.validate(width, height))
    }
}

/// The `k` of the region loss: 0 = plain, 1 = inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiLossSpec {
    k: u8,
}

impl RoiLossSpec {
    pub const PLAIN: Self = Self { k: 0 };
    pub const INVERTED: Self = Self { k: 1 };

    pub fn new(k: i64) -> Result<Self> {
        match k {
            0 | 1 => Ok(Self { k: k as u8 }),
            other => Err(Error::Config(format!("ROI loss k must be 0 or 1, got {other}"))),
        }
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    fn offset<S: Scalar>(&self) -> S {
        S::lit(self.k as f64)
    }

    fn sign<S: Scalar>(&self) -> S {
        if self.k == 0 {
            S::one()
        } else {
            -S::one()
        }
    }
}

/// Non-negative weights of the four loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_bg: f64,
    pub lambda_hbox: f64,
    pub lambda_vbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.04,
            lambda_bg: 1.0,
            lambda_hbox: 0.6,
            lambda_vbox: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_bg", self.lambda_bg),
            ("lambda_hbox", self.lambda_hbox),
            ("lambda_vbox", self.lambda_vbox),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Components `(R, L_bg, L_hbox, L_vbox)` and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rate: f64,
    pub bg: f64,
    pub hbox: f64,
    pub vbox: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(rate: f64, bg: f64, hbox: f64, vbox: f64, weights: &LossWeights) -> Result<Self> {
        for (name, v) in [("rate", rate), ("bg", bg), ("hbox", hbox), ("vbox", vbox)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss component `{name}` is {v}")));
            }
        }
        let total = weights.lambda_r * rate
            + weights.lambda_bg * bg
            + weights.lambda_hbox * hbox
            + weights.lambda_vbox * vbox;
        Ok(Self {
            rate,
            bg,
            hbox,
            vbox,
            total,
        })
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            rate: sum(|b| b.rate),
            bg: sum(|b| b.bg),
            hbox: sum(|b| b.hbox),
            vbox: sum(|b| b.vbox),
            total: sum(|b| b.total),
        }
    }
}

fn check_box_in<S: Scalar>(t: &Tensor3<S>, b: &BoundingBox) -> Result<(usize, usize, usize, usize)> {
    b.validate(t.width(), t.height())?;
    let (x0, y0, x1, y1) = b.pixel_bounds();
    if x1 > t.width() || y1 > t.height() || x1 <= x0 || y1 <= y0 {
        return Err(Error::Input(format!("box pixels ({x0},{y0})-({x1},{y1}) fall outside the image")));
    }
    Ok((x0, y0, x1, y1))
}

/// Sub-image `[C, h, w]` covered by `b`; output `(i, j)` = input `(b.y + i, b.x + j)`.
pub fn crop<S: Scalar>(t: &ImageTensor<S>, b: &BoundingBox) -> Result<ImageTensor<S>> {
    let (x0, y0, x1, y1) = check_box_in(t, b)?;
    Ok(Tensor3::from_fn(t.channels(), y1 - y0, x1 - x0, |c, i, j| t.get(c, y0 + i, x0 + j)))
}

pub fn mse<S: Scalar>(a: &Tensor3<S>, b: &Tensor3<S>) -> Result<S> {
    if !a.same_shape(b) {
        return Err(Error::Input(format!(
            "mse of differently shaped tensors {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Ok(S::zero());
    }
    let sum: S = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&u, &v)| (u - v) * (u - v))
        .sum();
    Ok(sum / S::lit(a.len() as f64))
}

/// Add `coeff * d mse(a, b) / d b` into `grad`.
pub fn mse_grad<S: Scalar>(a: &Tensor3<S>, b: &Tensor3<S>, coeff: S, grad: &mut Tensor3<S>) -> Result<()> {
    if !a.same_shape(b) || !a.same_shape(grad) {
        return Err(Error::Input("mse gradient of differently shaped tensors".into()));
    }
    let scale = S::lit(2.0) * coeff / S::lit(a.len().max(1) as f64);
    for ((g, &u), &v) in grad.as_mut_slice().iter_mut().zip(a.as_slice()).zip(b.as_slice()) {
        *g += scale * (v - u);
    }
    Ok(())
}

/// `mse(crop(x, b), crop(x_hat, b))` without materializing the crops.
pub fn box_mse<S: Scalar>(x: &ImageTensor<S>, x_hat: &ImageTensor<S>, b: &BoundingBox) -> Result<S> {
    if !x.same_shape(x_hat) {
        return Err(Error::Input("box mse of differently shaped images".into()));
    }
    let (x0, y0, x1, y1) = check_box_in(x, b)?;
    let mut sum = S::zero();
    for c in 0..x.channels() {
        for r in y0..y1 {
            for col in x0..x1 {
                let d = x.get(c, r, col) - x_hat.get(c, r, col);
                sum += d * d;
            }
        }
    }
    Ok(sum / S::lit((x.channels() * (y1 - y0) * (x1 - x0)) as f64))
}

/// Add `coeff * d box_mse / d x_hat` into `grad`.
pub fn box_mse_grad<S: Scalar>(
    x: &ImageTensor<S>,
    x_hat: &ImageTensor<S>,
    b: &BoundingBox,
    coeff: S,
    grad: &mut Tensor3<S>,
) -> Result<()> {
    let (x0, y0, x1, y1) = check_box_in(x, b)?;
    let scale = S::lit(2.0) * coeff / S::lit((x.channels() * (y1 - y0) * (x1 - x0)) as f64);
    for c in 0..x.channels() {
        for r in y0..y1 {
            for col in x0..x1 {
                let g = grad.get(c, r, col) + scale * (x_hat.get(c, r, col) - x.get(c, r, col));
                grad.set(c, r, col, g);
            }
        }
    }
    Ok(())
}

/// Region loss `mean_b [k + (-1)^k mse_b]`; 0 for an empty box set.
pub fn roi_loss<S: Scalar>(
    x: &ImageTensor<S>,
    x_hat: &ImageTensor<S>,
    boxes: &[BoundingBox],
    spec: RoiLossSpec,
) -> Result<S> {
    if !x.same_shape(x_hat) {
        return Err(Error::Input("roi loss of differently shaped images".into()));
    }
    if boxes.is_empty() {
        return Ok(S::zero());
    }
    let mut sum = S::zero();
    for b in boxes {
        sum += spec.offset::<S>() + spec.sign::<S>() * box_mse(x, x_hat, b)?;
    }
    Ok(sum / S::lit(boxes.len() as f64))
}

/// Add `coeff * d roi_loss / d x_hat` into `grad`.
pub fn roi_loss_grad<S: Scalar>(
    x: &ImageTensor<S>,
    x_hat: &ImageTensor<S>,
    boxes: &[BoundingBox],
    spec: RoiLossSpec,
    coeff: S,
    grad: &mut Tensor3<S>,
) -> Result<()> {
    if boxes.is_empty() {
        return Ok(());
    }
    let per_box = coeff * spec.sign::<S>() / S::lit(boxes.len() as f64);
    boxes
        .iter()
        .try_for_each(|b| box_mse_grad(x, x_hat, b, per_box, grad))
}

/// Single-image objective.
pub fn total_loss<S: Scalar>(
    rate: f64,
    x: &ImageTensor<S>,
    x_hat: &ImageTensor<S>,
    hboxes: &[BoundingBox],
    vboxes: &[BoundingBox],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut acc = BatchLoss::default();
    acc.add_image(rate, x, x_hat, hboxes, vboxes)?;
    acc.finish(weights)
}

/// Batch aggregation: rate and `L_bg` are image means; `L_hbox` and `L_vbox`
/// are means over all boxes of the role pooled across the batch, so images
/// without boxes of a role do not dilute that role's loss.
#[derive(Debug, Clone, Default)]
pub struct BatchLoss {
    images: usize,
    rate_sum: f64,
    bg_sum: f64,
    hbox_sum: f64,
    hbox_count: usize,
    vbox_sum: f64,
    vbox_count: usize,
}

impl BatchLoss {
    pub fn add_image<S: Scalar>(
        &mut self,
        rate: f64,
        x: &ImageTensor<S>,
        x_hat: &ImageTensor<S>,
        hboxes: &[BoundingBox],
        vboxes: &[BoundingBox],
    ) -> Result<()> {
        self.images += 1;
        self.rate_sum += rate;
        self.bg_sum += mse(x, x_hat)?.as_f64();
        for b in hboxes {
            self.hbox_sum += 1.0 - box_mse(x, x_hat, b)?.as_f64();
        }
        for b in vboxes {
            self.vbox_sum += box_mse(x, x_hat, b)?.as_f64();
        }
        self.hbox_count += hboxes.len();
        self.vbox_count += vboxes.len();
        Ok(())
    }

    /// Add already-computed per-image terms: rate, full-image MSE and per-box MSEs.
    pub fn add_raw(&mut self, rate: f64, bg: f64, hbox_mses: &[f64], vbox_mses: &[f64]) {
        self.images += 1;
        self.rate_sum += rate;
        self.bg_sum += bg;
        self.hbox_sum += hbox_mses.iter().map(|m| 1.0 - m).sum::<f64>();
        self.vbox_sum += vbox_mses.iter().sum::<f64>();
        self.hbox_count += hbox_mses.len();
        self.vbox_count += vbox_mses.len();
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn finish(&self, weights: &LossWeights) -> Result<LossBreakdown> {
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        LossBreakdown::from_components(
            mean(self.rate_sum, self.images),
            mean(self.bg_sum, self.images),
            mean(self.hbox_sum, self.hbox_count),
            mean(self.vbox_sum, self.vbox_count),
            weights,
        )
    }
}

/// MSE over pixels covered by no box at all; `None` if every pixel is covered.
pub fn outside_boxes_mse<S: Scalar>(x: &ImageTensor<S>, x_hat: &ImageTensor<S>, boxes: &BoxSet) -> Result<Option<f64>> {
    if !x.same_shape(x_hat) {
        return Err(Error::Input("outside-box mse of differently shaped images".into()));
    }
    let (h, w) = (x.height(), x.width());
    let mut covered = vec![false; h * w];
    for b in boxes.iter() {
        let (x0, y0, x1, y1) = check_box_in(x, b)?;
        for r in y0..y1 {
            covered[r * w + x0..r * w + x1].iter_mut().for_each(|c| *c = true);
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..x.channels() {
        for (idx, _) in covered.iter().enumerate().filter(|(_, &cov)| !cov) {
            let d = (x.get(c, idx / w, idx % w) - x_hat.get(c, idx / w, idx % w)).as_f64();
            sum += d * d;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}
