//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use arc_core::bottleneck::cdf_table::quantize_frequencies;
use arc_core::bottleneck::{CdfTable, ChannelTable, QuantizedLatent};
use arc_core::eval::{Detection, Rect};
use arc_core::loss::BoundingBox;
use arc_core::Tensor3;
use rand::Rng;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3<f64> {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so `|x|` is smooth under small perturbations.
pub fn random_signed<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Tensor3<f64> {
    Tensor3::from_fn(c, h, w, |_, _, _| {
        let v = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Pixel-loop region loss: average over boxes of `k + (-1)^k * MSE(box)`.
pub fn roi_loss_oracle(x: &Tensor3<f64>, xh: &Tensor3<f64>, boxes: &[BoundingBox], k: u8) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for b in boxes {
        let col0 = b.x.round() as usize;
        let row0 = b.y.round() as usize;
        let col1 = (b.x + b.w).round() as usize;
        let row1 = (b.y + b.h).round() as usize;
        let mut sq = 0.0;
        let mut count = 0.0;
        for c in 0..x.channels() {
            for row in row0..row1 {
                for col in col0..col1 {
                    let d = x.get(c, row, col) - xh.get(c, row, col);
                    sq += d * d;
                    count += 1.0;
                }
            }
        }
        let m = sq / count;
        total += if k == 0 { m } else { 1.0 - m };
    }
    total / boxes.len() as f64
}

fn oracle_iou(a: &Rect, b: &Rect) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Brute-force VOC AP: explicit greedy matching, the full PR table, and for
/// every recall step the best precision at any equal-or-higher recall.
pub fn brute_force_ap(dets: &[Detection], gts: &BTreeMap<String, Vec<Rect>>, threshold: f64) -> (f64, usize, usize) {
    let num_gt: usize = gts.values().map(|v| v.len()).sum();
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // stable: equal confidences keep input order
    idx.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut taken: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut flags = Vec::new();
    for &i in &idx {
        let d = &dets[i];
        let boxes = gts.get(&d.image_id).cloned().unwrap_or_default();
        let used = taken.entry(d.image_id.as_str()).or_insert_with(|| vec![false; boxes.len()]);
        let mut best = -1.0;
        let mut best_j = None;
        for (j, g) in boxes.iter().enumerate() {
            let v = oracle_iou(&d.rect, g);
            if !used[j] && v > best {
                best = v;
                best_j = Some(j);
            }
        }
        let hit = best_j.is_some() && best >= threshold;
        if hit {
            used[best_j.unwrap()] = true;
        }
        flags.push(hit);
    }
    let tp = flags.iter().filter(|f| **f).count();
    let fp = flags.len() - tp;
    if num_gt == 0 || flags.is_empty() {
        return (0.0, tp, fp);
    }
    let mut table = Vec::new();
    let mut ctp = 0.0;
    for (n, f) in flags.iter().enumerate() {
        if *f {
            ctp += 1.0;
        }
        table.push((ctp / num_gt as f64, ctp / (n as f64 + 1.0)));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in table.iter().enumerate() {
        if r > prev_recall {
            let best_precision = table[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev_recall) * best_precision;
            prev_recall = r;
        }
    }
    (ap, tp, fp)
}

/// A table with random per-channel ranges and (sometimes very skewed) frequencies.
pub fn random_table<R: Rng>(rng: &mut R, channels: usize) -> CdfTable {
    let tables = (0..channels)
        .map(|_| {
            let n = match rng.gen_range(0..4) {
                0 => 1,
                1 => rng.gen_range(2..8),
                2 => rng.gen_range(8..200),
                _ => rng.gen_range(200..3000),
            };
            let skew = rng.gen_range(0.0..6.0);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..1.0).powf(skew) + 1e-12).collect();
            let freqs = quantize_frequencies(&probs).unwrap();
            let min = rng.gen_range(-500..50);
            ChannelTable::from_frequencies(rng.gen_range(-1.0..1.0), min, &freqs).unwrap()
        })
        .collect();
    CdfTable { channels: tables }
}

/// Symbols drawn from each channel's own table distribution.
pub fn sample_symbols<R: Rng>(rng: &mut R, table: &CdfTable, shape: [usize; 3]) -> QuantizedLatent {
    let plane = shape[1] * shape[2];
    let symbols = (0..shape.iter().product::<usize>())
        .map(|i| {
            let t = &table.channels[i / plane];
            let target = rng.gen_range(0..65536u32);
            let idx = t.cum[1..].partition_point(|&c| c <= target);
            t.min_symbol + idx as i32
        })
        .collect();
    QuantizedLatent::new(shape, symbols).unwrap()
}

pub fn random_box<R: Rng>(rng: &mut R, width: usize, height: usize, role: arc_core::loss::BoxRole) -> BoundingBox {
    let w = rng.gen_range(1..=width) as f64;
    let h = rng.gen_range(1..=height) as f64;
    let x = rng.gen_range(0.0..=(width as f64 - w));
    let y = rng.gen_range(0.0..=(height as f64 - h));
    // whole-pixel sizes keep the rounded extent inside the image
    BoundingBox::new(x.floor(), y.floor(), w, h, role)
}
