//! Segmentation, image and flow metrics.

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `L x L` counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub total_acc: f64,
    /// Mean per-class recall over classes present in the ground truth.
    pub avg_acc: f64,
    /// Mean IoU over classes present in ground truth or prediction.
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(pred: &[u8], gt: &[u8], classes: usize) -> Result<Self> {
        let mut m = Self::new(classes);
        m.add_labels(pred, gt)?;
        Ok(m)
    }

    pub fn add_labels(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predicted vs {} reference labels",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.classes;
        if let Some(c) = pred.iter().chain(gt).find(|&&c| usize::from(c) >= l) {
            return Err(Error::OutOfRange(format!("class {c} with {l} classes")));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            self.counts[usize::from(t) * l + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Adds the counts of `other` (same class count).
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(
            self.classes, other.classes,
            "merging confusion matrices of different sizes"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn metrics(&self) -> PixelMetrics {
        let l = self.classes;
        let row = |c: usize| (0..l).map(|j| self.get(c, j)).sum::<u64>();
        let col = |c: usize| (0..l).map(|i| self.get(i, c)).sum::<u64>();
        let total = self.total();
        let total_acc = if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        };
        let (mut recall, mut n_recall, mut iou, mut n_iou) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..l {
            let tp = self.get(c, c) as f64;
            let (r, k) = (row(c), col(c));
            if r > 0 {
                recall += tp / r as f64;
                n_recall += 1;
            }
            let union = r + k - self.get(c, c);
            if union > 0 {
                iou += tp / union as f64;
                n_iou += 1;
            }
        }
        PixelMetrics {
            total_acc,
            avg_acc: if n_recall == 0 {
                0.0
            } else {
                recall / n_recall as f64
            },
            miou: if n_iou == 0 { 0.0 } else { iou / n_iou as f64 },
        }
    }
}

pub fn pixel_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Result<PixelMetrics> {
    Ok(ConfusionMatrix::from_labels(pred, gt, classes)?.metrics())
}

fn check_images(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "images of {} and {} values for {width}x{height} RGB",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "images of {} and {} values",
            pred.len(),
            gt.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalised 11-tap Gaussian with standard deviation 1.5.
fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `height x width` plane.
fn filter(plane: &[f64], width: usize, height: usize, k: &[f64; 11]) -> Vec<f64> {
    let ow = width - 10;
    let oh = height - 10;
    let mut tmp = vec![0.0; height * ow];
    for r in 0..height {
        for c in 0..ow {
            tmp[r * ow + c] = (0..11).map(|i| k[i] * plane[r * width + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..11).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions, averaged over channels.
pub fn ssim(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Result<f64> {
    check_images(pred, gt, width, height)?;
    if width < 11 || height < 11 {
        return Err(Error::Shape(format!(
            "SSIM needs at least 11x11 pixels, got {width}x{height}"
        )));
    }
    let k = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut acc = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = pred
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
        let y: Vec<f64> = gt
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter(&x, width, height, &k);
        let my = filter(&y, width, height, &k);
        let sxx = filter(&xx, width, height, &k);
        let syy = filter(&yy, width, height, &k);
        let sxy = filter(&xy, width, height, &k);
        let n = mx.len();
        let mut s = 0.0;
        for i in 0..n {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            s += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
        }
        acc += s / n as f64;
    }
    Ok(acc / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of `height x width` RGB images in `[0, 1]`.
pub fn image_metrics(
    pred: &[f32],
    gt: &[f32],
    width: usize,
    height: usize,
) -> Result<ImageMetrics> {
    check_images(pred, gt, width, height)?;
    Ok(ImageMetrics {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt, width, height)?,
    })
}

/// Mean end-point error of interleaved `(dx, dy)` flows over the selected
/// pixels; `None` when no pixel is selected.
pub fn mean_epe(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() || pred.len() != 2 * mask.len() {
        return Err(Error::Shape(format!(
            "flows of {} and {} values for {} pixels",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let dx = f64::from(pred[2 * i]) - f64::from(gt[2 * i]);
        let dy = f64::from(pred[2 * i + 1]) - f64::from(gt[2 * i + 1]);
        sum += dx.hypot(dy);
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}
