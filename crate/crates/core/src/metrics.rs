//! SSIM, head-focused SSIM loss, the combined loss value, counting and count errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_GAMMA1: f64 = 1e-4;
pub const DEFAULT_GAMMA2: f64 = 9e-4;
pub const DEFAULT_HEAD_WINDOW: (usize, usize) = (16, 16);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the pixelwise MSE term.
    pub theta: f64,
    /// Weight of the I-SSIM term.
    pub eta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            theta: 1.0,
            eta: 1.0,
            gamma1: DEFAULT_GAMMA1,
            gamma2: DEFAULT_GAMMA2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.theta, self.eta, self.gamma1, self.gamma2];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Head coordinates `(row, col)` on one fragment.
pub type HeadList = Vec<(usize, usize)>;

fn same_dims(e: &Raster, g: &Raster) -> Result<()> {
    if e.dims() != g.dims() {
        return Err(Error::ShapeMismatch {
            left: e.dims(),
            right: g.dims(),
        });
    }
    Ok(())
}

/// Rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Window {
    pub fn full(dims: (usize, usize)) -> Self {
        Window {
            top: 0,
            bottom: dims.0,
            left: 0,
            right: dims.1,
        }
    }

    /// `size` window centered on `(row, col)`, clipped to `dims`.
    pub fn centered(row: usize, col: usize, size: (usize, usize), dims: (usize, usize)) -> Self {
        let top = row.saturating_sub(size.0 / 2);
        let left = col.saturating_sub(size.1 / 2);
        Window {
            top,
            bottom: (row + size.0 - size.0 / 2).min(dims.0),
            left,
            right: (col + size.1 - size.1 / 2).min(dims.1),
        }
    }

    fn pixels(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// SSIM with global (unweighted, population) statistics over `win`.
pub fn ssim_window(e: &Raster, g: &Raster, win: Window, gamma1: f64, gamma2: f64) -> Result<f64> {
    same_dims(e, g)?;
    if win.bottom > e.height() || win.right > e.width() || win.pixels() == 0 {
        return Err(Error::InvalidParameter(format!("window {win:?} outside raster {:?}", e.dims())));
    }
    let n = win.pixels() as f64;
    let (mut sum_e, mut sum_g) = (0.0, 0.0);
    for r in win.top..win.bottom {
        for c in win.left..win.right {
            sum_e += e.get(r, c);
            sum_g += g.get(r, c);
        }
    }
    let (mu_e, mu_g) = (sum_e / n, sum_g / n);
    let (mut var_e, mut var_g, mut cov) = (0.0, 0.0, 0.0);
    for r in win.top..win.bottom {
        for c in win.left..win.right {
            let de = e.get(r, c) - mu_e;
            let dg = g.get(r, c) - mu_g;
            var_e += de * de;
            var_g += dg * dg;
            cov += de * dg;
        }
    }
    let (var_e, var_g, cov) = (var_e / n, var_g / n, cov / n);
    Ok(((2.0 * mu_e * mu_g + gamma1) * (2.0 * cov + gamma2))
        / ((mu_e * mu_e + mu_g * mu_g + gamma1) * (var_e + var_g + gamma2)))
}

pub fn ssim(e: &Raster, g: &Raster, gamma1: f64, gamma2: f64) -> Result<f64> {
    same_dims(e, g)?;
    ssim_window(e, g, Window::full(e.dims()), gamma1, gamma2)
}

/// Mean of `1 - SSIM` over head-centered windows; zero when there are no heads.
pub fn issim_loss(
    e: &Raster,
    g: &Raster,
    heads: &[(usize, usize)],
    head_window: (usize, usize),
    gamma1: f64,
    gamma2: f64,
) -> Result<f64> {
    same_dims(e, g)?;
    if head_window.0 == 0 || head_window.1 == 0 {
        return Err(Error::InvalidWindow);
    }
    if heads.is_empty() {
        return Ok(0.0);
    }
    let dims = e.dims();
    let mut total = 0.0;
    for &(row, col) in heads {
        if row >= dims.0 || col >= dims.1 {
            return Err(Error::HeadOutOfBounds {
                row,
                col,
                height: dims.0,
                width: dims.1,
            });
        }
        total += 1.0 - ssim_window(e, g, Window::centered(row, col, head_window, dims), gamma1, gamma2)?;
    }
    Ok(total / heads.len() as f64)
}

pub fn mse(e: &Raster, g: &Raster) -> Result<f64> {
    same_dims(e, g)?;
    let n = e.values().len() as f64;
    Ok(e.values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `theta * MSE + eta * I-SSIM`.
pub fn combined_loss(
    e: &Raster,
    g: &Raster,
    heads: &[(usize, usize)],
    head_window: (usize, usize),
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let pixel = mse(e, g)?;
    let structure = issim_loss(e, g, heads, head_window, weights.gamma1, weights.gamma2)?;
    Ok(weights.theta * pixel + weights.eta * structure)
}

/// Estimated count of a density map: the sum of its pixels.
pub fn count(density: &Raster) -> f64 {
    density.sum()
}

fn paired(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no counts to compare".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    paired(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    paired(preds, gts)?;
    Ok((preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image: String,
    pub pred: f64,
    pub gt: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub per_image: Vec<ImageEval>,
}

/// Count errors over named images, in the order given.
pub fn evaluate(images: &[(String, f64, f64)]) -> Result<EvalReport> {
    let preds: Vec<f64> = images.iter().map(|i| i.1).collect();
    let gts: Vec<f64> = images.iter().map(|i| i.2).collect();
    Ok(EvalReport {
        mae: mae(&preds, &gts)?,
        rmse: rmse(&preds, &gts)?,
        per_image: images
            .iter()
            .map(|(image, pred, gt)| ImageEval {
                image: image.clone(),
                pred: *pred,
                gt: *gt,
                abs_error: (pred - gt).abs(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterKind;

    fn r(rows: &[Vec<f64>]) -> Raster {
        Raster::from_rows(RasterKind::DensityMap, rows).unwrap()
    }

    #[test]
    fn ssim_cases() {
        let e = r(&[vec![0.1, 0.5], vec![0.9, 0.0]]);
        assert_eq!(ssim(&e, &e, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap(), 1.0);
        let zero = Raster::filled(4, 4, RasterKind::DensityMap, 0.0).unwrap();
        let one = Raster::filled(4, 4, RasterKind::DensityMap, 1.0).unwrap();
        let s = ssim(&zero, &one, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
        let hand = (DEFAULT_GAMMA1 * DEFAULT_GAMMA2) / ((1.0 + DEFAULT_GAMMA1) * DEFAULT_GAMMA2);
        assert!((s - hand).abs() <= 1e-12);
        assert_eq!(ssim(&e, &zero, 1e-4, 9e-4).unwrap_err().code(), "dim-mismatch");
    }

    #[test]
    fn issim_cases() {
        let e = r(&[vec![0.1, 0.5, 0.0, 0.3], vec![0.9, 0.0, 0.2, 0.2]]);
        let g = r(&[vec![0.2, 0.4, 0.0, 0.0], vec![0.7, 0.1, 0.6, 0.2]]);
        assert_eq!(issim_loss(&e, &e, &[(0, 0), (1, 3)], (16, 16), 1e-4, 9e-4).unwrap(), 0.0);
        assert_eq!(issim_loss(&e, &g, &[], (16, 16), 1e-4, 9e-4).unwrap(), 0.0);
        let whole = issim_loss(&e, &g, &[(1, 1)], (16, 16), 1e-4, 9e-4).unwrap();
        assert!((whole - (1.0 - ssim(&e, &g, 1e-4, 9e-4).unwrap())).abs() < 1e-15);

        // 2x2 windows centered on (1,1) and (1,3) cover columns 0..2 and 2..4
        let two = issim_loss(&e, &g, &[(1, 1), (1, 3)], (2, 2), 1e-4, 9e-4).unwrap();
        let left = r(&[vec![0.1, 0.5], vec![0.9, 0.0]]);
        let left_g = r(&[vec![0.2, 0.4], vec![0.7, 0.1]]);
        let right = r(&[vec![0.0, 0.3], vec![0.2, 0.2]]);
        let right_g = r(&[vec![0.0, 0.0], vec![0.6, 0.2]]);
        let hand = ((1.0 - ssim(&left, &left_g, 1e-4, 9e-4).unwrap())
            + (1.0 - ssim(&right, &right_g, 1e-4, 9e-4).unwrap()))
            / 2.0;
        assert!((two - hand).abs() < 1e-15);

        assert_eq!(
            issim_loss(&e, &g, &[(2, 0)], (16, 16), 1e-4, 9e-4).unwrap_err().code(),
            "head-out-of-bounds"
        );
    }

    #[test]
    fn window_clipping() {
        assert_eq!(
            Window::centered(2, 30, (16, 16), (40, 36)),
            Window {
                top: 0,
                bottom: 10,
                left: 22,
                right: 36
            }
        );
    }

    #[test]
    fn combined_loss_cases() {
        let e = r(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = r(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        let w = LossWeights::default();
        assert_eq!(combined_loss(&e, &e, &[(0, 0)], (16, 16), &w).unwrap(), 0.0);
        let pixel_only = LossWeights { eta: 0.0, ..w };
        assert_eq!(combined_loss(&e, &g, &[(0, 0)], (16, 16), &pixel_only).unwrap(), 0.25);

        // hand evaluation: mu_e = 0.5, mu_g = 0.25, var_e = 0.25, var_g = 0.1875, cov = 0.125
        let (g1, g2) = (DEFAULT_GAMMA1, DEFAULT_GAMMA2);
        let s = ((2.0 * 0.5 * 0.25 + g1) * (2.0 * 0.125 + g2)) / ((0.25 + 0.0625 + g1) * (0.25 + 0.1875 + g2));
        let total = combined_loss(&e, &g, &[(0, 0)], (16, 16), &w).unwrap();
        assert!((total - (0.25 + (1.0 - s))).abs() < 1e-15);
    }

    #[test]
    fn counting_and_errors() {
        assert_eq!(count(&Raster::filled(2, 2, RasterKind::DensityMap, 0.25).unwrap()), 1.0);
        assert_eq!(count(&Raster::filled(3, 3, RasterKind::DensityMap, 0.0).unwrap()), 0.0);
        assert_eq!(mae(&[10.0, 20.0], &[12.0, 16.0]).unwrap(), 3.0);
        assert!((rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap() - 10f64.sqrt()).abs() <= 1e-12);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0], &[1.0, 2.0]).unwrap_err().code(), "length-mismatch");
        assert_eq!(rmse(&[], &[]).unwrap_err().code(), "empty-input");
    }

    #[test]
    fn eval_report() {
        let rep = evaluate(&[("a".into(), 10.0, 12.0), ("b".into(), 20.0, 16.0)]).unwrap();
        assert_eq!(rep.mae, 3.0);
        assert_eq!(rep.per_image[1].abs_error, 4.0);
    }
}
