//! Confidence-weighted reconstruction loss and image metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Reduction applied to `1 - Q` in the confidence penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    /// `sqrt(mean((1 - Q)²))`
    #[default]
    Rms,
    /// `mean((1 - Q)²)`
    SquaredMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    #[serde(default)]
    pub penalty: PenaltyNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            penalty: PenaltyNorm::Rms,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)))
        }
    }
}

fn check_pair<T: Scalar>(gt: &Var<T>, pred: &Var<T>) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {:?} vs {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

/// `mean|I - (Ĩ Q + I (1 - Q))| + λ ‖1 - Q‖` with `Q` broadcast over channels.
///
/// `gt` and `pred` are `[H, W, C]`, `q` is `[H, W, 1]` (or `[H·W, 1]`).
pub fn confidence_loss<T: Scalar>(gt: &Var<T>, pred: &Var<T>, q: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    check_pair(gt, pred)?;
    cfg.validate()?;
    if q.value().len() != gt.rows() || q.cols() != 1 {
        return Err(Error::InvalidInput(format!(
            "confidence shape {:?} does not match image {:?}",
            q.shape(),
            gt.shape()
        )));
    }
    let q = q.reshape(&[gt.rows(), 1]);
    let blended = pred.mul_col(&q).add(&gt.mul_col(&q.one_minus()));
    let term1 = gt.sub(&blended).abs().mean();
    let sq = q.one_minus().square().mean();
    let penalty = match cfg.penalty {
        PenaltyNorm::Rms => sq.sqrt(),
        PenaltyNorm::SquaredMean => sq,
    };
    Ok(term1.add(&penalty.scale(T::lit(cfg.lambda))))
}

/// Mean absolute error.
pub fn plain_l1<T: Scalar>(gt: &Var<T>, pred: &Var<T>) -> Result<Var<T>> {
    check_pair(gt, pred)?;
    Ok(gt.sub(pred).abs().mean())
}

/// `10 log10(peak² / MSE)`; `+∞` for identical images.
pub fn psnr<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>, peak: f64) -> f64 {
    assert_eq!(gt.shape(), pred.shape(), "psnr shape mismatch");
    let mse = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / gt.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::InvalidInput(format!("expected an [H, W, C] image, got {s:?}")));
    }
    let c = s[2];
    let g = img
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64)
        .collect();
    Ok((g, s[0], s[1]))
}

/// Separable valid-mode filtering with the Gaussian window.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity of the channel-mean grayscale images, 11×11
/// Gaussian window (σ = 1.5), evaluated at valid window positions only.
pub fn ssim<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    if gt.shape() != pred.shape() {
        return Err(Error::InvalidInput("ssim shape mismatch".into()));
    }
    let (a, h, w) = grayscale(gt)?;
    let (b, _, _) = grayscale(pred)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let f = |v: &[f64]| filter(v, h, w, &k).0;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (f(&a), f(&b));
    let (ea2, eb2, eab) = (f(&sq(&a)), f(&sq(&b)), f(&ab));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = ea2[i] - ma * ma;
            let vb = eb2[i] - mb * mb;
            let cov = eab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Serialises non-finite values as the string `"inf"` (or `"-inf"`, `"nan"`).
pub fn serialize_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn deserialize_metric<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("unknown metric value {other:?}"))),
        },
    }
}

/// Metrics of one evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    #[serde(serialize_with = "serialize_metric", deserialize_with = "deserialize_metric")]
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    #[serde(serialize_with = "serialize_metric", deserialize_with = "deserialize_metric")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub loss_mean: f64,
}

impl MetricsReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Self {
            psnr_mean: mean(|v| v.psnr),
            ssim_mean: mean(|v| v.ssim),
            loss_mean: mean(|v| v.loss),
            views,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Var<f64> {
        Var::constant(Tensor::full(&[4, 5, 3], v))
    }

    fn conf(v: f64) -> Var<f64> {
        Var::constant(Tensor::full(&[4, 5, 1], v))
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::default();
        let l = |g, p, q| confidence_loss(&img(g), &img(p), &conf(q), &cfg).unwrap().value().item();
        assert_eq!(l(0.4, 0.4, 1.0), 0.0);
        assert!((l(0.4, 0.9, 0.0) - 0.1).abs() < 1e-12);
        assert!((l(0.4, 0.5, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = img(0.0);
        let b = Var::constant(Tensor::zeros(&[4, 4, 3]));
        assert!(plain_l1(&a, &b).is_err());
        assert!(confidence_loss(&a, &b, &conf(1.0), &LossConfig::default()).is_err());
        assert!(confidence_loss(&a, &a, &Var::constant(Tensor::zeros(&[3, 1])), &LossConfig::default()).is_err());
    }

    #[test]
    fn plain_l1_examples() {
        assert_eq!(plain_l1(&img(0.3), &img(0.3)).unwrap().value().item(), 0.0);
        assert!((plain_l1(&img(0.5), &img(0.25)).unwrap().value().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full(&[4, 4, 3], 0.5);
        assert_eq!(psnr(&a, &a, 1.0), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = Tensor::<f64>::from_f64(
            &[16, 16, 3],
            &(0..768).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect::<Vec<_>>(),
        );
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        let small = Tensor::<f64>::zeros(&[8, 16, 3]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn metrics_json_uses_inf_string() {
        let r = MetricsReport::from_views(vec![ViewMetrics {
            view: 3,
            psnr: f64::INFINITY,
            ssim: 1.0,
            loss: 0.0,
        }]);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""));
        assert!(s.contains("\"psnr_mean\":\"inf\""));
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.views[0].psnr, f64::INFINITY);
    }
}
