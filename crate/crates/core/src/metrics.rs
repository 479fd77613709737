//! Image quality metrics.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{ssim as ssim_padded, SsimPadding, SSIM_WINDOW};

/// Peak signal-to-noise ratio for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if a.data().is_empty() {
        return Err(Error::Shape("psnr of an empty image".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM over all full 11×11 Gaussian windows (σ = 1.5), averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    ssim_padded(a, b, SsimPadding::Valid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NovelView,
    Restoration,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::NovelView => "novel_view",
            Task::Restoration => "restoration",
        }
    }
}

/// Infinite PSNR is written as the string `"inf"`.
fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetric {
    pub view: String,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: Task,
    pub views: Vec<ViewMetric>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    /// Metrics for `(name, prediction, reference)` triples.
    pub fn compute<'a>(task: Task, pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>) -> Result<Self> {
        let views = pairs
            .into_iter()
            .map(|(view, a, b)| {
                Ok(ViewMetric {
                    view,
                    psnr: psnr(a, b)?,
                    ssim: ssim(a, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if views.is_empty() {
            return Err(Error::InvalidArgument("no views to evaluate".into()));
        }
        let n = views.len() as f64;
        Ok(Self {
            task,
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
        })
    }

    /// One JSON record per view followed by an aggregate record.
    pub fn to_json_lines(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            record: &'static str,
            task: Task,
            #[serde(flatten)]
            view: &'a ViewMetric,
        }
        #[derive(Serialize)]
        struct Aggregate {
            record: &'static str,
            task: Task,
            views: usize,
            #[serde(serialize_with = "ser_db")]
            mean_psnr: f64,
            mean_ssim: f64,
        }
        let mut out = String::new();
        for v in &self.views {
            out += &serde_json::to_string(&Row {
                record: "view",
                task: self.task,
                view: v,
            })?;
            out.push('\n');
        }
        out += &serde_json::to_string(&Aggregate {
            record: "aggregate",
            task: self.task,
            views: self.views.len(),
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
        })?;
        out.push('\n');
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 3, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_known_values() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert!((psnr(&a, &a.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let mut b = a.clone();
        // One of 48 entries off by sqrt(0.48) gives MSE 0.01.
        b.set(0, 0, 0, 0.3 + 0.48f64.sqrt());
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_and_ssim_symmetric() {
        let (a, b) = (random_image(1, 16, 12), random_image(2, 16, 12));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = random_image(3, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        assert!(ssim(&Image::new(10, 16, 3), &Image::new(10, 16, 3)).is_err());
    }

    /// Direct per-window evaluation with explicit Gaussian weights.
    fn naive_ssim(a: &Image, b: &Image) -> f64 {
        let r = 5i64;
        let mut w = vec![0.0; 11];
        for (k, wk) in w.iter_mut().enumerate() {
            let d = k as f64 - 5.0;
            *wk = (-d * d / (2.0 * 1.5 * 1.5)).exp();
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut n = 0usize;
        for c in 0..a.channels() {
            for y in r..(a.height() as i64 - r) {
                for x in r..(a.width() as i64 - r) {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in -r..=r {
                        for i in -r..=r {
                            let wt = w[(i + r) as usize] * w[(j + r) as usize];
                            let va = a.get((x + i) as usize, (y + j) as usize, c);
                            let vb = b.get((x + i) as usize, (y + j) as usize, c);
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_direct_convolution() {
        for seed in 0..3 {
            let (a, b) = (random_image(10 + seed, 19, 14), random_image(20 + seed, 19, 14));
            assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn report_serializes_sentinel() {
        let a = random_image(4, 12, 12);
        let r = MetricReport::compute(Task::NovelView, [("v0".to_string(), &a, &a)]).unwrap();
        let text = r.to_json_lines().unwrap();
        assert!(text.contains("\"psnr\":\"inf\""));
        assert!(text.lines().last().unwrap().contains("aggregate"));
    }
}
