//! Image quality metrics on `[0,1]` images of shape `(H,W,C)` or
//! `(B,H,W,C)`.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::objectives::{ssim as ssim_graph, SsimWindow};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(op: &'static str, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

fn as4(op: &'static str, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    match x.shape() {
        [_, _, _, _] => Ok(x.clone()),
        [h, w, c] => x.clone().reshape(&[1, *h, *w, *c]),
        s => Err(Error::shape(
            op,
            format!("expected (H, W, C) or (B, H, W, C), got {s:?}"),
        )),
    }
}

pub fn mse(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    same_shape("mse", x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor<f64>, y: &Tensor<f64>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Mean single-scale SSIM with an 11×11 Gaussian window (σ = 1.5),
/// averaged over channels.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    same_shape("ssim", x, y)?;
    let g = Graph::new();
    let a = g.constant(as4("ssim", x)?);
    let b = g.constant(as4("ssim", y)?);
    let s = ssim_graph(&g, a, b, SsimWindow::default())?;
    g.value(s).item()
}

/// Mean absolute error.
pub fn ae(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    same_shape("ae", x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.numel() as f64)
}

/// Spectral angle result with the number of skipped zero-vector pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamResult {
    pub radians: f64,
    pub skipped: usize,
}

pub fn sam_counted(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<SamResult> {
    same_shape("sam", x, y)?;
    let c = x.last_dim();
    let (mut total, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for (p, q) in x.data().chunks(c).zip(y.data().chunks(c)) {
        let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
        let np: f64 = p.iter().map(|a| a * a).sum();
        let nq: f64 = q.iter().map(|a| a * a).sum();
        if np == 0.0 || nq == 0.0 {
            skipped += 1;
            continue;
        }
        total += (dot / (np * nq).sqrt()).clamp(-1.0, 1.0).acos();
        n += 1;
    }
    if skipped > 0 {
        log::debug!("sam skipped {skipped} zero-vector pixels");
    }
    Ok(SamResult {
        radians: if n == 0 { 0.0 } else { total / n as f64 },
        skipped,
    })
}

/// Mean per-pixel spectral angle in radians.
pub fn sam(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    Ok(sam_counted(x, y)?.radians)
}

/// `100·ratio·sqrt(mean_b (RMSE_b / μ_b)²)` with `y` as reference. Bands with
/// zero reference mean are skipped.
pub fn ergas(x: &Tensor<f64>, y: &Tensor<f64>, ratio: f64) -> Result<f64> {
    same_shape("ergas", x, y)?;
    let c = x.last_dim();
    let n = (x.numel() / c) as f64;
    let mut acc = 0.0;
    let mut bands = 0;
    for b in 0..c {
        let mu = y.data().iter().skip(b).step_by(c).sum::<f64>() / n;
        if mu == 0.0 {
            log::debug!("ergas skipped band {b} with zero mean");
            continue;
        }
        let se: f64 = x
            .data()
            .iter()
            .skip(b)
            .step_by(c)
            .zip(y.data().iter().skip(b).step_by(c))
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let rmse = (se / n).sqrt();
        acc += (rmse / mu).powi(2);
        bands += 1;
    }
    if bands == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * ratio * (acc / bands as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ae: f64,
    pub sam: f64,
    pub ergas: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 5] = ["PSNR", "SSIM", "AE", "SAM", "ERGAS"];

    pub fn compute(pred: &Tensor<f64>, reference: &Tensor<f64>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, reference, 1.0)?,
            ssim: ssim(pred, reference)?,
            ae: ae(pred, reference)?,
            sam: sam(pred, reference)?,
            ergas: ergas(pred, reference, 1.0)?,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.psnr, self.ssim, self.ae, self.sam, self.ergas]
    }

    pub fn mean(reports: &[Self]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut s = [0.0; 5];
        for r in reports {
            for (a, v) in s.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Self {
            psnr: s[0] / n,
            ssim: s[1] / n,
            ae: s[2] / n,
            sam: s[3] / n,
            ergas: s[4] / n,
        }
    }
}

/// Per-image rows followed by a `mean` row.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", "image");
    for c in MetricReport::COLUMNS {
        let _ = write!(out, " {c:>10}");
    }
    out.push('\n');
    let mean = MetricReport::mean(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    for (name, r) in rows.iter().chain(std::iter::once(&("mean".to_string(), mean))) {
        let _ = write!(out, "{name:<width$}");
        for v in r.values() {
            let _ = write!(out, " {v:>10.4}");
        }
        out.push('\n');
    }
    out
}

/// Comma-separated form of [`format_table`].
pub fn format_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!("image,{}\n", MetricReport::COLUMNS.join(","));
    let mean = MetricReport::mean(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    for (name, r) in rows.iter().chain(std::iter::once(&("mean".to_string(), mean))) {
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{name},{}", vals.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(&[16, 16, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identical_images_hit_ideal_values() {
        let x = rand_img(1);
        let r = MetricReport::compute(&x, &x).unwrap();
        assert_eq!(
            r,
            MetricReport {
                psnr: 100.0,
                ssim: 1.0,
                ae: 0.0,
                sam: 0.0,
                ergas: 0.0
            }
        );
    }

    #[test]
    fn psnr_closed_form_and_oracle() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        let y = Tensor::full(&[4, 4, 1], 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let (a, b) = (rand_img(2), rand_img(3));
        let m: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.numel() as f64;
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-10);
    }

    #[test]
    fn ssim_symmetry_and_constants() {
        let (a, b) = (rand_img(4), rand_img(5));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let lo = Tensor::full(&[12, 12, 1], 0.2);
        let hi = Tensor::full(&[12, 12, 1], 0.8);
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        let got = ssim(&lo, &hi).unwrap();
        assert!((got - expect).abs() < 1e-9 && got < 0.5);
        assert!(ssim(&Tensor::zeros(&[8, 8, 1]), &Tensor::zeros(&[8, 8, 1])).is_err());
    }

    #[test]
    fn sam_cases() {
        let r = Tensor::new(&[1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let g = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!((sam(&r, &g).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let y = rand_img(6);
        assert!(sam(&y.scale(2.0), &y).unwrap() < 1e-7);
        let z = Tensor::new(&[2, 1, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let c = sam_counted(&z, &z).unwrap();
        assert_eq!((c.radians, c.skipped), (0.0, 1));
    }

    #[test]
    fn ergas_closed_form_and_oracle() {
        // x = y ± 0.1 alternating: RMSE 0.1, μ 0.5.
        let y = Tensor::full(&[2, 2, 1], 0.5);
        let x = Tensor::new(&[2, 2, 1], vec![0.6, 0.4, 0.6, 0.4]).unwrap();
        assert!((ergas(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let (a, b) = (rand_img(7), rand_img(8));
        let mut acc = 0.0;
        for band in 0..3 {
            let (mut se, mut mu) = (0.0, 0.0);
            for i in 0..256 {
                let (p, q) = (a.data()[3 * i + band], b.data()[3 * i + band]);
                se += (p - q).powi(2);
                mu += q;
            }
            acc += ((se / 256.0).sqrt() / (mu / 256.0)).powi(2);
        }
        let direct = 100.0 * (acc / 3.0).sqrt();
        assert!((ergas(&a, &b, 1.0).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn ae_cases() {
        assert_eq!(ae(&Tensor::ones(&[2, 2, 3]), &Tensor::zeros(&[2, 2, 3])).unwrap(), 1.0);
        let (x, y, z) = (rand_img(9), rand_img(10), rand_img(11));
        assert!(ae(&x, &z).unwrap() <= ae(&x, &y).unwrap() + ae(&y, &z).unwrap());
    }

    #[test]
    fn table_layout() {
        let x = rand_img(1);
        let rows = vec![("a".to_string(), MetricReport::compute(&x, &x).unwrap())];
        let t = format_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(header, ["image", "PSNR", "SSIM", "AE", "SAM", "ERGAS"]);
        let csv = format_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("image,PSNR,SSIM,AE,SAM,ERGAS"));
    }
}
