//! PSNR, Fréchet distance over patch features (FID/256 style), and
//! distortion-realism curve output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, list_pngs, load_image, Image};
use crate::error::{Error, Result};
use crate::perceptual::FrozenConvStack;

/// PSNR reported for identical images in CSV output.
pub const PSNR_CAP: f64 = 99.0;

/// FID needs at least this many patches per feature dimension.
pub const MIN_PATCHES_PER_DIM: usize = 5;

const EXTRACTOR_SEED: u64 = 0xF1D0_0064;
const EXTRACTOR_BATCH: usize = 16;

fn check_same_dims(x: &Image, y: &Image) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(())
}

/// Mean squared error over all RGB samples on the [0, 255] scale.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_same_dims(x, y)?;
    let sum: f64 = x
        .as_raw()
        .iter()
        .zip(y.as_raw())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.as_raw().len() as f64)
}

/// `10 log10(255² / MSE)` in RGB; `+∞` for identical images.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

fn patch_starts(len: u32, size: u32) -> Vec<u32> {
    let stride = (size / 2).max(1);
    let mut starts: Vec<u32> = (0..).map(|i| i * stride).take_while(|&p| p + size <= len).collect();
    if let Some(&last) = starts.last() {
        if last + size < len {
            starts.push(len - size);
        }
    }
    starts
}

/// Overlapping `size`x`size` patches on a grid of stride `size/2`, plus
/// patches aligned to the right and bottom borders, so every pixel is
/// covered. Images smaller than a patch yield none.
pub fn extract_patches(img: &Image, size: u32) -> Vec<Image> {
    if img.width() < size || img.height() < size {
        log::warn!(
            "skipping {}x{} image smaller than the {size}px patch",
            img.width(),
            img.height()
        );
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in patch_starts(img.height(), size) {
        for x in patch_starts(img.width(), size) {
            let p = image::imageops::crop_imm(img.as_rgb(), x, y, size, size).to_image();
            out.push(Image::new(p).expect("non-empty patch"));
        }
    }
    out
}

/// Fixed-seed conv net with global average pooling; 64 features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    net: FrozenConvStack,
    device: Device,
}

impl FeatureExtractor {
    pub fn new() -> Result<Self> {
        let device = Device::Cpu;
        Ok(FeatureExtractor {
            net: FrozenConvStack::new(EXTRACTOR_SEED, 3, &[16, 32, 64], &[2, 2, 2], DType::F32, &device)?,
            device,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.out_channels()
    }

    /// Features of same-sized images.
    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EXTRACTOR_BATCH) {
            let x = images_to_tensor(chunk, DType::F32, &self.device)?.affine(1.0 / 127.5, -1.0)?;
            let f = self.net.features(&x)?.pop().expect("layers");
            let pooled = f.mean((2, 3))?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(pooled);
        }
        Ok(out)
    }
}

/// Mean, covariance (unbiased) and count of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.len());
        let mut acc = FeatureAccumulator::new(dim);
        for f in features {
            acc.add(f)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mergeable running sums for [`FeatureStats`].
#[derive(Clone, Debug)]
pub struct FeatureAccumulator {
    n: usize,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl FeatureAccumulator {
    pub fn new(dim: usize) -> Self {
        FeatureAccumulator {
            n: 0,
            sum: DVector::zeros(dim),
            outer: DMatrix::zeros(dim, dim),
        }
    }

    pub fn add(&mut self, f: &[f64]) -> Result<()> {
        if f.len() != self.sum.len() {
            return Err(Error::Shape(format!("feature of dim {} into accumulator of dim {}", f.len(), self.sum.len())));
        }
        let v = DVector::from_column_slice(f);
        self.outer += &v * v.transpose();
        self.sum += v;
        self.n += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &FeatureAccumulator) -> Result<()> {
        if other.sum.len() != self.sum.len() {
            return Err(Error::Shape("accumulator dims differ".into()));
        }
        self.n += other.n;
        self.sum += &other.sum;
        self.outer += &other.outer;
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        let dim = self.sum.len();
        if self.n < 2 {
            return Err(Error::Data(format!("need at least 2 feature vectors, have {}", self.n)));
        }
        if self.n < 2 * dim {
            log::warn!("covariance from {} samples of dimension {dim} is unstable", self.n);
        }
        let n = self.n as f64;
        let mean = &self.sum / n;
        let mut cov = (&self.outer - &mean * mean.transpose() * n) / (n - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(FeatureStats { mean, cov, n: self.n })
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁-μ₂‖² + Tr(Σ₁ + Σ₂ - 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let d = &a.mean - &b.mean;
    let s1 = sqrt_psd(&a.cov);
    let cross = sqrt_psd(&(&s1 * &b.cov * &s1));
    let v = d.dot(&d) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Fréchet distance between the patch features of two image sets.
pub fn fid_over_patches(real: &[Image], recon: &[Image], patch: u32, extractor: &FeatureExtractor) -> Result<f64> {
    let collect = |set: &[Image]| -> Vec<Image> { set.iter().flat_map(|i| extract_patches(i, patch)).collect() };
    let (pr, pf) = (collect(real), collect(recon));
    let need = MIN_PATCHES_PER_DIM * extractor.dim();
    if pr.len() < need || pf.len() < need {
        return Err(Error::Data(format!(
            "too few patches for FID: {} real / {} reconstructed, need at least {need} \
             ({MIN_PATCHES_PER_DIM} per feature dimension); use more or larger images, or a smaller patch size",
            pr.len(),
            pf.len()
        )));
    }
    let a = FeatureStats::from_features(&extractor.features(&pr)?)?;
    let b = FeatureStats::from_features(&extractor.features(&pf)?)?;
    frechet_distance(&a, &b)
}

/// FID/256 between the PNGs of two directories.
pub fn fid_256(real_dir: impl AsRef<Path>, recon_dir: impl AsRef<Path>, extractor: &FeatureExtractor) -> Result<f64> {
    let load = |d: &Path| -> Result<Vec<Image>> { list_pngs(d)?.iter().map(load_image).collect() };
    fid_over_patches(&load(real_dir.as_ref())?, &load(recon_dir.as_ref())?, 256, extractor)
}

/// Per-image PSNR for PNGs with the same file name in both directories.
pub fn paired_psnr(real_dir: impl AsRef<Path>, recon_dir: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for path in list_pngs(real_dir.as_ref())? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let other = recon_dir.as_ref().join(&name);
        if !other.exists() {
            return Err(Error::Data(format!("{} has no reconstruction", name)));
        }
        out.push((name, psnr(&load_image(&path)?, &load_image(&other)?)?));
    }
    if out.is_empty() {
        return Err(Error::Data("no PNG files to compare".into()));
    }
    Ok(out)
}

/// One distortion/realism measurement of one model at one rate and β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub model: String,
    pub rate_label: String,
    pub bpp: f64,
    pub beta: f64,
    /// Capped at [`PSNR_CAP`].
    pub psnr_db: f64,
    /// Absent when the set is too small for FID.
    pub fid: Option<f64>,
}

pub const RD_CSV_HEADER: [&str; 6] = ["model", "rate_label", "bpp", "beta", "psnr_db", "fid"];

pub fn write_rd_csv(path: impl AsRef<Path>, points: &[RdPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RD_CSV_HEADER)?;
    for p in points {
        w.write_record([
            p.model.clone(),
            p.rate_label.clone(),
            p.bpp.to_string(),
            p.beta.to_string(),
            cap_psnr(p.psnr_db).to_string(),
            p.fid.map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_csv(path: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != RD_CSV_HEADER {
        return Err(Error::Data(format!("expected columns {}", RD_CSV_HEADER.join(","))));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Data(format!("bad {what} value {s:?}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(RdPoint {
            model: rec[0].to_string(),
            rate_label: rec[1].to_string(),
            bpp: num(&rec[2], "bpp")?,
            beta: num(&rec[3], "beta")?,
            psnr_db: num(&rec[4], "psnr_db")?,
            fid: if rec[5].is_empty() { None } else { Some(num(&rec[5], "fid")?) },
        });
    }
    Ok(out)
}

struct Series {
    label: String,
    points: Vec<(f64, f64, Option<String>)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().map(|p| (p.0, p.1))).collect();
    let span = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(all.iter().map(|p| p.0).collect());
    let (y0, y1) = span(all.iter().map(|p| p.1).collect());
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m},{m} V{} H{}" stroke="black" fill="none"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, sx(fx), h - m + 16.0, fx);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, m - 6.0, sy(fy) + 4.0, fy);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 18.0, xml(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(k, p)| format!("{}{:.1},{:.1}", if k == 0 { "M" } else { "L" }, sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none"/>"#, path.join(" "));
        for (x, y, label) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(*x), sy(*y));
            if let Some(l) = label {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#, sx(*x) + 5.0, sy(*y) - 5.0, xml(l));
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 150.0,
            m + 14.0 * i as f64,
            xml(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `rd_points.csv`, one FID-vs-PSNR SVG per rate label (each model's
/// β chain joined in β order) and rate-vs-PSNR / rate-vs-FID SVGs with one
/// curve per (model, β). Returns the written paths.
pub fn emit_rd_curves(points: &[RdPoint], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("rd_points.csv");
    write_rd_csv(&csv_path, points)?;
    written.push(csv_path);
    let meta = out_dir.join("rd_points.meta.json");
    std::fs::write(
        &meta,
        serde_json::to_vec_pretty(&serde_json::json!({
            "patch_grid": "stride = patch/2 with extra patches aligned to the right and bottom borders",
            "psnr_cap_db": PSNR_CAP,
        }))?,
    )?;
    written.push(meta);

    let mut by_rate: BTreeMap<&str, BTreeMap<&str, Vec<&RdPoint>>> = BTreeMap::new();
    for p in points {
        by_rate.entry(&p.rate_label).or_default().entry(&p.model).or_default().push(p);
    }
    for (rate, models) in &by_rate {
        let series: Vec<Series> = models
            .iter()
            .filter_map(|(model, pts)| {
                let mut pts: Vec<&&RdPoint> = pts.iter().filter(|p| p.fid.is_some()).collect();
                pts.sort_by(|a, b| a.beta.total_cmp(&b.beta));
                (!pts.is_empty()).then(|| Series {
                    label: model.to_string(),
                    points: pts
                        .iter()
                        .map(|p| (p.fid.unwrap(), cap_psnr(p.psnr_db), Some(format!("β={}", p.beta))))
                        .collect(),
                })
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("fid_psnr_rate_{}.svg", file_safe(rate)));
        std::fs::write(&path, svg_plot(&format!("Distortion vs realism, rate {rate}"), "FID", "PSNR [dB]", &series))?;
        written.push(path);
    }

    let mut by_curve: BTreeMap<(String, String), Vec<&RdPoint>> = BTreeMap::new();
    for p in points {
        by_curve.entry((p.model.clone(), format!("{}", p.beta))).or_default().push(p);
    }
    for (metric, ylabel) in [("psnr", "PSNR [dB]"), ("fid", "FID")] {
        let series: Vec<Series> = by_curve
            .iter()
            .filter_map(|((model, beta), pts)| {
                let mut pts: Vec<(f64, f64, Option<String>)> = pts
                    .iter()
                    .filter_map(|p| {
                        let y = if metric == "psnr" { Some(cap_psnr(p.psnr_db)) } else { p.fid };
                        y.map(|y| (p.bpp, y, None))
                    })
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (!pts.is_empty()).then(|| Series { label: format!("{model} β={beta}"), points: pts })
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("rate_{metric}.svg"));
        std::fs::write(&path, svg_plot(&format!("Rate vs {ylabel}"), "bpp", ylabel, &series))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32, v: u8) -> Image {
        Image::filled(w, h, [v, v, v]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = gray(8, 8, 10);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), 99.0);
        assert!((psnr(&gray(4, 4, 0), &gray(4, 4, 255)).unwrap()).abs() < 1e-12);
        assert!((psnr(&gray(4, 4, 0), &gray(4, 4, 10)).unwrap() - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-12);
        assert!((psnr_from_mse(100.0) - 28.1308).abs() < 1e-4);
        assert!(psnr(&gray(4, 4, 0), &gray(4, 5, 0)).is_err());
    }

    #[test]
    fn patch_grid() {
        assert_eq!(extract_patches(&gray(256, 256, 0), 256).len(), 1);
        assert_eq!(extract_patches(&gray(512, 512, 0), 256).len(), 9);
        assert_eq!(extract_patches(&gray(300, 256, 0), 256).len(), 2);
        assert!(extract_patches(&gray(200, 300, 0), 256).is_empty());
        assert_eq!(patch_starts(300, 256), vec![0, 44]);
        assert_eq!(patch_starts(512, 256), vec![0, 128, 256]);
    }

    fn stats(mean: &[f64], diag: &[f64]) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            n: 100,
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let b = stats(&[3.0, -4.0], &[1.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        let c = stats(&[0.0, 0.0], &[4.0, 4.0]);
        assert!((frechet_distance(&c, &a).unwrap() - 2.0).abs() < 1e-9);
        assert!((frechet_distance(&a, &c).unwrap() - 2.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &stats(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn accumulator_merge_is_associative() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0 / (i + 1) as f64]).collect();
        let whole = FeatureStats::from_features(&feats).unwrap();
        let mut a = FeatureAccumulator::new(3);
        let mut b = FeatureAccumulator::new(3);
        for (i, f) in feats.iter().enumerate() {
            if i % 3 == 0 { a.add(f).unwrap() } else { b.add(f).unwrap() }
        }
        b.merge(&a).unwrap();
        let merged = b.finish().unwrap();
        assert!((merged.mean - whole.mean.clone()).norm() < 1e-12);
        assert!((merged.cov - whole.cov.clone()).norm() < 1e-9);
    }

    #[test]
    fn rd_csv_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rd.csv");
        write_rd_csv(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().trim(), RD_CSV_HEADER.join(","));
        assert!(read_rd_csv(&p).unwrap().is_empty());
        let pts = vec![
            RdPoint { model: "mr".into(), rate_label: "2".into(), bpp: 0.1234567, beta: 0.0, psnr_db: 30.25, fid: Some(12.5) },
            RdPoint { model: "mr".into(), rate_label: "2".into(), bpp: 0.1234567, beta: 2.56, psnr_db: 29.1, fid: None },
        ];
        write_rd_csv(&p, &pts).unwrap();
        assert_eq!(read_rd_csv(&p).unwrap(), pts);
        let files = emit_rd_curves(&pts, dir.path().join("out")).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        assert!(files.iter().any(|f| f.extension().unwrap() == "svg"));
    }
}
