//! Image I/O, training crops, inference padding and dataset iteration.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, ColorType, ImageReader, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB8 image. Dimensions are always at least 1x1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image(RgbImage);

/// Height and width of an image before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub height: u32,
    pub width: u32,
}

impl Image {
    pub fn new(rgb: RgbImage) -> Result<Self> {
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(Error::Image("image must be at least 1x1".into()));
        }
        Ok(Image(rgb))
    }

    /// Builds an image from interleaved RGB bytes, row-major.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} bytes for {width}x{height} RGB, got {}",
                data.len()
            )));
        }
        Self::new(RgbImage::from_raw(width, height, data).expect("length checked"))
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(RgbImage::from_pixel(width, height, image::Rgb(rgb)))
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            height: self.height(),
            width: self.width(),
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.0.get_pixel(x, y).0
    }

    pub fn as_raw(&self) -> &[u8] {
        self.0.as_raw()
    }

    pub fn as_rgb(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_rgb(self) -> RgbImage {
        self.0
    }

    /// Copies the image into a `(1, 3, H, W)` tensor with values in [0, 255].
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        images_to_tensor(std::slice::from_ref(self), dtype, device)
    }

    /// Converts a `(3, H, W)` or `(1, 3, H, W)` tensor in [0, 255] into an image,
    /// rounding and clipping to the valid range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let planes = t.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for plane in &planes {
                    data.push(plane[y][x].round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Self::from_raw(w as u32, h as u32, data)
    }

    /// Crops the top-left `dims` region.
    pub fn crop_to(&self, dims: Dims) -> Result<Self> {
        if dims.width > self.width() || dims.height > self.height() {
            return Err(Error::Shape(format!(
                "cannot crop {}x{} image to {}x{}",
                self.height(),
                self.width(),
                dims.height,
                dims.width
            )));
        }
        Self::new(image::imageops::crop_imm(&self.0, 0, 0, dims.width, dims.height).to_image())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.0.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor in [0, 255].
pub fn images_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend(raw.iter().skip(c).step_by(3).map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Reject grayscale / alpha / palette inputs instead of converting them.
    pub reject_non_rgb: bool,
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    load_image_with(path, LoadOptions::default())
}

pub fn load_image_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Image> {
    let path = path.as_ref();
    let decoded = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    match decoded.color() {
        ColorType::Rgb8 => {}
        ColorType::L8 | ColorType::La8 | ColorType::Rgba8 => {
            if opts.reject_non_rgb {
                return Err(Error::Image(format!(
                    "{}: non-RGB input ({:?})",
                    path.display(),
                    decoded.color()
                )));
            }
        }
        other => {
            return Err(Error::UnsupportedBitDepth(format!(
                "{}: {:?}",
                path.display(),
                other
            )))
        }
    }
    Image::new(decoded.into_rgb8())
}

/// Range of the shorter image side after resizing, in multiples of the crop side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ResizeRange {
    fn default() -> Self {
        ResizeRange { min: 1.0, max: 2.0 }
    }
}

/// A square training crop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub crop: Image,
}

/// Resizes `img` so its shorter side is drawn from `range` (in units of `side`,
/// never below `side`) and takes a uniformly placed `side`x`side` crop.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    side: u32,
    range: ResizeRange,
    rng: &mut R,
) -> Result<TrainExample> {
    if side == 0 {
        return Err(Error::Config("crop side must be positive".into()));
    }
    if !(range.min <= range.max) || range.max < 1.0 {
        return Err(Error::Data(format!(
            "image too small: maximum resize {}x of crop side {side} cannot reach the crop side",
            range.max
        )));
    }
    let lo = (range.min * side as f64).max(side as f64);
    let hi = range.max * side as f64;
    let target_short = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (w, h) = (img.width() as f64, img.height() as f64);
    let scale = target_short / w.min(h);
    let new_w = ((w * scale).round() as u32).max(side);
    let new_h = ((h * scale).round() as u32).max(side);
    let resized = if new_w == img.width() && new_h == img.height() {
        img.0.clone()
    } else {
        image::imageops::resize(&img.0, new_w, new_h, FilterType::Triangle)
    };
    let x0 = rng.gen_range(0..=new_w - side);
    let y0 = rng.gen_range(0..=new_h - side);
    let crop = image::imageops::crop_imm(&resized, x0, y0, side, side).to_image();
    Ok(TrainExample {
        crop: Image::new(crop)?,
    })
}

fn reflect_index(i: u32, n: u32) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

pub fn padded_len(len: u32, multiple: u32) -> u32 {
    len.div_ceil(multiple) * multiple
}

/// Reflection-pads bottom and right edges up to the next multiple of `multiple`.
pub fn pad_to_multiple(img: &Image, multiple: u32) -> (Image, Dims) {
    assert!(multiple >= 1, "padding multiple must be positive");
    let orig = img.dims();
    let (pw, ph) = (
        padded_len(orig.width, multiple),
        padded_len(orig.height, multiple),
    );
    if pw == orig.width && ph == orig.height {
        return (img.clone(), orig);
    }
    let padded = RgbImage::from_fn(pw, ph, |x, y| {
        *img.0.get_pixel(
            reflect_index(x, orig.width),
            reflect_index(y, orig.height),
        )
    });
    (Image(padded), orig)
}

/// A directory of PNG images, enumerated lexicographically and held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    paths: Vec<PathBuf>,
    images: Vec<Image>,
}

pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

impl Dataset {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let paths = list_pngs(&dir)?;
        let images = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        Self::from_parts(paths, images)
    }

    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        let paths = (0..images.len())
            .map(|i| PathBuf::from(format!("mem-{i:06}")))
            .collect();
        Self::from_parts(paths, images)
    }

    fn from_parts(paths: Vec<PathBuf>, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(Dataset { paths, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// Draws `batch` random crops. Deterministic for a given rng state.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch: usize,
        side: u32,
        range: ResizeRange,
        rng: &mut R,
    ) -> Result<Vec<TrainExample>> {
        (0..batch)
            .map(|_| {
                let idx = rng.gen_range(0..self.images.len());
                random_resized_crop(&self.images[idx], side, range, rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen()).collect();
        Image::from_raw(w, h, data).unwrap()
    }

    #[test]
    fn black_pixel_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        Image::filled(1, 1, [0, 0, 0]).unwrap().save_png(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), Dims { height: 1, width: 1 });
        assert_eq!(img.pixel(0, 0), [0, 0, 0]);
    }

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = random_image(8, 8, 3);
        img.save_png(&path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let deep: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(4, 4, image::Rgb([1000u16, 2000, 3000]));
        deep.save(&path).unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported bit depth"), "{err}");
    }

    #[test]
    fn grayscale_is_converted_or_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::from_pixel(3, 2, image::Luma([77])).save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(2, 1), [77, 77, 77]);
        let opts = LoadOptions { reject_non_rgb: true };
        assert!(load_image_with(&path, opts).is_err());
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = random_image(64, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = random_resized_crop(&img, 64, ResizeRange { min: 1.0, max: 1.0 }, &mut rng)
            .unwrap();
        assert_eq!(ex.crop, img);
    }

    #[test]
    fn crop_is_deterministic_under_seed() {
        let img = random_image(100, 80, 2);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_resized_crop(&img, 32, ResizeRange::default(), &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn crop_shape_over_many_seeds() {
        let img = random_image(256, 128, 4);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex =
                random_resized_crop(&img, 64, ResizeRange { min: 0.5, max: 1.0 }, &mut rng)
                    .unwrap();
            assert_eq!(ex.crop.dims(), Dims { height: 64, width: 64 });
        }
    }

    #[test]
    fn crop_rejects_unreachable_resize() {
        let img = random_image(16, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            random_resized_crop(&img, 64, ResizeRange { min: 0.2, max: 0.5 }, &mut rng).is_err()
        );
    }

    #[test]
    fn padding_arithmetic() {
        let cases = [((64, 64), (64, 64)), ((65, 64), (128, 64)), ((500, 333), (512, 384))];
        for ((h, w), (ph, pw)) in cases {
            let img = random_image(w, h, 6);
            let (padded, orig) = pad_to_multiple(&img, 64);
            assert_eq!(orig, Dims { height: h, width: w });
            assert_eq!(padded.dims(), Dims { height: ph, width: pw });
        }
    }

    #[test]
    fn padding_reflects_and_unpads() {
        let img = random_image(5, 3, 7);
        let (padded, orig) = pad_to_multiple(&img, 4);
        assert_eq!(padded.dims(), Dims { height: 4, width: 8 });
        // column 5 mirrors column 3, row 3 mirrors row 1
        assert_eq!(padded.pixel(5, 0), img.pixel(3, 0));
        assert_eq!(padded.pixel(0, 3), img.pixel(0, 1));
        assert_eq!(padded.crop_to(orig).unwrap(), img);
        let (single, _) = pad_to_multiple(&random_image(1, 1, 8), 16);
        assert_eq!(single.dims(), Dims { height: 16, width: 16 });
    }

    #[test]
    fn tensor_roundtrip() {
        let img = random_image(7, 5, 9);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 5, 7]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn dataset_lists_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.txt"] {
            let p = dir.path().join(name);
            if name.ends_with(".png") {
                random_image(4, 4, 1).save_png(&p).unwrap();
            } else {
                std::fs::write(&p, b"x").unwrap();
            }
        }
        let ds = Dataset::from_dir(dir.path()).unwrap();
        let names: Vec<_> = ds
            .paths()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["a.png", "b.png"]);
        let empty = tempfile::tempdir().unwrap();
        assert!(Dataset::from_dir(empty.path()).is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = Dataset::from_images(vec![random_image(70, 90, 1), random_image(80, 64, 2)])
            .unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            ds.sample_batch(4, 32, ResizeRange::default(), &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }
}
