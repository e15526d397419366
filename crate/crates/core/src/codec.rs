//! Bitstream container, compression and β-selectable decompression.
//!
//! File layout (integers little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `MRC1`                           |
//! | 1     | version                                |
//! | 16    | model id                               |
//! | 1     | rate (λ) label                         |
//! | 4 x 4 | orig_h, orig_w, padded_h, padded_w     |
//! | 4 x 2 | ẑ payload length, ŷ payload length     |
//! | ...   | ẑ range-coder payload                  |
//! | ...   | ŷ range-coder payload, slice 0 first   |
//!
//! There is no β anywhere in the file: the receiver picks it at decode time.

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::conditioning::RealismWeight;
use crate::data::{pad_to_multiple, padded_len, Dims, Image};
use crate::entropy::cdf::CdfTable;
use crate::error::{Error, Result};
use crate::model::{model_id_hex, CodecModel, ModelId};
use crate::range_coder::{RangeDecoder, RangeEncoder};

pub const MAGIC: [u8; 4] = *b"MRC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 46;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub model_id: ModelId,
    pub lambda_label: u8,
    pub orig_h: u32,
    pub orig_w: u32,
    pub padded_h: u32,
    pub padded_w: u32,
    pub z_payload_len: u32,
    pub y_payload_len: u32,
}

impl BitstreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..21].copy_from_slice(&self.model_id);
        b[21] = self.lambda_label;
        let fields = [
            self.orig_h,
            self.orig_w,
            self.padded_h,
            self.padded_w,
            self.z_payload_len,
            self.y_payload_len,
        ];
        for (i, v) in fields.iter().enumerate() {
            b[22 + 4 * i..26 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        b
    }

    /// Parses and validates the fixed header; magic and version are checked
    /// before anything else.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::Truncated);
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Bitstream("not an MRC1 file (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", bytes[4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated);
        }
        let u = |i: usize| u32::from_le_bytes(bytes[22 + 4 * i..26 + 4 * i].try_into().unwrap());
        let mut model_id = [0u8; 16];
        model_id.copy_from_slice(&bytes[5..21]);
        Ok(BitstreamHeader {
            model_id,
            lambda_label: bytes[21],
            orig_h: u(0),
            orig_w: u(1),
            padded_h: u(2),
            padded_w: u(3),
            z_payload_len: u(4),
            y_payload_len: u(5),
        })
    }

    pub fn orig_dims(&self) -> Dims {
        Dims {
            height: self.orig_h,
            width: self.orig_w,
        }
    }

    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.z_payload_len as usize + self.y_payload_len as usize
    }

    fn check_geometry(&self, multiple: u32) -> Result<()> {
        if self.orig_h == 0 || self.orig_w == 0 {
            return Err(Error::Bitstream("empty image".into()));
        }
        if self.padded_h != padded_len(self.orig_h, multiple) || self.padded_w != padded_len(self.orig_w, multiple) {
            return Err(Error::Bitstream(format!(
                "padded size {}x{} inconsistent with {}x{} and multiple {multiple}",
                self.padded_h, self.padded_w, self.orig_h, self.orig_w
            )));
        }
        Ok(())
    }
}

/// Bitstream plus encoder-side diagnostics.
#[derive(Clone, Debug)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub header: BitstreamHeader,
    /// `8 * file_size / (orig_h * orig_w)`.
    pub bpp: f64,
    /// Hash of the coded ŷ symbols.
    pub y_hash: String,
    pub y_symbols: usize,
    pub z_symbols: usize,
}

/// Decoded latent, before running the generator.
#[derive(Clone, Debug)]
pub struct DecodedLatent {
    pub header: BitstreamHeader,
    pub y_hat: Tensor,
    pub y_hash: String,
}

pub fn bpp_of(file_bytes: usize, dims: Dims) -> f64 {
    8.0 * file_bytes as f64 / (dims.height as f64 * dims.width as f64)
}

fn to_host_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn symbols_of(t: &Tensor) -> Result<Vec<i32>> {
    Ok(to_host_f64(t)?.into_iter().map(|v| v as i32).collect())
}

/// Hash of a latent's integer symbols (little-endian i32, first 16 bytes hex).
pub fn latent_hash(symbols: &[i32]) -> String {
    let mut h = Sha256::new();
    for s in symbols {
        h.update(s.to_le_bytes());
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn gaussian_tables(params_mu: &Tensor, params_sigma: &Tensor, l_max: i32) -> Result<Vec<CdfTable>> {
    to_host_f64(params_mu)?
        .into_iter()
        .zip(to_host_f64(params_sigma)?)
        .map(|(m, s)| CdfTable::gaussian(m, s, l_max))
        .collect()
}

fn z_tables_per_symbol<'a>(tables: &'a [CdfTable], dims: &[usize]) -> Vec<&'a CdfTable> {
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    (0..c).flat_map(|ch| std::iter::repeat(&tables[ch]).take(h * w)).collect()
}

/// Encodes `img` with `model`. The output depends only on the image and the
/// model weights.
pub fn compress(img: &Image, model: &CodecModel, lambda_label: u8) -> Result<Compressed> {
    let cfg = model.config();
    let (padded, orig) = pad_to_multiple(img, cfg.pad_multiple());
    let x = padded.to_tensor(model.dtype(), model.device())?;
    let (y_hat, z_hat) = model.quantized_latents(&x)?;

    let z_tables = model.prior().cdf_tables(cfg.l_max)?;
    let z_syms = symbols_of(&z_hat)?;
    let mut z_enc = RangeEncoder::new();
    for (s, t) in z_syms.iter().zip(z_tables_per_symbol(&z_tables, z_hat.dims())) {
        z_enc.encode_symbol(*s, t)?;
    }
    let z_bytes = z_enc.finish();

    let hyper = model.hyper_features(&z_hat)?;
    let slices = model.context().layout().split(&y_hat)?;
    let mut y_enc = RangeEncoder::new();
    let mut all_y = Vec::new();
    for i in 0..slices.len() {
        let p = model.slice_params(&hyper, &slices[..i], i)?;
        let tables = gaussian_tables(&p.mu, &p.sigma, cfg.l_max)?;
        let syms = symbols_of(&slices[i])?;
        for (s, t) in syms.iter().zip(&tables) {
            y_enc.encode_symbol(*s, t)?;
        }
        all_y.extend(syms);
    }
    let y_bytes = y_enc.finish();

    let header = BitstreamHeader {
        model_id: model.model_id()?,
        lambda_label,
        orig_h: orig.height,
        orig_w: orig.width,
        padded_h: padded.height(),
        padded_w: padded.width(),
        z_payload_len: z_bytes.len() as u32,
        y_payload_len: y_bytes.len() as u32,
    };
    let mut bytes = header.to_bytes().to_vec();
    bytes.extend_from_slice(&z_bytes);
    bytes.extend_from_slice(&y_bytes);
    Ok(Compressed {
        bpp: bpp_of(bytes.len(), orig),
        y_hash: latent_hash(&all_y),
        y_symbols: all_y.len(),
        z_symbols: z_syms.len(),
        header,
        bytes,
    })
}

/// Entropy-decodes ŷ. Refuses files written by a different model.
pub fn decode_latent(bytes: &[u8], model: &CodecModel) -> Result<DecodedLatent> {
    let header = BitstreamHeader::parse(bytes)?;
    let actual = model.model_id()?;
    if header.model_id != actual {
        return Err(Error::ModelMismatch {
            expected: model_id_hex(&header.model_id),
            actual: model_id_hex(&actual),
        });
    }
    let cfg = model.config();
    header.check_geometry(cfg.pad_multiple())?;
    if bytes.len() < header.file_len() {
        return Err(Error::Truncated);
    }
    if bytes.len() > header.file_len() {
        return Err(Error::Bitstream("trailing bytes after payloads".into()));
    }
    let z_end = HEADER_LEN + header.z_payload_len as usize;
    let (z_payload, y_payload) = (&bytes[HEADER_LEN..z_end], &bytes[z_end..]);
    let (dtype, device) = (model.dtype(), model.device());

    let (lh, lw) = (
        (header.padded_h / cfg.latent_stride()) as usize,
        (header.padded_w / cfg.latent_stride()) as usize,
    );
    let zs = 1usize << cfg.hyper_downsamples;
    let z_dims = [1, cfg.hyper_latent_channels, lh / zs, lw / zs];
    let z_tables = model.prior().cdf_tables(cfg.l_max)?;
    let mut z_dec = RangeDecoder::new(z_payload);
    let z_syms = z_tables_per_symbol(&z_tables, &z_dims)
        .into_iter()
        .map(|t| z_dec.decode_symbol(t))
        .collect::<Result<Vec<_>>>()?;
    z_dec.finish()?;
    let z_hat = Tensor::from_vec(z_syms.iter().map(|&v| v as f64).collect::<Vec<_>>(), &z_dims, device)?
        .to_dtype(dtype)?;

    let hyper = model.hyper_features(&z_hat)?;
    let layout = model.context().layout();
    let mut y_dec = RangeDecoder::new(y_payload);
    let mut decoded: Vec<Tensor> = Vec::with_capacity(layout.num_slices);
    let mut all_y = Vec::new();
    for i in 0..layout.num_slices {
        let p = model.slice_params(&hyper, &decoded, i)?;
        let tables = gaussian_tables(&p.mu, &p.sigma, cfg.l_max)?;
        let syms = tables.iter().map(|t| y_dec.decode_symbol(t)).collect::<Result<Vec<_>>>()?;
        let t = Tensor::from_vec(
            syms.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            (1, layout.slice_channels, lh, lw),
            device,
        )?
        .to_dtype(dtype)?;
        all_y.extend(syms);
        decoded.push(t);
    }
    y_dec.finish()?;
    let refs: Vec<&Tensor> = decoded.iter().collect();
    Ok(DecodedLatent {
        header,
        y_hat: Tensor::cat(&refs, 1)?,
        y_hash: latent_hash(&all_y),
    })
}

/// Runs the generator on a decoded latent and crops to the original size.
pub fn reconstruct(latent: &DecodedLatent, beta: RealismWeight, model: &CodecModel) -> Result<Image> {
    let x_hat = model.generate(&latent.y_hat, beta)?;
    Image::from_tensor(&x_hat.squeeze(0)?)?.crop_to(latent.header.orig_dims())
}

/// Decodes `bytes` at realism weight `beta`.
pub fn decompress(bytes: &[u8], beta: RealismWeight, model: &CodecModel) -> Result<Image> {
    reconstruct(&decode_latent(bytes, model)?, beta, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle_core::Device;

    fn model() -> CodecModel {
        CodecModel::new(&ModelConfig::tiny(), 3, false, DType::F32, &Device::Cpu).unwrap()
    }

    fn test_image(w: u32, h: u32) -> Image {
        let data = (0..w * h * 3).map(|i| ((i * 37 + i / 7) % 251) as u8).collect();
        Image::from_raw(w, h, data).unwrap()
    }

    #[test]
    fn header_roundtrip() {
        let h = BitstreamHeader {
            model_id: [7; 16],
            lambda_label: 3,
            orig_h: 30,
            orig_w: 17,
            padded_h: 32,
            padded_w: 32,
            z_payload_len: 5,
            y_payload_len: 99,
        };
        let b = h.to_bytes();
        assert_eq!(b.len(), 46);
        assert_eq!(BitstreamHeader::parse(&b).unwrap(), h);
        let mut bad = b;
        bad[0] = b'X';
        assert!(BitstreamHeader::parse(&bad).is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(BitstreamHeader::parse(&v2).is_err());
    }

    #[test]
    fn roundtrip_preserves_latent_and_dims() {
        let m = model();
        let img = test_image(21, 35);
        let c = compress(&img, &m, 1).unwrap();
        assert_eq!(c.bytes.len(), c.header.file_len());
        assert_eq!(c.bpp, 8.0 * c.bytes.len() as f64 / (21.0 * 35.0));
        let lat = decode_latent(&c.bytes, &m).unwrap();
        assert_eq!(lat.y_hash, c.y_hash);
        let out = decompress(&c.bytes, RealismWeight::infer(0.0).unwrap(), &m).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert_eq!(compress(&img, &m, 1).unwrap().bytes, c.bytes);
    }

    #[test]
    fn wrong_model_and_truncation_refused() {
        let m = model();
        let other = CodecModel::new(&ModelConfig::tiny(), 4, false, DType::F32, &Device::Cpu).unwrap();
        let c = compress(&test_image(16, 16), &m, 0).unwrap();
        assert!(matches!(decode_latent(&c.bytes, &other), Err(Error::ModelMismatch { .. })));
        assert!(decode_latent(&c.bytes[..c.bytes.len() - 1], &m).is_err());
        assert!(decode_latent(&c.bytes[..10], &m).is_err());
    }
}
