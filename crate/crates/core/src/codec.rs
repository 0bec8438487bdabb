//! Image <-> bitstream pipelines and the `.arc` container.
//!
//! Header (30 bytes, little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 0..4 | magic `ARC1` |
//! | 4 | version |
//! | 5..7 | N |
//! | 7 | M |
//! | 8..12 | image width, height |
//! | 12..18 | latent channels, height, width |
//! | 18..26 | model hash |
//! | 26..30 | payload length |
//!
//! The range-coded payload follows the header directly.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bottleneck::{
    dequantize, freeze_cdf, quantize_eval, rc_decode, rc_encode, CdfTable, FactorizedEntropyModel, LatentStats,
    QuantizedLatent,
};
use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::model::{analysis_forward, reconstruct, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const MAGIC: [u8; 4] = *b"ARC1";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 30;
pub const EXTENSION: &str = "arc";

/// Trained weights plus frozen tables, identified by a content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<S> {
    pub store: ParameterStore<S>,
    pub cdf: CdfTable,
    pub hash: u64,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(store: ParameterStore<S>, cdf: CdfTable) -> Result<Self> {
        if cdf.channels.len() != store.config.width_n {
            return Err(Error::Config(format!(
                "cdf table has {} channels, model width is {}",
                cdf.channels.len(),
                store.config.width_n
            )));
        }
        let hash = checkpoint::model_hash(&store, &cdf);
        Ok(Self { store, cdf, hash })
    }

    /// Freeze the entropy model into tables whose ranges also cover the latents of `images`.
    pub fn freeze(store: ParameterStore<S>, images: &[ImageTensor<S>]) -> Result<Self> {
        let stats = latent_stats(&store, images)?;
        let cdf = freeze_tables(&store, &stats)?;
        Self::new(store, cdf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(self.store.config, self.hash);
        checkpoint::push_model(&mut c, &self.store, &self.cdf);
        c.write(path)
    }

    /// Load the model part of any checkpoint (model or training state).
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let (store, cdf) = checkpoint::take_model(&c)?;
        Ok(Self {
            store,
            cdf,
            hash: c.model_hash,
        })
    }
}

pub fn latent_stats<S: Scalar>(store: &ParameterStore<S>, images: &[ImageTensor<S>]) -> Result<LatentStats> {
    let latents: Vec<_> = images
        .par_iter()
        .map(|img| analysis_forward(img, store))
        .collect::<Result<_>>()?;
    let mut stats = LatentStats::new(store.config.width_n);
    latents.iter().for_each(|y| stats.observe(y));
    Ok(stats)
}

pub fn freeze_tables<S: Scalar>(store: &ParameterStore<S>, stats: &LatentStats) -> Result<CdfTable> {
    let model = FactorizedEntropyModel::<f64>::from_params(&store.params.cast())?;
    freeze_cdf(&model, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub width_n: u16,
    pub hidden_layers_m: u8,
    pub image_width: u16,
    pub image_height: u16,
    pub latent_channels: u16,
    pub latent_height: u16,
    pub latent_width: u16,
    pub model_hash: u64,
    pub payload_len: u32,
}

impl BitstreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5..7].copy_from_slice(&self.width_n.to_le_bytes());
        b[7] = self.hidden_layers_m;
        b[8..10].copy_from_slice(&self.image_width.to_le_bytes());
        b[10..12].copy_from_slice(&self.image_height.to_le_bytes());
        b[12..14].copy_from_slice(&self.latent_channels.to_le_bytes());
        b[14..16].copy_from_slice(&self.latent_height.to_le_bytes());
        b[16..18].copy_from_slice(&self.latent_width.to_le_bytes());
        b[18..26].copy_from_slice(&self.model_hash.to_le_bytes());
        b[26..30].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format(format!("bitstream of {} bytes has no complete header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad bitstream magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        Ok(Self {
            version: bytes[4],
            width_n: u16_at(5),
            hidden_layers_m: bytes[7],
            image_width: u16_at(8),
            image_height: u16_at(10),
            latent_channels: u16_at(12),
            latent_height: u16_at(14),
            latent_width: u16_at(16),
            model_hash: u64::from_le_bytes(bytes[18..26].try_into().unwrap()),
            payload_len: u32::from_le_bytes(bytes[26..30].try_into().unwrap()),
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.latent_channels as usize,
            self.latent_height as usize,
            self.latent_width as usize,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = BitstreamHeader::parse(bytes)?;
        let body = &bytes[HEADER_BYTES..];
        let expected = header.payload_len as usize;
        if body.len() < expected {
            return Err(Error::Decode(format!(
                "payload truncated: header announces {expected} bytes, {} present",
                body.len()
            )));
        }
        if body.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after the announced payload",
                body.len() - expected
            )));
        }
        Ok(Self {
            header,
            payload: body.to_vec(),
        })
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    /// `8 * (header + payload bytes) / (W * H)`.
    pub fn bpp(&self) -> f64 {
        let pixels = self.header.image_width as f64 * self.header.image_height as f64;
        8.0 * self.len_bytes() as f64 / pixels
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn bpp(bs: &Bitstream) -> f64 {
    bs.bpp()
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Input(format!("{what} {v} does not fit the 16-bit header field")))
}

/// Analysis, rounding and range coding of one image.
pub fn encode_image<S: Scalar>(image: &ImageTensor<S>, bundle: &ModelBundle<S>) -> Result<Bitstream> {
    let config = &bundle.store.config;
    let [lc, lh, lw] = config.latent_shape(image.height(), image.width())?;
    let latent = analysis_forward(image, &bundle.store)?;
    let q = quantize_eval(&latent, &bundle.cdf.offsets())?;
    let payload = rc_encode(&q, &bundle.cdf)?;
    let header = BitstreamHeader {
        version: VERSION,
        width_n: to_u16(config.width_n, "width N")?,
        hidden_layers_m: u8::try_from(config.hidden_layers_m)
            .map_err(|_| Error::Config("M does not fit the header".into()))?,
        image_width: to_u16(image.width(), "image width")?,
        image_height: to_u16(image.height(), "image height")?,
        latent_channels: to_u16(lc, "latent channels")?,
        latent_height: to_u16(lh, "latent height")?,
        latent_width: to_u16(lw, "latent width")?,
        model_hash: bundle.hash,
        payload_len: u32::try_from(payload.len()).map_err(|_| Error::Encode("payload exceeds 4 GiB".into()))?,
    };
    Ok(Bitstream { header, payload })
}

/// Validate a bitstream against the bundle and recover its integer latent.
pub fn decode_latent<S: Scalar>(bs: &Bitstream, bundle: &ModelBundle<S>) -> Result<QuantizedLatent> {
    let h = &bs.header;
    if h.model_hash != bundle.hash {
        return Err(Error::ModelMismatch {
            expected: h.model_hash,
            found: bundle.hash,
        });
    }
    let config = &bundle.store.config;
    if h.width_n as usize != config.width_n || h.hidden_layers_m as usize != config.hidden_layers_m {
        return Err(Error::Format(format!(
            "header architecture N={}, M={} disagrees with the model (N={}, M={})",
            h.width_n, h.hidden_layers_m, config.width_n, config.hidden_layers_m
        )));
    }
    let expected = config
        .latent_shape(h.image_height as usize, h.image_width as usize)
        .map_err(|e| Error::Format(format!("header image dims are invalid: {e}")))?;
    if expected != h.latent_shape() {
        return Err(Error::Format(format!(
            "header latent shape {:?} is inconsistent with image dims (expected {expected:?})",
            h.latent_shape()
        )));
    }
    if bs.payload.len() != h.payload_len as usize {
        return Err(Error::Decode("payload length disagrees with the header".into()));
    }
    rc_decode(&bs.payload, &bundle.cdf, expected)
}

/// Entropy decoding and synthesis; output clamped to `[0, 1]`.
pub fn decode_image<S: Scalar>(bs: &Bitstream, bundle: &ModelBundle<S>) -> Result<ImageTensor<S>> {
    let q = decode_latent(bs, bundle)?;
    let latent = dequantize::<S>(&q, &bundle.cdf.offsets())?;
    reconstruct(&latent, &bundle.store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor3;

    fn bundle() -> ModelBundle<f64> {
        let store = ParameterStore::init(ModelConfig::new(4, 1).with_input_size(16), 5).unwrap();
        let img = Tensor3::from_fn(3, 16, 16, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 6.0);
        ModelBundle::freeze(store, &[img]).unwrap()
    }

    #[test]
    fn header_round_trip_and_size() {
        let h = BitstreamHeader {
            version: VERSION,
            width_n: 256,
            hidden_layers_m: 2,
            image_width: 512,
            image_height: 512,
            latent_channels: 256,
            latent_height: 32,
            latent_width: 32,
            model_hash: 0x0123_4567_89ab_cdef,
            payload_len: 99,
        };
        let b = h.to_bytes();
        assert_eq!(&b[..4], b"ARC1");
        assert_eq!(u16::from_le_bytes([b[5], b[6]]), 256);
        assert_eq!(BitstreamHeader::parse(&b).unwrap(), h);
    }

    #[test]
    fn bpp_counts_header_and_payload() {
        let header = BitstreamHeader {
            version: VERSION,
            width_n: 1,
            hidden_layers_m: 1,
            image_width: 512,
            image_height: 512,
            latent_channels: 1,
            latent_height: 64,
            latent_width: 64,
            model_hash: 0,
            payload_len: (8192 - HEADER_BYTES) as u32,
        };
        let bs = Bitstream {
            header,
            payload: vec![0; 8192 - HEADER_BYTES],
        };
        assert_eq!(bs.bpp(), 0.25);
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = bundle();
        let img = Tensor3::from_fn(3, 16, 16, |c, y, x| ((c * 5 + y + x) % 9) as f64 / 8.0);
        let bs = encode_image(&img, &b).unwrap();
        let again = encode_image(&img, &b).unwrap();
        assert_eq!(bs.to_bytes(), again.to_bytes());
        assert_eq!(bs.header.latent_shape(), [4, 2, 2]);

        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        let q = decode_latent(&parsed, &b).unwrap();
        let y = analysis_forward(&img, &b.store).unwrap();
        assert_eq!(q, quantize_eval(&y, &b.cdf.offsets()).unwrap());
        let out = decode_image(&parsed, &b).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validation_errors() {
        let b = bundle();
        let img = Tensor3::filled(3, 16, 16, 0.5);
        let bytes = encode_image(&img, &b).unwrap().to_bytes();

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Decode(_))));

        let mut other = b.clone();
        other.hash ^= 1;
        let bs = Bitstream::from_bytes(&bytes).unwrap();
        assert!(matches!(decode_image(&bs, &other), Err(Error::ModelMismatch { .. })));
        assert!(matches!(encode_image(&Tensor3::filled(3, 12, 16, 0.5), &b), Err(Error::Input(_))));
    }

    #[test]
    fn bundle_save_load() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        b.save(&path).unwrap();
        let back = ModelBundle::<f64>::load(&path).unwrap();
        assert_eq!(back, b);
        let as_f32 = ModelBundle::<f32>::load(&path).unwrap();
        assert_eq!(as_f32.hash, b.hash);
    }
}
