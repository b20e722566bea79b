use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::ImageError;
use crate::tensor::{Scalar, Shape, Tensor};

/// 8-bit raster, channel-interleaved, row-major. `channels` is 1 or 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Format(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Format(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(PlanarImage { width, height, channels, data })
    }

    /// Planar (1, c, h, w) tensor with values in [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![T::zero(); self.data.len()];
        for (i, &v) in self.data.iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            out[ch * w * h + pix] = T::from_f64(v as f64 / 255.0);
        }
        Tensor::from_vec(Shape::new(1, c, h, w), out).expect("image tensor")
    }

    /// Quantize batch item 0 of a (n, c, h, w) tensor, clamping to [0, 1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.c != 1 && s.c != 3 {
            return Err(ImageError::Format(format!("{} channels (expected 1 or 3)", s.c)));
        }
        let mut data = vec![0u8; s.c * s.plane()];
        for ch in 0..s.c {
            for pix in 0..s.plane() {
                let v = t.data()[ch * s.plane() + pix].as_f64();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                data[pix * s.c + ch] = (v * 255.0).round() as u8;
            }
        }
        PlanarImage::new(s.w, s.h, s.c, data)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.to_path_buf(), source }
}

/// Load an 8-bit grayscale or RGB PNG.
pub fn png_load(path: &Path) -> Result<PlanarImage, ImageError> {
    let file = File::open(path).map_err(io_err(path))?;
    let malformed = |e: png::DecodingError| match e {
        png::DecodingError::IoError(source) => ImageError::Io { path: path.to_path_buf(), source },
        other => ImageError::Malformed { path: path.to_path_buf(), msg: other.to_string() },
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(malformed)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedDepth(info.bit_depth as u8));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(ImageError::UnsupportedColor(format!("{other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Malformed { path: path.to_path_buf(), msg: "image too large".into() })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width as usize, frame.height as usize);
    let row = frame.line_size;
    let mut data = Vec::with_capacity(w * h * channels);
    for y in 0..h {
        data.extend_from_slice(&buf[y * row..y * row + w * channels]);
    }
    PlanarImage::new(w, h, channels, data)
}

pub fn png_save(img: &PlanarImage, path: &Path) -> Result<(), ImageError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => ImageError::Io { path: path.to_path_buf(), source },
        other => ImageError::Format(other.to_string()),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&img.data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}
