use std::io::Cursor;

use image::{ImageFormat, ImageReader};

use super::DataError;

/// Pixel buffer in interleaved (HWC) layout with values on the 0–255 scale.
///
/// Decoded images hold whole numbers; resampling produces fractional values,
/// which are kept until the buffer is normalized or encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidImage(format!("zero extent {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::InvalidImage(format!("{channels} channels, expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(DataError::InvalidImage(format!(
                "{width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(DataError::InvalidImage("pixel values must lie in [0, 255]".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self, DataError> {
        Self::new(width, height, channels, bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self { width, height, channels, data: vec![value.clamp(0.0, 255.0); width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Rounded 8-bit copy of the pixel values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Mean over channels, one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.data.chunks(self.channels).map(|px| px.iter().sum::<f32>() / self.channels as f32).collect()
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        ImageBuffer { width: self.width, height: self.height, channels: 1, data: self.luminance() }
    }

    /// Encodes as an 8-bit PNG (gray or RGB).
    pub fn encode_png(&self) -> Result<Vec<u8>, DataError> {
        let bytes = self.to_bytes();
        let mut out = Vec::new();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer length checked")
                .write_to(&mut Cursor::new(&mut out), ImageFormat::Png),
            _ => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer length checked")
                .write_to(&mut Cursor::new(&mut out), ImageFormat::Png),
        };
        res.map_err(|e| DataError::Encode(e.to_string()))?;
        Ok(out)
    }
}

/// Decodes a PNG or JPEG stream into a 3-channel buffer. Grayscale sources
/// are replicated across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, DataError> {
    let format = match image::guess_format(bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => f,
        Ok(other) => return Err(DataError::UnsupportedFormat(format!("{other:?}"))),
        Err(_) => return Err(DataError::UnsupportedFormat("unrecognized signature".into())),
    };
    let mut reader = ImageReader::new(Cursor::new(bytes));
    reader.set_format(format);
    let img = reader.decode().map_err(|e| DataError::Decode {
        format: format!("{format:?}"),
        // the decoders report no byte position; the stream length bounds it
        offset: bytes.len(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    ImageBuffer::from_bytes(w, h, 3, rgb.as_raw())
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, height: usize, width: usize) -> Result<ImageBuffer, DataError> {
    if height == 0 || width == 0 {
        return Err(DataError::InvalidImage(format!("resize target {width}x{height}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let c = img.channels;
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..width {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                data.push(sample_bilinear(img, fx, fy, ch));
            }
        }
    }
    Ok(ImageBuffer { width, height, channels: c, data })
}

/// Resamples a single-channel `sh x sw` plane to `dh x dw` with the same
/// pixel-center alignment and edge clamping as [`resize_bilinear`].
pub fn resize_plane(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let img = ImageBuffer { width: sw, height: sh, channels: 1, data: src.to_vec() };
    if sh == dh && sw == dw {
        return img.data;
    }
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..dw {
            out.push(sample_bilinear(&img, (x as f64 + 0.5) * sx - 0.5, fy, 0));
        }
    }
    out
}

/// Bilinear sample at fractional coordinates, clamping to the border.
pub(crate) fn sample_bilinear(img: &ImageBuffer, fx: f64, fy: f64, ch: usize) -> f32 {
    let maxx = (img.width - 1) as f64;
    let maxy = (img.height - 1) as f64;
    let fx = fx.clamp(0.0, maxx);
    let fy = fy.clamp(0.0, maxy);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let p00 = img.get(x0, y0, ch) as f64;
    let p01 = img.get(x1, y0, ch) as f64;
    let p10 = img.get(x0, y1, ch) as f64;
    let p11 = img.get(x1, y1, ch) as f64;
    let top = p00 + (p01 - p00) * tx;
    let bottom = p10 + (p11 - p10) * tx;
    (top + (bottom - top) * ty) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_png(w: u32, h: u32, px: &[u8]) -> Vec<u8> {
        let img = image::GrayImage::from_raw(w, h, px.to_vec()).unwrap();
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
        out
    }

    #[test]
    fn gray_png_is_replicated_to_three_channels() {
        let img = decode_image(&gray_png(1, 1, &[128])).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[128.0, 128.0, 128.0]);
    }

    #[test]
    fn truncated_and_unknown_streams_fail_distinctly() {
        let png = gray_png(8, 8, &[7; 64]);
        let cut = &png[..png.len() / 2];
        assert!(matches!(decode_image(cut), Err(DataError::Decode { .. })));
        assert!(matches!(decode_image(b"GIF89a......"), Err(DataError::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"not an image"), Err(DataError::UnsupportedFormat(_))));
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let px: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageBuffer::from_bytes(5, 4, 3, &px).unwrap();
        let back = decode_image(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.to_bytes(), px);
    }

    #[test]
    fn resize_examples() {
        let img =
            ImageBuffer::from_bytes(3, 2, 3, &[10, 20, 30, 40, 50, 60, 70, 80, 90, 1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap(), img);

        let flat = ImageBuffer::filled(4, 3, 3, 77.0);
        let up = resize_bilinear(&flat, 9, 7).unwrap();
        assert!(up.data().iter().all(|&v| v == 77.0));

        let checker = ImageBuffer::from_bytes(2, 2, 1, &[0, 255, 255, 0]).unwrap();
        let r = resize_bilinear(&checker, 3, 3).unwrap();
        assert_eq!(r.get(1, 1, 0), 127.5);
        assert!(resize_bilinear(&checker, 0, 3).is_err());
    }
}
