use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Bilinear resampling with half-pixel centres and clamped edges.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch(format!("cannot resize to {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, sx, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageTensor::new(c, out_h, out_w, out)
}

/// Brings a raw image to `3 x size x size` in `[-1, 1]`.
///
/// Grey images are replicated to three channels and a fourth (alpha)
/// channel is dropped. Values already in `[-1, 1]` are kept; otherwise an
/// image within `[0, 255]` is treated as 8-bit, and anything else is
/// clamped.
pub fn preprocess(image: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::Decode("empty image".into()));
    }
    let plane = h * w;
    let rgb: Vec<f64> = match c {
        1 => image.data().repeat(3),
        3 => image.data().to_vec(),
        4 => image.data()[..3 * plane].to_vec(),
        _ => return Err(Error::Decode(format!("unsupported channel count {c}"))),
    };
    let (lo, hi) = rgb.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scaled: Vec<f64> = if lo >= -1.0 && hi <= 1.0 {
        rgb
    } else if lo >= 0.0 && hi <= 255.0 {
        rgb.iter().map(|v| v / 127.5 - 1.0).collect()
    } else {
        rgb.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    };
    let img = ImageTensor::new(3, h, w, scaled)?;
    let out = resize_bilinear(&img, size, size)?;
    ImageTensor::from_tensor(out.tensor().map(|v| v.clamp(-1.0, 1.0)))
}

/// Decodes an 8-bit PNG (grey, grey+alpha, RGB or RGBA) into `[-1, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Decode(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.color_type.samples();
    let take: &[usize] = match info.color_type {
        png::ColorType::Rgb | png::ColorType::Rgba => &[0, 1, 2],
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => &[0, 0, 0],
        png::ColorType::Indexed => return Err(Error::Decode("indexed PNG not supported".into())),
    };
    let mut planar = vec![0u8; 3 * h * w];
    for (ch, &src) in take.iter().enumerate() {
        for p in 0..h * w {
            planar[ch * h * w + p] = buf[p * stride + src];
        }
    }
    ImageTensor::from_u8(3, h, w, &planar)
}

/// Encodes a three-channel image as an 8-bit RGB PNG.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("PNG export expects 3 channels, got {}", image.channels())));
    }
    let (h, w) = (image.height(), image.width());
    let planar = image.to_u8();
    let mut interleaved = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            interleaved[p * 3 + ch] = planar[ch * h * w + p];
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Decode(e.to_string()))?;
        writer.write_image_data(&interleaved).map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}
