//! Conversions between latents and raster images.
//!
//! Latents are exchanged as 16-bit PNGs (grayscale for one channel, RGB for
//! three). Intensities map linearly from `[-1, 1]` onto the full `u16` range.

use std::io::Cursor;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::schedule::LatentShape;

/// Box-filter resample of one `sw x sh` plane to `tw x th`: every output pixel
/// is the coverage-weighted mean of the source pixels under it.
pub fn area_resize(src: &[f64], sw: usize, sh: usize, tw: usize, th: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    let weights = |s: usize, t: usize| -> Vec<Vec<(usize, f64)>> {
        let ratio = s as f64 / t as f64;
        (0..t)
            .map(|o| {
                let lo = o as f64 * ratio;
                let hi = (o + 1) as f64 * ratio;
                let mut w = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < s {
                    let a = (i as f64).max(lo);
                    let b = ((i + 1) as f64).min(hi);
                    if b > a {
                        w.push((i, (b - a) / ratio));
                    }
                    i += 1;
                }
                w
            })
            .collect()
    };
    let wx = weights(sw, tw);
    let wy = weights(sh, th);
    let mut rows = vec![0.0; sh * tw];
    for y in 0..sh {
        for (ox, ws) in wx.iter().enumerate() {
            rows[y * tw + ox] = ws.iter().map(|&(i, w)| w * src[y * sw + i]).sum();
        }
    }
    let mut out = vec![0.0; th * tw];
    for (oy, ws) in wy.iter().enumerate() {
        for ox in 0..tw {
            out[oy * tw + ox] = ws.iter().map(|&(i, w)| w * rows[i * tw + ox]).sum();
        }
    }
    out
}

/// Largest centred window of `w x h` with the aspect ratio `tw : th`.
fn center_crop(w: usize, h: usize, tw: usize, th: usize) -> (usize, usize, usize, usize) {
    // Compare w/h with tw/th in integers.
    if w * th > h * tw {
        let cw = (h * tw / th).max(1);
        ((w - cw) / 2, 0, cw, h)
    } else {
        let ch = (w * th / tw).max(1);
        (0, (h - ch) / 2, w, ch)
    }
}

/// Center-crops and area-resizes a decoded image into a latent row with
/// values in `[-1, 1]`.
pub fn image_to_latent(img: &DynamicImage, shape: LatentShape) -> Result<Array1<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let planes: Vec<Vec<f64>> = match shape.channels {
        1 => {
            let g = img.to_luma16();
            vec![g.pixels().map(|p| p.0[0] as f64).collect()]
        }
        3 => {
            let rgb = img.to_rgb16();
            (0..3)
                .map(|c| rgb.pixels().map(|p| p.0[c] as f64).collect())
                .collect()
        }
        c => {
            return Err(Error::invalid(format!(
                "raster exchange supports 1 or 3 channels, not {c}"
            )))
        }
    };
    let (x0, y0, cw, ch) = center_crop(w, h, shape.width, shape.height);
    let mut out = Vec::with_capacity(shape.numel());
    for plane in planes {
        let crop: Vec<f64> = (y0..y0 + ch)
            .flat_map(|y| (x0..x0 + cw).map(move |x| (y, x)))
            .map(|(y, x)| plane[y * w + x])
            .collect();
        let resized = area_resize(&crop, cw, ch, shape.width, shape.height);
        out.extend(resized.into_iter().map(|v| v / 65535.0 * 2.0 - 1.0));
    }
    Ok(Array1::from(out))
}

fn quantize(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16
}

pub fn encode_latent(row: ArrayView1<f64>, shape: LatentShape) -> Result<Vec<u8>> {
    if row.len() != shape.numel() {
        return Err(Error::invalid("latent row does not match shape"));
    }
    let (w, h) = (shape.width as u32, shape.height as u32);
    let hw = shape.height * shape.width;
    let mut buf = Cursor::new(Vec::new());
    let enc = |e: image::ImageError| Error::invalid(format!("png encoding failed: {e}"));
    match shape.channels {
        1 => {
            let data: Vec<u16> = row.iter().map(|&v| quantize(v)).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data)
                .expect("buffer size")
                .write_to(&mut buf, ImageFormat::Png)
                .map_err(enc)?;
        }
        3 => {
            let mut data = Vec::with_capacity(3 * hw);
            for i in 0..hw {
                for c in 0..3 {
                    data.push(quantize(row[c * hw + i]));
                }
            }
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data)
                .expect("buffer size")
                .write_to(&mut buf, ImageFormat::Png)
                .map_err(enc)?;
        }
        c => {
            return Err(Error::invalid(format!(
                "raster exchange supports 1 or 3 channels, not {c}"
            )))
        }
    }
    Ok(buf.into_inner())
}

pub fn decode_latent(bytes: &[u8], shape: LatentShape) -> Result<Array1<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::invalid(format!("undecodable image: {e}")))?;
    image_to_latent(&img, shape)
}
