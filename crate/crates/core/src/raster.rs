//! Plain-array raster helpers: PNG I/O, quantization, tensor conversion.
//!
//! Images are `Array3<f32>` in (H, W, C) order with values in [0, 1]; single-channel
//! maps are `Array2<f32>`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::bilinear_weights;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0
    })
}

pub fn array_to_rgb(img: &Array3<f32>) -> RgbImage {
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        image::Rgb([
            to_u8(img[[r, c, 0]]),
            to_u8(img[[r, c, 1]]),
            to_u8(img[[r, c, 2]]),
        ])
    })
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0]
    }))
}

pub fn write_gray(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([data[[r as usize, c as usize]]])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn write_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    array_to_rgb(img)
        .save(path)
        .map_err(|e| Error::image(path, e))
}

/// Write a [0, 1] map as an 8-bit grayscale PNG.
pub fn write_map(path: &Path, map: &Array2<f32>) -> Result<()> {
    write_gray(path, &map.mapv(to_u8))
}

/// Round-trip an image through 8-bit quantization.
pub fn quantize(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| to_u8(v) as f32 / 255.0)
}

/// Bilinear resize of an (H, W, C) array, same sampling grid as
/// [`crate::nn::resize_bilinear`].
pub fn resize_bilinear(x: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, ch) = x.dim();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let wh = bilinear_weights(out_h, h);
    let ww = bilinear_weights(out_w, w);
    let mut rows = Array3::<f32>::zeros((out_h, w, ch));
    for o in 0..out_h {
        for i in 0..h {
            let wt = wh[o * h + i] as f32;
            if wt != 0.0 {
                let src = x.index_axis(Axis(0), i);
                let mut dst = rows.index_axis_mut(Axis(0), o);
                dst.scaled_add(wt, &src);
            }
        }
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, ch));
    for o in 0..out_w {
        for i in 0..w {
            let wt = ww[o * w + i] as f32;
            if wt != 0.0 {
                let src = rows.index_axis(Axis(1), i);
                let mut dst = out.index_axis_mut(Axis(1), o);
                dst.scaled_add(wt, &src);
            }
        }
    }
    out
}

/// `x - mean(x)` over a `(2r+1)`-square window per channel, edges clamped.
pub fn highpass(x: &Array3<f32>, radius: usize) -> Array3<f32> {
    let (h, w, ch) = x.dim();
    // Summed-area table over the edge-padded image.
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    let mut out = x.clone();
    let mut sat = vec![0f64; (ph + 1) * (pw + 1)];
    for k in 0..ch {
        for r in 0..ph {
            let sr = r.saturating_sub(radius).min(h - 1);
            let mut row = 0f64;
            for c in 0..pw {
                let sc = c.saturating_sub(radius).min(w - 1);
                row += x[[sr, sc, k]] as f64;
                sat[(r + 1) * (pw + 1) + c + 1] = sat[r * (pw + 1) + c + 1] + row;
            }
        }
        let side = 2 * radius + 1;
        let n = (side * side) as f64;
        for r in 0..h {
            for c in 0..w {
                let at = |rr: usize, cc: usize| sat[rr * (pw + 1) + cc];
                let sum = at(r + side, c + side) - at(r, c + side) - at(r + side, c) + at(r, c);
                out[[r, c, k]] = (x[[r, c, k]] as f64 - sum / n) as f32;
            }
        }
    }
    out
}

pub fn resize_map_bilinear(x: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let x3 = x.view().into_shape_with_order((h, w, 1)).expect("contiguous");
    resize_bilinear(&x3.to_owned(), out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .expect("contiguous")
}

/// Stack (H, W, C) images into a (B, C, H, W) tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w, c) = images
        .first()
        .ok_or_else(|| Error::Empty("no images to stack".into()))?
        .dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch images differ in shape: {:?} vs {:?}",
                img.dim(),
                (h, w, c)
            )));
        }
        for ch in 0..c {
            data.extend(img.index_axis(Axis(2), ch).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stack (H, W) maps into a (B, 1, H, W) tensor.
pub fn maps_to_tensor(maps: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w) = maps
        .first()
        .ok_or_else(|| Error::Empty("no maps to stack".into()))?
        .dim();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "batch maps differ in shape: {:?} vs {:?}",
                m.dim(),
                (h, w)
            )));
        }
        data.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Extract batch item `b`, channel 0 of a (B, C, H, W) tensor as an (H, W) map.
pub fn tensor_to_map(t: &Tensor, b: usize) -> Result<Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let v = t
        .get(b)?
        .get(0)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("length matches"))
}

/// (H, W, C) view of one batch item of a (B, C, H, W) tensor.
pub fn tensor_to_image(t: &Tensor, b: usize) -> Result<Array3<f32>> {
    let (_, c, h, w) = t.dims4()?;
    let v = t
        .get(b)?
        .permute((1, 2, 0))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((h, w, c), v).expect("length matches"))
}
