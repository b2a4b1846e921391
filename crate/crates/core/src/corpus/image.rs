//! Grayscale PNG I/O and power-of-two resizing. Pixels live in `[-1, 1]` in
//! memory and are stored as 8-bit values on disk.

use std::path::Path;

use crate::autograd::{kernels, Tensor};
use crate::error::{Error, Result};

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(p: u8) -> f64 {
    p as f64 / 255.0 * 2.0 - 1.0
}

/// Loads a PNG as a `[H, W]` tensor in `[-1, 1]`; colour inputs are converted to luma.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&p| from_u8(p)).collect();
    Ok(Tensor::new(&[h as usize, w as usize], data))
}

/// Checks that `path` decodes as an image header without reading pixels.
pub fn check_readable(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = dims2(pixels)?;
    let raw: Vec<u8> = pixels.data().iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Internal("image buffer size".into()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!("expected a 2-D image, got {:?}", t.shape()))),
    }
}

/// Averages non-overlapping `factor x factor` blocks.
pub fn box_downsample(img: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    assert!(h % factor == 0 && w % factor == 0, "{h}x{w} not divisible by {factor}");
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += img.data()[y * w + x];
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Tensor::new(&[oh, ow], out)
}

/// Bilinear 2x upsampling of a `[H, W]` image.
pub fn upsample2x(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let up = kernels::upsample2x(&img.clone().reshape(&[1, 1, h, w]));
    up.reshape(&[2 * h, 2 * w])
}

/// Resizes a square image to `side` by box-averaging or bilinear doubling.
pub fn resize_square(img: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w) = dims2(img)?;
    if h != w {
        return Err(Error::shape(format!("expected a square image, got {h}x{w}")));
    }
    let img = img.clone().reshape(&[h, w]);
    if h == side {
        return Ok(img);
    }
    if h > side {
        if h % side != 0 || !(h / side).is_power_of_two() {
            return Err(Error::shape(format!("cannot downsample {h} to {side}")));
        }
        return Ok(box_downsample(&img, h / side));
    }
    if !side.is_multiple_of(h) || !(side / h).is_power_of_two() {
        return Err(Error::shape(format!("cannot upsample {h} to {side}")));
    }
    let mut cur = img;
    while cur.shape()[0] < side {
        cur = upsample2x(&cur);
    }
    Ok(cur)
}
