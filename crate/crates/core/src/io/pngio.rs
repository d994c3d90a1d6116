//! 8-bit RGB PNG in and out. The 8-bit code grid round-trips exactly:
//! `k/255` encodes to code `k` and decodes back to the same float.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::io::IoError;
use crate::radiometry::{ImageBuf, LdrImage};
use crate::scalar::Scalar;

pub fn save<T: Scalar>(path: &Path, image: &LdrImage<T>) -> Result<(), IoError> {
    if let Some(d) = image.bit_depth() {
        if d > 8 {
            return Err(IoError::Dataset(format!("cannot store {d}-bit frame as 8-bit PNG")));
        }
    }
    let (h, w) = (image.height(), image.width());
    let rgb = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image.buf().get(c, y as usize, x as usize).as_f64() * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<LdrImage<T>, IoError> {
    let rgb = image::open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let buf = ImageBuf::from_fn(h as usize, w as usize, |c, y, x| {
        T::cast(rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    });
    Ok(LdrImage::new(buf, Some(8))?)
}
