//! 8-bit RGB PNG encode/decode for float images.
//!
//! Values are mapped linearly: a float in [0, 1] becomes `round(v * 255)` on
//! save and `byte / 255` on load, so one write/read round trip moves any
//! in-range value by at most 1/510. Out-of-range floats are clamped on save;
//! rendered images stay in range by construction, so clamping only guards
//! hand-built data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::raster::Image;

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Domain(format!(
            "cannot encode an empty {}x{} image",
            img.width, img.height
        )));
    }
    let mut bytes = Vec::with_capacity(img.width * img.height * 3);
    for v in &img.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut encoded = Vec::new();
    {
        use image::ImageEncoder;
        let enc = image::codecs::png::PngEncoder::new(&mut encoded);
        enc.write_image(
            &bytes,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
    }
    atomic_write(path, &encoded)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let rgb = dynimg.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(w, h);
    for (i, byte) in rgb.as_raw().iter().enumerate() {
        img.data[i] = *byte as f64 / 255.0;
    }
    Ok(img)
}
