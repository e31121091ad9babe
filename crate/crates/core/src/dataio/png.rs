//! RGB images on disk. Written as 16-bit PNG; 8- and 16-bit files are read.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::image::Image;

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("only RGB images are written, got {} channels", img.channels())));
    }
    let data: Vec<u16> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16).collect();
    let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(img.width() as u32, img.height() as u32, data)
        .expect("buffer sized from image");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let wide = matches!(
        dynamic,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let data: Vec<f32> = if wide {
        dynamic.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
    } else {
        dynamic.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    Image::from_vec(w, h, 3, data)
}
