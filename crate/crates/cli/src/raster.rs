//! PNG input and montage output.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use tgdd::{Error, Result, Tensor};

pub const GUTTER: usize = 2;

/// Montage of `images` (values in [0, 1], NCHW with 1 or 3 channels) with
/// `cols` images per row and white gutters.
pub fn montage(images: &Tensor, cols: usize) -> Result<RgbImage> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("cannot render {c}-channel images")));
    }
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols + 1) * GUTTER;
    let height = rows * h + (rows + 1) * GUTTER;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, image::Rgb([255, 255, 255]));
    let data = images.data();
    for k in 0..n {
        let (r, col) = (k / cols, k % cols);
        let (oy, ox) = (GUTTER + r * (h + GUTTER), GUTTER + col * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    let src = if c == 1 { 0 } else { ch };
                    let v = data[((k * c + src) * h + y) * w + x];
                    *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(px));
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let io = |e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Images read from `root/<class>/*.png`, classes in name order.
pub struct ImageFolder {
    pub class_names: Vec<String>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub fn read_image_folder(root: &Path, channels: usize) -> Result<ImageFolder> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let class_dirs = sorted_entries(root, true)?;
    if class_dirs.len() < 2 {
        return Err(Error::Config(format!(
            "{} needs at least two class subdirectories",
            root.display()
        )));
    }
    let mut class_names = Vec::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(dir, false)? {
            let img = image::open(&file).map_err(|e| match e {
                image::ImageError::IoError(source) => Error::Io {
                    path: file.clone(),
                    source,
                },
                other => Error::Format(format!("{}: {other}", file.display())),
            })?;
            let dims = (img.width(), img.height());
            match size {
                None => size = Some(dims),
                Some(s) if s != dims => {
                    return Err(Error::Shape(format!(
                        "{} is {}x{}, expected {}x{}",
                        file.display(),
                        dims.0,
                        dims.1,
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            let (w, h) = (dims.0 as usize, dims.1 as usize);
            let raw = if channels == 1 {
                img.to_luma8().into_raw()
            } else {
                img.to_rgb8().into_raw()
            };
            // Interleaved HWC bytes to planar CHW.
            for ch in 0..channels {
                for i in 0..h * w {
                    pixels.push(f64::from(raw[i * channels + ch]) / 255.0);
                }
            }
            labels.push(class);
        }
    }
    let (w, h) = size.ok_or(Error::EmptyDataset)?;
    let images = Tensor::new(vec![labels.len(), channels, h as usize, w as usize], pixels)?;
    Ok(ImageFolder {
        class_names,
        images,
        labels,
    })
}
