//! Raster I/O for the `<split>/images/*.png` + `<split>/labels/*.png`
//! dataset layout. Labels are 8-bit trainIDs; anything outside `0..19`
//! is stored as the ignore value.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use super::{Domain, Sample, NUM_CLASSES};
use crate::autograd::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_dynamic(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path, domain: Domain) -> Result<Sample> {
    let rgb = read_dynamic(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + p] = f64::from(px[ch]) / 255.0;
        }
    }
    Sample::new(Tensor::new(&[3, h, w], data)?, None, domain)
}

/// Loads an RGB image with its trainID raster.
pub fn load_labeled_pair(image_path: &Path, label_path: &Path, domain: Domain) -> Result<Sample> {
    let mut sample = load_image(image_path, domain)?;
    let label = read_dynamic(label_path)?.to_luma8();
    let (w, h) = (label.width() as usize, label.height() as usize);
    if (w, h) != (sample.width(), sample.height()) {
        return Err(Error::Format(format!(
            "label {} is {w}x{h} but image {} is {}x{}",
            label_path.display(),
            image_path.display(),
            sample.width(),
            sample.height()
        )));
    }
    let labels = label
        .into_raw()
        .into_iter()
        .map(|v| {
            if usize::from(v) < NUM_CLASSES {
                v
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    sample.labels = Some(labels);
    Ok(sample)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every image of `<root>/<split>/images`, paired with the same file
/// name under `labels/` when `labeled`.
pub fn load_split(root: &Path, split: &str, domain: Domain, labeled: bool) -> Result<Vec<Sample>> {
    let base = root.join(split);
    let images = sorted_pngs(&base.join("images"))?;
    images
        .iter()
        .map(|img| {
            if labeled {
                let name = img.file_name().expect("listed files have names");
                load_labeled_pair(img, &base.join("labels").join(name), domain)
            } else {
                load_image(img, domain)
            }
        })
        .collect()
}

/// Writes `<root>/<split>/images/<name>.png` and, when present, the label
/// raster under `labels/`.
pub fn write_sample(root: &Path, split: &str, name: &str, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let img_dir = root.join(split).join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let d = sample.image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| (d[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    let path = img_dir.join(format!("{name}.png"));
    rgb.save(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if let Some(labels) = &sample.labels {
        let lbl_dir = root.join(split).join("labels");
        fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(&lbl_dir, e))?;
        let gray = GrayImage::from_raw(w as u32, h as u32, labels.clone())
            .ok_or_else(|| Error::Format("label buffer size mismatch".into()))?;
        let path = lbl_dir.join(format!("{name}.png"));
        gray.save(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Resizes a sample: bilinear (half-pixel centers) for the image, nearest
/// for labels.
pub fn resize_sample(sample: &Sample, width: usize, height: usize) -> Result<Sample> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let (h, w) = (sample.height(), sample.width());
    if (h, w) == (height, width) {
        return Ok(sample.clone());
    }
    let mut tape = crate::autograd::Tape::new();
    let x = tape.constant(sample.image.clone().reshape(&[1, 3, h, w])?);
    let y = tape.resize_bilinear(x, height, width)?;
    let image = tape.value(y).clone().reshape(&[3, height, width])?;
    let labels = sample.labels.as_ref().map(|l| {
        let mut out = Vec::with_capacity(width * height);
        for i in 0..height {
            let si = ((i as f64 + 0.5) * h as f64 / height as f64) as usize;
            for j in 0..width {
                let sj = ((j as f64 + 0.5) * w as f64 / width as f64) as usize;
                out.push(l[si.min(h - 1) * w + sj.min(w - 1)]);
            }
        }
        out
    });
    Sample::new(image, labels, sample.domain)
}
