//! Disk layout: `labels.csv` with header `id_code,diagnosis` plus one
//! 8-bit RGB image per row, `<id>.png` or `<id>.ppm`, under a root
//! directory.

use super::{DataError, Dataset, LabeledSample};
use crate::parallel;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Load every labeled image under `root_dir`. Images come back as
/// `[3, H, W]` tensors of raw `[0,255]` intensities; sizes may differ per
/// image. Rows with no matching image file are collected into one error
/// listing every missing id.
pub fn load_dataset(root_dir: &Path, labels_file: &Path) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(labels_file)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "id_code" || &headers[1] != "diagnosis" {
        return Err(DataError::BadHeader {
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows: Vec<(String, usize)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or("").to_string();
        let raw = record.get(1).unwrap_or("").to_string();
        let stage = raw.parse::<i64>().ok().filter(|d| (0..=4).contains(d));
        match stage {
            Some(d) => rows.push((id, d as usize)),
            None => return Err(DataError::BadDiagnosis { id, value: raw }),
        }
    }

    let mut paths: Vec<PathBuf> = Vec::with_capacity(rows.len());
    let mut missing: Vec<String> = Vec::new();
    for (id, _) in &rows {
        let png = root_dir.join(format!("{id}.png"));
        let ppm = root_dir.join(format!("{id}.ppm"));
        if png.is_file() {
            paths.push(png);
        } else if ppm.is_file() {
            paths.push(ppm);
        } else {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingImages { ids: missing });
    }

    let loaded = parallel::map_indexed(rows.len(), |i| {
        load_image(&paths[i]).map(|image| LabeledSample {
            id: rows[i].0.clone(),
            image,
            stage: rows[i].1,
        })
    });
    let samples = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(samples))
}

/// Load one 8-bit RGB image as a `[3, H, W]` tensor of raw `[0,255]`
/// intensities.
pub fn load_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let wrap = |source| DataError::Image {
        path: path.to_path_buf(),
        source,
    };
    let decoded = image::ImageReader::open(path)
        .map_err(|e| wrap(image::ImageError::IoError(e)))?
        .decode()
        .map_err(wrap)?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(DataError::NotRgb8 {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, pixel) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = pixel[c] as f32;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("buffer sized to shape"))
}

/// Write a dataset of canonical `[0,1]` images in the loader's layout:
/// `labels.csv` plus one PNG per sample.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("labels.csv"))?;
    writer.write_record(["id_code", "diagnosis"])?;
    for s in &dataset.samples {
        writer.write_record([s.id.as_str(), &s.stage.to_string()])?;
    }
    writer.flush()?;
    for s in &dataset.samples {
        save_image(&s.image, &dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn save_image(image: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [3, H, W], got {shape:?}");
    assert_eq!(shape[0], 3, "expected [3, H, W], got {shape:?}");
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = image.data();
    let mut bytes = vec![0u8; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * plane + y * w + x].clamp(0.0, 1.0);
                bytes[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to shape");
    rgb.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}
