//! `path,person_id,camera_id` CSV manifests of P6 images. Relative image
//! paths resolve against the manifest's directory.

use std::path::Path;

use super::pnm;
use super::DatasetRecord;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::PatchConfig;

const HEADER: [&str; 3] = ["path", "person_id", "camera_id"];

pub fn load_manifest(path: &Path, cfg: &PatchConfig) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Data(format!(
            "{}: header must be exactly {}, found {}",
            path.display(),
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let n = i + 1;
        let fail = |msg: String| Error::Data(format!("{} row {n}: {msg}", path.display()));
        let row = row.map_err(|e| fail(e.to_string()))?;
        if row.len() != 3 {
            return Err(fail(format!("expected 3 fields, found {}", row.len())));
        }
        let person_id = row[1].trim().parse().map_err(|_| fail(format!("bad person_id {:?}", &row[1])))?;
        let camera_id = row[2].trim().parse().map_err(|_| fail(format!("bad camera_id {:?}", &row[2])))?;
        let image = load_image(&base.join(&row[0]), cfg).map_err(|e| match e {
            Error::Config(_) => e,
            other => fail(other.to_string()),
        })?;
        out.push(DatasetRecord { image, person_id, camera_id, occluder: None });
    }
    Ok(out)
}

/// Reads one P6 image as `[3, H, W]` resized to the configured size.
pub fn load_image(path: &Path, cfg: &PatchConfig) -> Result<Tensor> {
    if cfg.channels != 3 {
        return Err(Error::Config(format!("images are RGB; patch.channels is {}", cfg.channels)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = pnm::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if img.channels != 3 {
        return Err(Error::Data(format!("{}: expected a P6 colour image", path.display())));
    }
    resize_bilinear(&to_planar(&img), cfg.height, cfg.width)
}

fn to_planar(img: &pnm::Pnm) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0; plane * img.channels];
    for (i, px) in img.samples.chunks(img.channels).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * plane + i] = f64::from(v) / 255.0;
        }
    }
    Tensor::new(&[img.channels, img.height, img.width], data).expect("decoded image shape")
}

/// Bilinear resize of `[C, H, W]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::invalid("resize", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let src = image.data();
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut data = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(p[y0 * w + x0], p[y0 * w + x1], tx);
                let bottom = lerp(p[y1 * w + x0], p[y1 * w + x1], tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new(&[c, height, width], data)
}

/// Writes each record as `NNNNN.ppm` plus `manifest.csv` into `dir`.
pub fn write_manifest(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = format!("{}\n", HEADER.join(","));
    for (i, r) in records.iter().enumerate() {
        let [c, h, w] = *r.image.shape() else {
            return Err(Error::invalid("write_manifest", "records must hold [C, H, W] images"));
        };
        let name = format!("{i:05}.ppm");
        pnm::write(&dir.join(&name), &pnm::from_planar(r.image.data(), c, h, w))?;
        csv.push_str(&format!("{name},{},{}\n", r.person_id, r.camera_id));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}
