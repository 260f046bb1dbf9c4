//! Image files: 8-bit PNG, or a JSON sidecar `{"shape": [h, w, c], "data": [...]}`
//! holding row-major floats in `[0, 1]`. No resizing is performed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use autodiff::Tensor;

use crate::data::InlineImage;
use crate::error::{Error, Result};

/// Pixels `[H, W, 3]` in `[0, 1]`. Grayscale is replicated, alpha dropped.
pub fn load(path: &Path) -> Result<Tensor> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => load_png(path),
        Some("json") => load_sidecar(path),
        _ => Err(Error::Data(format!(
            "{}: unsupported image format (expected .png or .json)",
            path.display()
        ))),
    }
}

fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * src_channels].chunks(src_channels) {
            let rgb = match src_channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            data.extend(rgb.iter().map(|v| *v as f64 / 255.0));
        }
    }
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

fn load_sidecar(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let img: InlineImage =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Tensor::new(img.shape, img.data).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `[H, W, 3]` pixels as an 8-bit RGB PNG (values rounded).
pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let [h, w, 3] = pixels.shape() else {
        return Err(Error::Data(format!(
            "PNG output needs [H, W, 3] pixels, got {:?}",
            pixels.shape()
        )));
    };
    let bytes: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), *w as u32, *h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

pub fn save_sidecar(path: &Path, pixels: &Tensor) -> Result<()> {
    let img = InlineImage {
        shape: pixels.shape().to_vec(),
        data: pixels.data().to_vec(),
    };
    let text = serde_json::to_string(&img).expect("image serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
