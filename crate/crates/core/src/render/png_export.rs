use std::fs;
use std::io::{self, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Canvas, UnifiedSample};

/// JSON written next to each exported PNG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub label: usize,
    pub n_a: usize,
    pub rules: Vec<u8>,
}

/// 8-bit grayscale PNG without alpha. Compression settings are pinned so the
/// bytes only depend on the pixels.
pub fn write_png(path: &Path, canvas: &Canvas) -> io::Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), canvas.width as u32, canvas.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    enc.set_filter(png::Filter::Sub);
    let mut writer = enc.write_header().map_err(io::Error::other)?;
    writer.write_image_data(&canvas.data).map_err(io::Error::other)?;
    writer.finish().map_err(io::Error::other)
}

/// Writes `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_sample(dir: &Path, stem: &str, sample: &UnifiedSample) -> io::Result<()> {
    write_png(&dir.join(format!("{stem}.png")), &sample.canvas)?;
    let sidecar = SampleSidecar { label: sample.label, n_a: sample.n_a, rules: sample.rules.0.clone() };
    let mut json = serde_json::to_vec(&sidecar).map_err(io::Error::other)?;
    json.push(b'\n');
    fs::write(dir.join(format!("{stem}.json")), json)
}
