//! On-disk trace directories: `manifest.json` plus one PNG per step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::domain::ImageTensor;
use crate::error::{NaeError, Result};
use crate::optimizer::OptimizationTrace;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const TRACE_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub schema_version: u32,
    #[serde(flatten)]
    pub trace: OptimizationTrace,
}

pub fn step_image_name(step: usize) -> String {
    format!("step_{step:03}.png")
}

/// Encode an image as an 8-bit PNG (grayscale, RGB or RGBA by channel count).
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(NaeError::InvalidImage(format!("cannot encode {c} channels as PNG"))),
    };
    let data: Vec<u8> = image.pixels().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| NaeError::Png(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| NaeError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decode an 8-bit PNG back into `[0, 1]` pixels.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| NaeError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| NaeError::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| NaeError::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(NaeError::Png("only 8-bit images are supported".into()));
    }
    let channels = info.color_type.samples();
    let pixels = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::new(info.height as usize, info.width as usize, channels, pixels)
}

/// Write `trace` to `dir`, filling in each step's image path and PNG digest.
/// Steps without an in-memory image keep whatever paths they already carry.
pub fn write_trace(trace: &mut OptimizationTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NaeError::io(dir, e))?;
    for (record, image) in trace.steps.iter_mut().zip(&trace.images) {
        let name = step_image_name(record.step);
        let bytes = encode_png(image)?;
        record.png_sha256 = Some(sha256_hex(&bytes));
        record.image_path = Some(name.clone());
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| NaeError::io(&path, e))?;
    }
    let manifest = TraceManifest { schema_version: TRACE_SCHEMA_VERSION, trace: trace.clone() };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(TRACE_MANIFEST);
    fs::write(&path, json).map_err(|e| NaeError::io(&path, e))
}

/// Read a trace manifest. Images are not loaded.
pub fn read_trace(dir: &Path) -> Result<OptimizationTrace> {
    let path = dir.join(TRACE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| NaeError::io(&path, e))?;
    let manifest: TraceManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != TRACE_SCHEMA_VERSION {
        return Err(NaeError::InvalidConfig(format!(
            "{}: unsupported trace schema {}",
            path.display(),
            manifest.schema_version
        )));
    }
    Ok(manifest.trace)
}
