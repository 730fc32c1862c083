//! File formats: 8/16-bit PNG images, binary and 16-bit-PNG flow codecs,
//! 16-bit-PNG disparity, binary semantic masks, PGM heatmaps and the flat
//! key=value config text format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::superpixels::SemanticMask;
use crate::types::{DisparityMap, FlowField, Image, INVALID_DISPARITY};
use crate::{Error, Result};

fn io_err<P: AsRef<Path>>(path: P) -> impl FnOnce(std::io::Error) -> Error {
    let p = path.as_ref().display().to_string();
    move |source| Error::Io { path: p, source }
}

fn codec_err<P: AsRef<Path>, E: std::fmt::Display>(path: P) -> impl FnOnce(E) -> Error {
    let p = path.as_ref().display().to_string();
    move |e| Error::Codec(format!("{p}: {e}"))
}

/// Write an image as PNG; `bit_depth` must be 8 or 16. Intensities map
/// linearly onto the full integer range.
pub fn write_image<P: AsRef<Path>>(path: P, img: &Image, bit_depth: u8) -> Result<()> {
    let (h, w) = (img.height as u32, img.width as u32);
    let enc = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
    match (bit_depth, img.channels) {
        (8, 1) => {
            let buf: Vec<u8> = img.data.iter().map(|&v| enc(v, 255.0) as u8).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("sized buffer")
                .save(&path)
                .map_err(codec_err(&path))
        }
        (8, 3) => {
            let buf: Vec<u8> = img.data.iter().map(|&v| enc(v, 255.0) as u8).collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("sized buffer")
                .save(&path)
                .map_err(codec_err(&path))
        }
        (16, 1) => {
            let buf: Vec<u16> = img.data.iter().map(|&v| enc(v, 65535.0) as u16).collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                .expect("sized buffer")
                .save(&path)
                .map_err(codec_err(&path))
        }
        (16, 3) => {
            let buf: Vec<u16> = img.data.iter().map(|&v| enc(v, 65535.0) as u16).collect();
            image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, buf)
                .expect("sized buffer")
                .save(&path)
                .map_err(codec_err(&path))
        }
        (d, c) => Err(Error::Codec(format!("unsupported bit depth {d} / channels {c}"))),
    }
}

/// Read an 8- or 16-bit PNG as an intensity image in [0, 1]; grayscale
/// files become single-channel, everything else 3-channel.
pub fn read_image<P: AsRef<Path>>(path: P) -> Result<Image> {
    let dyn_img = image::open(&path).map_err(codec_err(&path))?;
    let out = match dyn_img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Image {
                height: h,
                width: w,
                channels: 1,
                data: g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            }
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Image {
                height: h,
                width: w,
                channels: 1,
                data: g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            }
        }
        other => {
            if other.color().bits_per_pixel() > 24 {
                let rgb = other.to_rgb16();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                Image {
                    height: h,
                    width: w,
                    channels: 3,
                    data: rgb.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
                }
            } else {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                Image {
                    height: h,
                    width: w,
                    channels: 3,
                    data: rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
                }
            }
        }
    };
    Ok(out)
}

const FLOW_MAGIC: &[u8; 4] = b"PIEH";

/// Binary flow format: magic "PIEH", little-endian i32 width and height,
/// then interleaved (u, v) float32 row-major. Bit-exact at f32 precision.
pub fn write_flow<P: AsRef<Path>>(path: P, flow: &FlowField) -> Result<()> {
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    let mut buf = Vec::with_capacity(12 + flow.u.len() * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..flow.u.len() {
        buf.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(io_err(&path))
}

pub fn read_flow<P: AsRef<Path>>(path: P) -> Result<FlowField> {
    let mut data = Vec::new();
    std::fs::File::open(&path)
        .map_err(io_err(&path))?
        .read_to_end(&mut data)
        .map_err(io_err(&path))?;
    if data.len() < 12 || &data[0..4] != FLOW_MAGIC {
        return Err(Error::Codec(format!(
            "{}: bad flow magic",
            path.as_ref().display()
        )));
    }
    let w = i32::from_le_bytes(data[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(data[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Codec(format!("{}: bad dimensions", path.as_ref().display())));
    }
    let (w, h) = (w as usize, h as usize);
    if data.len() != 12 + w * h * 8 {
        return Err(Error::Codec(format!(
            "{}: truncated flow file",
            path.as_ref().display()
        )));
    }
    let mut flow = FlowField::zeros(h, w);
    for i in 0..w * h {
        let o = 12 + i * 8;
        flow.u[i] = f32::from_le_bytes(data[o..o + 4].try_into().unwrap()) as f64;
        flow.v[i] = f32::from_le_bytes(data[o + 4..o + 8].try_into().unwrap()) as f64;
    }
    Ok(flow)
}

/// 16-bit PNG flow codec: channel 0/1 store `u,v * 64 + 2^15`, channel 2
/// is the validity bit. Quantizes to 1/64 px.
pub fn write_flow_png<P: AsRef<Path>>(path: P, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.height as u32, flow.width as u32);
    let mut buf = Vec::with_capacity(flow.u.len() * 3);
    for i in 0..flow.u.len() {
        let enc = |v: f64| ((v * 64.0 + 32768.0).round()).clamp(0.0, 65535.0) as u16;
        buf.push(enc(flow.u[i]));
        buf.push(enc(flow.v[i]));
        buf.push(1);
    }
    image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, buf)
        .expect("sized buffer")
        .save(&path)
        .map_err(codec_err(&path))
}

pub fn read_flow_png<P: AsRef<Path>>(path: P) -> Result<(FlowField, Vec<bool>)> {
    let img = image::open(&path).map_err(codec_err(&path))?.to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut flow = FlowField::zeros(h, w);
    let mut valid = vec![false; h * w];
    for i in 0..h * w {
        flow.u[i] = (raw[i * 3] as f64 - 32768.0) / 64.0;
        flow.v[i] = (raw[i * 3 + 1] as f64 - 32768.0) / 64.0;
        valid[i] = raw[i * 3 + 2] > 0;
    }
    Ok((flow, valid))
}

/// 16-bit PNG disparity: stored = d * 256, 0 marks invalid pixels.
pub fn write_disparity<P: AsRef<Path>>(path: P, map: &DisparityMap) -> Result<()> {
    let (h, w) = (map.height as u32, map.width as u32);
    let buf: Vec<u16> = map
        .d
        .iter()
        .map(|&d| {
            if d < 0.0 {
                0
            } else {
                ((d * 256.0).round()).clamp(1.0, 65535.0) as u16
            }
        })
        .collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
        .expect("sized buffer")
        .save(&path)
        .map_err(codec_err(&path))
}

pub fn read_disparity<P: AsRef<Path>>(path: P) -> Result<DisparityMap> {
    let img = image::open(&path).map_err(codec_err(&path))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = DisparityMap::invalid(h, w);
    for (i, &v) in img.as_raw().iter().enumerate() {
        map.d[i] = if v == 0 { INVALID_DISPARITY } else { v as f64 / 256.0 };
    }
    Ok(map)
}

/// Semantic/moving masks as 8-bit PNG: 0 background, 255 foreground.
pub fn write_mask<P: AsRef<Path>>(path: P, mask: &SemanticMask) -> Result<()> {
    let buf: Vec<u8> = mask.fg.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, buf)
        .expect("sized buffer")
        .save(&path)
        .map_err(codec_err(&path))
}

pub fn read_mask<P: AsRef<Path>>(path: P) -> Result<SemanticMask> {
    let img = image::open(&path).map_err(codec_err(&path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(SemanticMask {
        height: h,
        width: w,
        fg: img.as_raw().iter().map(|&v| v >= 128).collect(),
    })
}

/// Binary 8-bit PGM (P5), values scaled from [0, vmax] onto 0..255.
pub fn write_pgm<P: AsRef<Path>>(path: P, values: &[f64], height: usize, width: usize, vmax: f64) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    let scale = if vmax > 0.0 { 255.0 / vmax } else { 0.0 };
    buf.extend(values.iter().map(|&v| (v.max(0.0) * scale).min(255.0) as u8));
    std::fs::write(&path, buf).map_err(io_err(&path))
}

/// Parse flat `key=value` text: one pair per line, `#` starts a comment,
/// blank lines ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {raw:?}",
                lineno + 1
            )));
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

pub fn read_key_values<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_key_values(&text)
}

pub fn write_key_values<P: AsRef<Path>>(path: P, kv: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(io_err(&path))
}
