//! File formats: PFM depth maps, 8-bit PNG colour images and masks, ASCII PLY point clouds and
//! the binary Gaussian checkpoint.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "GC4D"  version:u32  count:u32  sh_degree:u32
//! means[4N] rot_left[4N] rot_right[4N] log_scales[4N] opacity_logits[N] sh[3KN] sh_slope[3KN]
//! ```
//!
//! where every array is `f32` and `K = (sh_degree + 1)²` colour coefficients per primitive.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::consistency::PointCloud;
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::gaussian::{ColorModel, MAX_SH_COEFFS};
use crate::image::{DepthMap, ImageBuf, Mask, RgbImage};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GC4D";
pub const CHECKPOINT_VERSION: u32 = 1;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    fs::rename(&tmp, path).map_err(file_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(file_err(path))
}

/// Grayscale PFM ("Pf", scale −1 for little-endian, rows stored bottom to top).
pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*map.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

/// Reads grayscale ("Pf") PFM of either byte order; colour ("PF") files are rejected.
pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let bad = |m: &str| Error::format("PFM", m);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    match fields[0].as_str() {
        "Pf" => {}
        "PF" => return Err(bad("colour PFM where a single-channel map was expected")),
        other => return Err(bad(&format!("unknown magic {other:?}"))),
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 {
        return Err(bad("scale must be non-zero"));
    }
    let little = scale < 0.0;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() < 4 * w * h {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * w * h, data.len())));
    }
    let mut map = ImageBuf::filled(w, h, 0.0);
    for (i, chunk) in data.chunks_exact(4).take(w * h).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (i % w, i / w);
        *map.get_mut(x, h - 1 - row) = v as f64;
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_file(path)?)
}

/// Linear value in `[0, 1]` to an 8-bit sRGB code.
pub fn srgb_encode(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let s = if v <= 0.003_130_8 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
    (s * 255.0).round() as u8
}

pub fn srgb_decode(code: u8) -> f64 {
    let s = code as f64 / 255.0;
    if s <= 0.040_45 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// The value an image pixel takes after an 8-bit PNG round trip.
pub fn quantize_srgb(v: f64) -> f64 {
    srgb_decode(srgb_encode(v))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let data: Vec<u8> = img.as_slice().iter().flat_map(|p| p.map(srgb_encode)).collect();
    encode_png(img.width(), img.height(), png::ColorType::Rgb, &data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img)?)
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (w, h, color, buf) = decode_png(&read_file(path)?)?;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => return Err(Error::format("PNG", "unexpanded palette image")),
    };
    let px: Vec<[f64; 3]> = buf
        .chunks_exact(channels)
        .map(|c| if channels < 3 { [srgb_decode(c[0]); 3] } else { [srgb_decode(c[0]), srgb_decode(c[1]), srgb_decode(c[2])] })
        .collect();
    ImageBuf::from_vec(w, h, px)
}

/// Masks are 8-bit grayscale, 255 for kept pixels.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_atomic(path, &encode_png(mask.width(), mask.height(), png::ColorType::Grayscale, &data)?)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (w, h, color, buf) = decode_png(&read_file(path)?)?;
    let channels = color.samples();
    ImageBuf::from_vec(w, h, buf.chunks_exact(channels).map(|c| c[0] >= 128).collect())
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let c = c.map(srgb_encode);
        out.push_str(&format!("{} {} {} {} {} {}\n", p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]));
    }
    out.into_bytes()
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_ply(cloud))
}

/// Reads the ASCII `x y z red green blue` layout written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bad = |m: String| Error::format("PLY", m);
    let file = fs::File::open(path).map_err(file_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?);
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(bad(format!("unsupported {line:?}")));
        } else if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex count".into()))?;
    let mut cloud = PointCloud::default();
    for line in lines.take(count) {
        let line = line?;
        let v: Vec<f64> = line.split_whitespace().map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(e.to_string()))?;
        if v.len() < 6 {
            return Err(bad(format!("vertex line {line:?} has {} fields", v.len())));
        }
        cloud.points.push(Vector3::new(v[0], v[1], v[2]));
        cloud.colors.push([srgb_decode(v[3] as u8), srgb_decode(v[4] as u8), srgb_decode(v[5] as u8)]);
    }
    if cloud.len() != count {
        return Err(bad(format!("expected {count} vertices, found {}", cloud.len())));
    }
    Ok(cloud)
}

pub fn encode_checkpoint(field: &GaussianField) -> Vec<u8> {
    let k = field.model.num_coeffs();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, field.len() as u32, field.model.degree] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for arr in [&field.means, &field.rot_left, &field.rot_right, &field.log_scales] {
        arr.iter().flatten().for_each(|v| put(*v));
    }
    field.opacity_logits.iter().for_each(|v| put(*v));
    for sh in [&field.sh, &field.sh_slope] {
        for coeffs in sh.iter() {
            coeffs.iter().take(k).flatten().for_each(|v| put(*v));
        }
    }
    out
}

/// Parses a checkpoint. The on-disk format carries no time-modulation flag; it is switched on
/// whenever any slope coefficient is non-zero, which renders identically either way.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaussianField> {
    let bad = |m: String| Error::format("checkpoint", m);
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::format("checkpoint", "truncated header"))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    let count = word()? as usize;
    let degree = word()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if degree > 1 {
        return Err(bad(format!("sh_degree {degree} is above the supported maximum of 1")));
    }
    let k = ((degree + 1) * (degree + 1)) as usize;
    let expected = 16 + 4 * count * (17 + 6 * k);
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {count} primitives, found {}", bytes.len())));
    }
    let mut vals = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut next = || vals.next().expect("length checked");
    let mut quad = |n: usize| -> Vec<[f64; 4]> { (0..n).map(|_| [next(), next(), next(), next()]).collect() };
    let means = quad(count);
    let rot_left = quad(count);
    let rot_right = quad(count);
    let log_scales = quad(count);
    let opacity_logits: Vec<f64> = (0..count).map(|_| next()).collect();
    let mut coeffs = || -> Vec<[[f64; 3]; MAX_SH_COEFFS]> {
        (0..count)
            .map(|_| {
                let mut c = [[0.0; 3]; MAX_SH_COEFFS];
                for row in c.iter_mut().take(k) {
                    *row = [next(), next(), next()];
                }
                c
            })
            .collect()
    };
    let sh = coeffs();
    let sh_slope = coeffs();
    let time_modulation = sh_slope.iter().flatten().flatten().any(|v| *v != 0.0);
    Ok(GaussianField {
        model: ColorModel { degree, time_modulation },
        means,
        rot_left,
        rot_right,
        log_scales,
        opacity_logits,
        sh,
        sh_slope,
    })
}

pub fn write_checkpoint(path: &Path, field: &GaussianField) -> Result<()> {
    write_atomic(path, &encode_checkpoint(field))
}

pub fn read_checkpoint(path: &Path) -> Result<GaussianField> {
    decode_checkpoint(&read_file(path)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

/// Writes rows to a CSV file atomically.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    writeln!(buf, "{header}")?;
    for row in rows {
        writeln!(buf, "{row}")?;
    }
    write_atomic(path, &buf.into_inner().map_err(|e| e.into_error())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::test_support::{random_gaussian, rng};

    #[test]
    fn pfm_round_trip_and_row_order() {
        let map = ImageBuf::from_fn(3, 2, |x, y| if (x, y) == (1, 1) { f64::NAN } else { (x + 10 * y) as f64 + 0.5 });
        let bytes = encode_pfm(&map);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom image row
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 10.5);
        let back = decode_pfm(&bytes).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let (a, b) = (*map.get(x, y), *back.get(x, y));
                assert!(a == b || (a.is_nan() && b.is_nan()));
            }
        }
    }

    #[test]
    fn pfm_big_endian_and_colour_rejection() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(*decode_pfm(&bytes).unwrap().get(0, 0), 2.5);
        let mut colour = b"PF\n1 1\n-1.0\n".to_vec();
        colour.extend_from_slice(&[0; 12]);
        assert!(decode_pfm(&colour).is_err());
        assert!(decode_pfm(b"Pf\n4 4\n-1.0\n\x00\x00").is_err());
    }

    #[test]
    fn srgb_codes_round_trip() {
        for code in 0..=255u8 {
            assert_eq!(srgb_encode(srgb_decode(code)), code);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuf::from_fn(5, 4, |x, y| [quantize_srgb(x as f64 / 4.0), quantize_srgb(y as f64 / 3.0), srgb_decode(77)]);
        let path = dir.path().join("a.png");
        write_rgb_png(&path, &img).unwrap();
        assert_eq!(read_rgb_png(&path).unwrap(), img);
        let mask = ImageBuf::from_fn(5, 4, |x, y| (x + y) % 2 == 0);
        let mpath = dir.path().join("m.png");
        write_mask_png(&mpath, &mask).unwrap();
        assert_eq!(read_mask_png(&mpath).unwrap(), mask);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(3);
        for degree in [0, 1] {
            let model = ColorModel { degree, time_modulation: true };
            let mut field = GaussianField::from_gaussians(model, (0..5).map(|_| random_gaussian(&mut r)));
            // quantise to f32 so the round trip is exact
            let flat: Vec<f64> = field.flat_params().iter().map(|v| *v as f32 as f64).collect();
            field.set_flat_params(&flat);
            if degree == 0 {
                for s in field.sh.iter_mut().chain(field.sh_slope.iter_mut()) {
                    for row in s.iter_mut().skip(1) {
                        *row = [0.0; 3];
                    }
                }
            }
            let bytes = encode_checkpoint(&field);
            assert_eq!(&bytes[..4], b"GC4D");
            assert_eq!(bytes.len(), 16 + 4 * 5 * (17 + 6 * model.num_coeffs()));
            assert_eq!(decode_checkpoint(&bytes).unwrap(), field);
        }
        assert!(decode_checkpoint(b"GC4D\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud {
            points: vec![Vector3::new(0.5, -1.25, 3.0), Vector3::new(1.0, 2.0, 4.5)],
            colors: vec![[srgb_decode(10), srgb_decode(20), srgb_decode(30)], [1.0, 0.0, srgb_decode(128)]],
        };
        let path = dir.path().join("c.ply");
        write_ply(&path, &cloud).unwrap();
        assert_eq!(read_ply(&path).unwrap(), cloud);
    }
}
