//! Image and tensor files, and the run-directory manifest.
//!
//! Binary NetPBM (`P5` grey, `P6` RGB) at 8 or 16 bits is the bit-exact
//! image format; PNG is accepted for convenience. Pixel values map linearly
//! to `[0, 1]` through the file's maxval.
//!
//! Tensor files hold one f32 array:
//!
//! | bytes      | content                                |
//! |------------|----------------------------------------|
//! | 4          | magic `TGD1`                           |
//! | 1          | dtype tag, `1` = f32                   |
//! | 1          | rank `r`                               |
//! | 8 r        | dims, little-endian u64, outermost first |
//! | 4 prod     | row-major little-endian f32 payload    |

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Latent, Tensor};
use crate::transfer::{TransferFunction, TransferParams};

pub const TENSOR_MAGIC: &[u8; 4] = b"TGD1";
pub const DTYPE_F32: u8 = 1;
const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Sample depth for written images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursorish<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursorish<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn header_uint(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary PGM or PPM.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Latent> {
    let mut cur = Cursorish { bytes, pos: 0 };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(cur.err("missing NetPBM magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => {
            cur.pos = 1;
            return Err(cur.err("only binary P5 and P6 are supported"));
        }
    };
    cur.pos = 2;
    let width = cur.header_uint("width")? as usize;
    let height = cur.header_uint("height")? as usize;
    let maxval_at = cur.pos;
    let maxval = cur.header_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: "zero image dimension".into(),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval {maxval} outside 1..=65535"),
        });
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;
    let sample = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * sample;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated pixel data: {have} of {need} bytes"),
        });
    }
    let data = &bytes[cur.pos..cur.pos + need];
    let m = maxval as f64;
    let mut out = Tensor::zeros([channels, height, width]);
    for p in 0..width * height {
        for c in 0..channels {
            let k = p * channels + c;
            let v = if sample == 1 {
                data[k] as u32
            } else {
                u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as u32
            };
            if v > maxval {
                return Err(Error::Parse {
                    offset: cur.pos + k * sample,
                    msg: format!("sample {v} exceeds maxval {maxval}"),
                });
            }
            out.data_mut()[c * width * height + p] = (v as f64 / m) as f32;
        }
    }
    Ok(out)
}

fn quantize(img: &Latent, maxval: u32) -> Vec<u32> {
    let m = maxval as f64;
    let mut clamped = 0usize;
    let out = (0..img.height() * img.width())
        .flat_map(|p| (0..img.channels()).map(move |c| (p, c)))
        .map(|(p, c)| {
            let v = img.plane(c)[p] as f64;
            let q = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if q != v {
                clamped += 1;
            }
            (q * m).round() as u32
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} samples outside [0, 1] were clamped");
    }
    out
}

/// Encodes a 1-channel latent as PGM or a 3-channel latent as PPM.
pub fn encode_netpbm(img: &Latent, depth: BitDepth) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Codec(format!("NetPBM needs 1 or 3 channels, got {c}"))),
    };
    let maxval = depth.maxval();
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    for v in quantize(img, maxval) {
        match depth {
            BitDepth::Eight => out.push(v as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(v as u16).to_be_bytes()),
        }
    }
    Ok(out)
}

/// Decodes a PNG; grey images give one channel, colour images three (alpha is dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Latent> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
    let m = if sixteen { 65535.0 } else { 255.0 };
    let samples: Vec<u16> = match (img.color().has_color(), sixteen) {
        (false, _) => img.into_luma16().into_raw(),
        (true, _) => img.into_rgb16().into_raw(),
    };
    let channels = samples.len() / (w * h);
    // into_*16 widens 8-bit samples by 257
    let scale = if sixteen { 1.0 } else { 257.0 };
    let mut out = Tensor::zeros([channels, h, w]);
    for p in 0..w * h {
        for c in 0..channels {
            let v = samples[p * channels + c] as f64 / scale;
            out.data_mut()[c * w * h + p] = (v / m) as f32;
        }
    }
    Ok(out)
}

pub fn encode_png(img: &Latent, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let q = quantize(img, depth.maxval());
    let dynamic = match (img.channels(), depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, q.iter().map(|&v| v as u8).collect()).unwrap(),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, q.iter().map(|&v| v as u16).collect()).unwrap(),
        ),
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, q.iter().map(|&v| v as u8).collect()).unwrap(),
        ),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q.iter().map(|&v| v as u16).collect()).unwrap(),
        ),
        (c, _) => return Err(Error::Codec(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Reads a NetPBM or PNG file, chosen by content.
pub fn read_image(path: &Path) -> Result<Latent> {
    let bytes = read_file(path)?;
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes)
    } else {
        decode_netpbm(&bytes)
    }
}

/// Writes by extension: `.png`, or `.pgm` / `.ppm` / `.pnm` for NetPBM.
pub fn encode_image(img: &Latent, path: &Path, depth: BitDepth) -> Result<Vec<u8>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => encode_png(img, depth),
        "pgm" | "ppm" | "pnm" => encode_netpbm(img, depth),
        _ => Err(Error::Codec(format!("unknown image extension for {}", path.display()))),
    }
}

pub fn write_image(img: &Latent, path: &Path, depth: BitDepth) -> Result<()> {
    write_file(path, &encode_image(img, path, depth)?)
}

/// Serializes an f32 array of any rank.
pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Codec("tensor rank exceeds 255".into()));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::dims(dims, &[data.len()]));
    }
    let mut out = Vec::with_capacity(6 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_tensor`]: `(dims, data)`.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let perr = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.into(),
    };
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(perr(0, "missing TGD1 magic"));
    }
    if bytes.len() < 6 {
        return Err(perr(bytes.len(), "truncated header"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(perr(4, "unsupported dtype tag"));
    }
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| perr(bytes.len(), "truncated dims"))?;
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| perr(pos, "dimension too large"))?);
        pos += 8;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| perr(6, "element count overflows"))?;
    let need = n.checked_mul(4).ok_or_else(|| perr(6, "payload size overflows"))?;
    if bytes.len() - pos < need {
        return Err(perr(bytes.len(), "truncated payload"));
    }
    if bytes.len() - pos > need {
        return Err(perr(pos + need, "trailing bytes after payload"));
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn encode_latent(t: &Tensor) -> Vec<u8> {
    encode_tensor(&t.shape(), t.data()).expect("tensor shape matches its data")
}

pub fn decode_latent(bytes: &[u8]) -> Result<Latent> {
    let (dims, data) = decode_tensor(bytes)?;
    match dims[..] {
        [c, h, w] => Tensor::from_vec([c, h, w], data),
        _ => Err(Error::Parse {
            offset: 5,
            msg: format!("expected rank 3, found rank {}", dims.len()),
        }),
    }
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_file(path, &encode_latent(t))
}

pub fn read_tensor(path: &Path) -> Result<Latent> {
    decode_latent(&read_file(path)?)
}

/// `[W | b]` as a `C x (C + 1)` array.
pub fn encode_transfer_params(p: &TransferParams) -> Vec<u8> {
    let c = p.channels();
    let mut data = Vec::with_capacity(c * (c + 1));
    for o in 0..c {
        data.extend_from_slice(&p.weight[o * c..(o + 1) * c]);
        data.push(p.bias[o]);
    }
    encode_tensor(&[c, c + 1], &data).expect("augmented matrix is consistent")
}

pub fn decode_transfer_params(bytes: &[u8]) -> Result<TransferParams> {
    let (dims, data) = decode_tensor(bytes)?;
    let [c, c1] = dims[..] else {
        return Err(Error::Parse {
            offset: 5,
            msg: "expected a rank-2 [C, C+1] array".into(),
        });
    };
    if c1 != c + 1 {
        return Err(Error::Parse {
            offset: 6,
            msg: format!("expected [C, C+1], found [{c}, {c1}]"),
        });
    }
    let mut p = TransferParams::zeros(c);
    for o in 0..c {
        p.weight[o * c..(o + 1) * c].copy_from_slice(&data[o * c1..o * c1 + c]);
        p.bias[o] = data[o * c1 + c];
    }
    Ok(p)
}

/// Relative file name of the parameters for `(patch_id, t)`.
pub fn transfer_file_name(patch_id: usize, t: usize) -> String {
    format!("transfer/patch{patch_id:03}_t{t:03}.tgd")
}

/// Files of a run directory, recorded with their hashes as they are written.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|source| Error::File {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(RunDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.path(rel), bytes)?;
        self.artifacts.retain(|(p, _)| p != rel);
        self.artifacts.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_image(&mut self, rel: &str, img: &Latent, depth: BitDepth) -> Result<()> {
        let bytes = encode_image(img, Path::new(rel), depth)?;
        self.write_bytes(rel, &bytes)
    }

    pub fn write_tensor(&mut self, rel: &str, t: &Tensor) -> Result<()> {
        self.write_bytes(rel, &encode_latent(t))
    }

    pub fn write_transfer(&mut self, tf: &TransferFunction) -> Result<()> {
        for (t, p) in tf.active_steps() {
            self.write_bytes(&transfer_file_name(tf.patch_id(), t), &encode_transfer_params(p))?;
        }
        Ok(())
    }

    pub fn artifacts(&self) -> &[(String, String)] {
        &self.artifacts
    }

    /// Writes `manifest.tsv` (`sha256  path` per artifact, sorted by path)
    /// and returns its text.
    pub fn write_manifest(&self, seed: u64) -> Result<String> {
        let mut entries = self.artifacts.clone();
        entries.sort();
        let mut text = format!("# seed\t{seed}\nsha256\tpath\n");
        for (path, hash) in &entries {
            text.push_str(&format!("{hash}\t{path}\n"));
        }
        write_file(&self.path(MANIFEST_NAME), text.as_bytes())?;
        Ok(text)
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checks every manifest entry against the file on disk; returns mismatching paths.
pub fn verify_manifest(root: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(root.join(MANIFEST_NAME)).map_err(|source| Error::File {
        path: root.join(MANIFEST_NAME),
        source,
    })?;
    let mut bad = Vec::new();
    for line in text.lines().skip(2) {
        let Some((hash, path)) = line.split_once('\t') else {
            return Err(Error::Config(format!("malformed manifest line `{line}`")));
        };
        let actual = fs::read(root.join(path)).map(|b| sha256_hex(&b)).unwrap_or_default();
        if actual != hash {
            bad.push(path.to_string());
        }
    }
    Ok(bad)
}
