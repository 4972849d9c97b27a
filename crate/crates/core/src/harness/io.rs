//! File formats: IDX datasets, binary PGM/PPM images, parameter checkpoints
//! and token files.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::TensorSet;

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;
const CHECKPOINT_MAGIC: &[u8] = b"GLPK1";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bounds-checked reader whose errors carry the byte offset.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(
                self.path,
                format!(
                    "truncated at byte offset {}: need {n} bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn idx_body(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut c = Cursor { bytes, pos: 0, path };
    let found = c.u32_be()?;
    if found != magic {
        return Err(format_err(path, format!("bad magic {found:#010x} at byte offset 0, expected {magic:#010x}")));
    }
    let dims = (0..rank).map(|_| c.u32_be().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = dims.iter().product();
    let data = c.take(count)?.to_vec();
    Ok((dims, data))
}

/// IDX image file as `[N, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let (dims, data) = idx_body(path, &read(path)?, IDX_IMAGES, 3)?;
    Tensor::new(
        vec![dims[0], 1, dims[1], dims[2]],
        data.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (_, data) = idx_body(path, &read(path)?, IDX_LABELS, 1)?;
    Ok(data.into_iter().map(usize::from).collect())
}

/// Images and labels of an IDX pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(format_err(images, format!("{} images but {} labels", x.shape()[0], y.len())));
    }
    Ok((x, y))
}

/// `round(v * 255)` with halves rounded up, after clamping to `[0, 1]`.
pub fn pixel_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Write a `[1, h, w]` or `[3, h, w]` tensor as binary PGM or PPM.
pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::shape("write_image", format!("expected [channels, h, w], got {:?}", t.shape())));
    };
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("write_image", format!("{c} channels; need 1 or 3"))),
    };
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.push(pixel_byte(d[ch * h * w + i]));
        }
    }
    write(path, &out)
}

/// Read a binary PGM or PPM into `[channels, h, w]` scaled by its maxval.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, format!("truncated header at byte offset {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err(path, format!("unsupported magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported")));
    }
    let need = c * h * w;
    if bytes.len() < pos + need {
        return Err(format_err(
            path,
            format!("truncated raster at byte offset {}: need {need} bytes", bytes.len().min(pos)),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = raster[i * c + ch] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Every `.pgm`/`.ppm` in `dir`, by file name. The label is the leading
/// digits of the name (`3_cat.ppm` is class 3), or 0.
pub fn load_image_dir(dir: &Path) -> Result<(Tensor, Vec<usize>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format_err(dir, "no .pgm or .ppm files"));
    }
    let mut shape = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let img = read_image(f)?;
        if *shape.get_or_insert_with(|| img.shape().to_vec()) != img.shape() {
            return Err(format_err(f, format!("shape {:?} differs from the first image", img.shape())));
        }
        data.extend_from_slice(img.data());
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let digits: String = stem.chars().take_while(char::is_ascii_digit).collect();
        labels.push(digits.parse().unwrap_or(0));
    }
    let mut full = vec![files.len()];
    full.extend(shape.expect("nonempty"));
    Ok((Tensor::new(full, data)?, labels))
}

/// Checkpoint layout: `GLPK1`, then per entry a u32 name length, the UTF-8
/// name, a u32 rank, u64 extents and the f64 values, all little-endian.
pub fn encode_tensors(set: &TensorSet) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in set.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<TensorSet> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(format_err(path, "bad magic at byte offset 0, expected GLPK1"));
    }
    let mut set = TensorSet::new();
    while !c.done() {
        let len = c.u32_le()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| format_err(path, format!("name at byte offset {at} is not UTF-8")))?
            .to_string();
        let rank = c.u32_le()? as usize;
        let shape = (0..rank).map(|_| c.u64_le().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| format_err(path, "extent overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if set.get(&name).is_some() {
            return Err(format_err(path, format!("duplicate entry `{name}`")));
        }
        set.insert(name, Tensor::new(shape, data)?);
    }
    Ok(set)
}

pub fn save_tensors(set: &TensorSet, path: &Path) -> Result<()> {
    write(path, &encode_tensors(set))
}

pub fn load_tensors(path: &Path) -> Result<TensorSet> {
    decode_tensors(&read(path)?, path)
}

/// Token file: one sentence per line as `label<TAB>id id id ..`; blank lines
/// and `#` lines are skipped.
pub fn load_tokens(path: &Path) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sentences = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || format_err(path, format!("line {}: expected `label<TAB>ids`", i + 1));
        let (label, ids) = line.split_once('\t').ok_or_else(bad)?;
        labels.push(label.trim().parse().map_err(|_| bad())?);
        sentences.push(
            ids.split_whitespace()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?,
        );
    }
    Ok((sentences, labels))
}
