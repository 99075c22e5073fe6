use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use super::{Dataset, MultiSpectralSample};
use crate::error::{Error, Result};
use crate::spectrum::Spectrum;

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_png16(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    let res = match c {
        3 => ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                to_u16(img[[0, y, x]]),
                to_u16(img[[1, y, x]]),
                to_u16(img[[2, y, x]]),
            ])
        })
        .save(path),
        1 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u16(img[[0, y as usize, x as usize]])])
        })
        .save(path),
        other => return Err(Error::Interface(format!("cannot export {other}-channel image"))),
    };
    res.map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Little-endian single-channel PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&map[[y, x]].to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Corruption(format!("{}: {msg}", path.display()));
    let mut lines = 0;
    let mut header_end = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            lines += 1;
            if lines == 3 {
                header_end = i + 1;
                break;
            }
        }
    }
    if lines < 3 {
        return Err(corrupt("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| corrupt("bad header"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("Pf") {
        return Err(corrupt("not a grayscale PFM"));
    }
    let mut num = || parts.next().ok_or_else(|| corrupt("missing header field"));
    let w: usize = num()?.parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = num()?.parse().map_err(|_| corrupt("bad height"))?;
    let scale: f32 = num()?.parse().map_err(|_| corrupt("bad scale"))?;
    let data = &bytes[header_end..];
    if data.len() != w * h * 4 {
        return Err(corrupt("payload size mismatch"));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / w, i % w);
        out[[h - 1 - row, x]] = v;
    }
    Ok(out)
}

fn export_sample(dir: &Path, sample: &MultiSpectralSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in Spectrum::ALL {
        let p = sample.plane(s);
        write_png16(&dir.join(format!("{s}.png")), &p.image)?;
        write_pfm(&dir.join(format!("depth_{s}.pfm")), &p.depth)?;
    }
    sample.rig.save(&dir.join("calibration.json"))
}

/// Writes one directory per sample plus `index.csv` under `root`.
pub fn export_dataset(root: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let index_path = root.join("index.csv");
    let mut index = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    writeln!(index, "sample_id,condition,seed").map_err(|e| Error::io(&index_path, e))?;
    for (i, entry) in data.entries().iter().enumerate() {
        let sample = data.get(i)?;
        export_sample(&root.join(format!("{:06}", entry.id)), &sample)?;
        writeln!(index, "{:06},{},{}", entry.id, entry.condition, entry.seed)
            .map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}
