//! Frame and label files.
//!
//! Frames are read from binary portable graymaps/pixmaps (P5/P6, 8 or 16 bit)
//! normalized to `[0, 1]`, or from RTEN containers:
//!
//! ```text
//! "RTEN" | rank u32 | dims u32 × rank | f32 × prod(dims), little-endian
//! ```
//!
//! with rank 2 (`H×W`), 3 (`H×W×C`) or 4 (`T×H×W×C`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use mmdpcn::hierarchy::Frame;
use serde::{Deserialize, Serialize};

const RTEN_MAGIC: &[u8; 4] = b"RTEN";

fn from_image(img: DynamicImage) -> Result<Frame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        other => {
            let b = other.to_rgb8();
            (3, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    };
    Ok(Frame::new(h, w, channels, data)?)
}

pub fn read_pnm(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    from_image(img)
}

/// Write an 8-bit P5 (one channel) or P6 (three channels) file, clipping to
/// `[0, 1]`.
pub fn write_pnm(frame: &Frame, path: &Path) -> Result<()> {
    let (subtype, color) = match frame.channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        c => bail!("cannot write a {c}-channel frame as PGM/PPM"),
    };
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    PnmEncoder::new(file).with_subtype(subtype).write_image(
        &bytes,
        frame.width as u32,
        frame.height as u32,
        color,
    )?;
    Ok(())
}

/// Read every frame of an RTEN file.
pub fn read_rten(path: &Path) -> Result<Vec<Frame>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_rten(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn parse_rten(bytes: &[u8]) -> Result<Vec<Frame>> {
    ensure!(bytes.len() >= 8 && &bytes[..4] == RTEN_MAGIC, "not an RTEN file");
    let u32_at = |i: usize| -> Result<usize> {
        let s = bytes.get(i..i + 4).context("truncated RTEN header")?;
        Ok(u32::from_le_bytes(s.try_into()?) as usize)
    };
    let rank = u32_at(4)?;
    ensure!((2..=4).contains(&rank), "RTEN rank {rank} is not 2, 3 or 4");
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect::<Result<_>>()?;
    let (t, h, w, c) = match dims[..] {
        [h, w] => (1, h, w, 1),
        [h, w, c] => (1, h, w, c),
        [t, h, w, c] => (t, h, w, c),
        _ => unreachable!(),
    };
    let start = 8 + 4 * rank;
    let count = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .context("RTEN dimensions overflow")?;
    ensure!(
        bytes.len() == start + 4 * count,
        "RTEN payload has {} bytes, dims {:?} need {}",
        bytes.len() - start,
        dims,
        4 * count
    );
    let values: Vec<f64> = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let per = h * w * c;
    values
        .chunks(per.max(1))
        .take(t)
        .map(|chunk| Ok(Frame::new(h, w, c, chunk.to_vec())?))
        .collect()
}

/// Write frames of equal shape as one rank-4 RTEN file.
pub fn write_rten(frames: &[Frame], path: &Path) -> Result<()> {
    let first = frames.first().context("no frames to write")?;
    ensure!(
        frames
            .iter()
            .all(|f| (f.height, f.width, f.channels) == (first.height, first.width, first.channels)),
        "frames differ in shape"
    );
    let mut out = Vec::with_capacity(24 + 4 * frames.len() * first.data.len());
    out.extend_from_slice(RTEN_MAGIC);
    for v in [4, frames.len(), first.height, first.width, first.channels] {
        out.extend_from_slice(&u32::try_from(v)?.to_le_bytes());
    }
    for f in frames {
        for v in &f.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pgm" | "ppm" | "pnm" | "rten")
    )
}

/// Luminance of a three-channel frame.
pub fn to_grayscale(frame: &Frame) -> Frame {
    if frame.channels != 3 {
        return frame.clone();
    }
    let data = frame
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Frame {
        channels: 1,
        data,
        ..*frame
    }
}

/// Load a frame file or every frame file of a directory, in file-name
/// order. All frames must share one shape.
pub fn load_frames(path: &Path, grayscale: bool) -> Result<(Vec<Frame>, Vec<PathBuf>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && is_frame_file(p));
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    ensure!(!files.is_empty(), "no frame files in {}", path.display());
    let mut frames = Vec::new();
    for f in &files {
        let is_rten = f.extension().is_some_and(|e| e.eq_ignore_ascii_case("rten"));
        if is_rten {
            frames.extend(read_rten(f)?);
        } else {
            frames.push(read_pnm(f)?);
        }
    }
    if grayscale {
        frames = frames.iter().map(to_grayscale).collect();
    }
    let first = &frames[0];
    ensure!(
        frames
            .iter()
            .all(|f| (f.height, f.width, f.channels) == (first.height, first.width, first.channels)),
        "frames in {} differ in shape",
        path.display()
    );
    Ok((frames, files))
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    frame_index: usize,
    label: usize,
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (frame_index, &label) in labels.iter().enumerate() {
        w.serialize(LabelRow { frame_index, label })?;
    }
    w.flush()?;
    Ok(())
}

/// Read `frame_index,label` rows; indices must cover `0..n` exactly once.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<LabelRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|row| row.frame_index);
    for (i, row) in rows.iter().enumerate() {
        ensure!(row.frame_index == i, "labels file is missing frame index {i}");
    }
    Ok(rows.into_iter().map(|r| r.label).collect())
}

/// Writer for `metric,value,stddev` rows with round-trip float formatting.
pub struct MetricWriter {
    out: BufWriter<File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "metric,value,stddev")?;
        Ok(MetricWriter { out })
    }

    pub fn row(&mut self, metric: &str, value: f64, stddev: f64) -> Result<()> {
        writeln!(self.out, "{metric},{},{}", fmt_f64(value), fmt_f64(stddev))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 255.0).collect();
        let f = Frame::new(3, 4, 1, data).unwrap();
        let p = dir.path().join("a.pgm");
        write_pnm(&f, &p).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..2], b"P5");
        assert_eq!(read_pnm(&p).unwrap(), f);
    }

    #[test]
    fn ppm_and_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = dir.path().join("a.ppm");
        write_pnm(&f, &p).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..2], b"P6");
        let back = read_pnm(&p).unwrap();
        assert_eq!(back, f);
        let g = to_grayscale(&back);
        assert_eq!(g.channels, 1);
        assert!((g.data[0] - 0.299).abs() < 1e-12 && (g.data[1] - 0.114).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_pnm(&p).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn rten_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|t| Frame::new(2, 2, 1, vec![t as f64, 0.5, 0.25, 1.0]).unwrap())
            .collect();
        let p = dir.path().join("v.rten");
        write_rten(&frames, &p).unwrap();
        assert_eq!(read_rten(&p).unwrap(), frames);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        assert!(parse_rten(&bytes).is_err());
        assert!(parse_rten(b"NOPE\0\0\0\0").is_err());
        let mut rank2 = RTEN_MAGIC.to_vec();
        for v in [2u32, 1, 2] {
            rank2.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.5f32, 0.75] {
            rank2.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_rten(&rank2).unwrap(), vec![Frame::new(1, 2, 1, vec![0.5, 0.75]).unwrap()]);
    }

    #[test]
    fn directory_order_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.pgm", "a.pgm", "notes.txt"].iter().enumerate() {
            let p = dir.path().join(name);
            if name.ends_with(".pgm") {
                write_pnm(&Frame::new(1, 1, 1, vec![i as f64]).unwrap(), &p).unwrap();
            } else {
                fs::write(p, "x").unwrap();
            }
        }
        let (frames, files) = load_frames(dir.path(), false).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(frames[0].data, vec![1.0]);
        assert_eq!(frames[1].data, vec![0.0]);

        let lp = dir.path().join("labels.csv");
        write_labels(&[2, 0, 1], &lp).unwrap();
        assert_eq!(fs::read_to_string(&lp).unwrap(), "frame_index,label\n0,2\n1,0\n2,1\n");
        assert_eq!(read_labels(&lp).unwrap(), vec![2, 0, 1]);
        fs::write(&lp, "frame_index,label\n0,1\n2,1\n").unwrap();
        assert!(read_labels(&lp).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
