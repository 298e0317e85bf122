//! Frame container: a JSON sidecar header plus a raw little-endian payload
//! in range-major order (`<stem>.json` + `<stem>.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::frame::{FrameGeometry, RadarFrame};
use super::mask::LandMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// 32-bit float intensities.
    Intensity,
    /// 32-bit float detector scores in [0, 1].
    Scores,
    /// One byte per cell, 0 or 1.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: PayloadKind,
    pub shape: [usize; 2],
    pub range_res: f64,
    pub azimuth_res: f64,
    pub range_offset: f64,
    pub azimuth_offset: f64,
    pub timestamp_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<[usize; 2]>,
}

impl ContainerHeader {
    fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            n_range: self.shape[0],
            n_azimuth: self.shape[1],
            range_res: self.range_res,
            azimuth_res: self.azimuth_res,
            range_offset: self.range_offset,
            azimuth_offset: self.azimuth_offset,
        }
    }

    fn from_geometry(kind: PayloadKind, g: &FrameGeometry, timestamp_index: usize) -> Self {
        Self {
            kind,
            shape: [g.n_range, g.n_azimuth],
            range_res: g.range_res,
            azimuth_res: g.azimuth_res,
            range_offset: g.range_offset,
            azimuth_offset: g.azimuth_offset,
            timestamp_index,
            dilation: None,
        }
    }
}

pub fn header_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn write_header(stem: &Path, header: &ContainerHeader) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(header_path(stem), text)?;
    Ok(())
}

fn read_header(stem: &Path) -> Result<ContainerHeader> {
    let text = fs::read_to_string(header_path(stem))?;
    let header: ContainerHeader = serde_json::from_str(&text)?;
    header.geometry().validate()?;
    Ok(header)
}

fn write_f32(stem: &Path, values: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(payload_path(stem), bytes)?;
    Ok(())
}

fn read_f32(stem: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let bytes = fs::read(payload_path(stem))?;
    let n = shape.0 * shape.1;
    if bytes.len() != 4 * n {
        return Err(Error::InvalidInput(format!(
            "{}: payload has {} bytes, expected {}",
            payload_path(stem).display(),
            bytes.len(),
            4 * n
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec(shape, values).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn write_frame(stem: &Path, frame: &RadarFrame) -> Result<()> {
    write_header(stem, &ContainerHeader::from_geometry(PayloadKind::Intensity, &frame.geometry, frame.timestamp_index))?;
    write_f32(stem, &frame.intensities)
}

pub fn read_frame(stem: &Path) -> Result<RadarFrame> {
    let header = read_header(stem)?;
    if header.kind != PayloadKind::Intensity {
        return Err(Error::InvalidInput(format!("{}: not an intensity frame", stem.display())));
    }
    let g = header.geometry();
    let data = read_f32(stem, g.shape())?;
    RadarFrame::new(data, g, header.timestamp_index)
}

pub fn write_scores(stem: &Path, scores: &Array2<f64>, geometry: &FrameGeometry, timestamp_index: usize) -> Result<()> {
    write_header(stem, &ContainerHeader::from_geometry(PayloadKind::Scores, geometry, timestamp_index))?;
    write_f32(stem, scores)
}

pub fn write_mask(stem: &Path, mask: &LandMask, geometry: &FrameGeometry) -> Result<()> {
    if mask.mask.dim() != geometry.shape() {
        return Err(Error::ShapeMismatch { expected: geometry.shape(), actual: mask.mask.dim() });
    }
    let mut header = ContainerHeader::from_geometry(PayloadKind::Mask, geometry, 0);
    header.dilation = Some([mask.dilation_range_cells, mask.dilation_azimuth_cells]);
    write_header(stem, &header)?;
    let bytes: Vec<u8> = mask.mask.iter().map(|&b| b as u8).collect();
    fs::write(payload_path(stem), bytes)?;
    Ok(())
}

pub fn read_mask(stem: &Path) -> Result<(LandMask, FrameGeometry)> {
    let header = read_header(stem)?;
    if header.kind != PayloadKind::Mask {
        return Err(Error::InvalidInput(format!("{}: not a mask container", stem.display())));
    }
    let g = header.geometry();
    let bytes = fs::read(payload_path(stem))?;
    if bytes.len() != g.n_range * g.n_azimuth {
        return Err(Error::InvalidInput(format!("{}: truncated mask payload", stem.display())));
    }
    let mask = Array2::from_shape_vec(g.shape(), bytes.into_iter().map(|b| b != 0).collect())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let [dr, da] = header.dilation.unwrap_or([0, 0]);
    Ok((LandMask { mask, dilation_range_cells: dr, dilation_azimuth_cells: da }, g))
}

/// Frame stems (`frame_00000`, ...) in a directory, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_frame = path.extension().is_some_and(|e| e == "json")
            && path.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with("frame_"));
        if is_frame {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn frame_stem(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k:05}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = FrameGeometry {
            n_range: 3,
            n_azimuth: 2,
            range_res: 7.5,
            azimuth_res: 0.01,
            range_offset: 1000.0,
            azimuth_offset: -0.2,
        };
        let data = Array2::from_shape_vec((3, 2), vec![0.0, 1.5, 2.25, 1e-3, 7.0, 0.125]).unwrap();
        let f = RadarFrame::new(data, g, 4).unwrap();
        let stem = frame_stem(dir.path(), 4);
        write_frame(&stem, &f).unwrap();
        let back = read_frame(&stem).unwrap();
        assert_eq!(back.geometry, g);
        assert_eq!(back.timestamp_index, 4);
        for (a, b) in back.intensities.iter().zip(f.intensities.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(list_frames(dir.path()).unwrap(), vec![stem]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let g = FrameGeometry { n_range: 2, n_azimuth: 2, range_res: 1.0, azimuth_res: 0.1, range_offset: 10.0, azimuth_offset: 0.0 };
        let stem = frame_stem(dir.path(), 0);
        write_frame(&stem, &RadarFrame::zeros(g, 0)).unwrap();
        fs::write(payload_path(&stem), [0u8; 5]).unwrap();
        assert!(read_frame(&stem).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = FrameGeometry { n_range: 2, n_azimuth: 3, range_res: 1.0, azimuth_res: 0.1, range_offset: 10.0, azimuth_offset: 0.0 };
        let mask = LandMask {
            mask: Array2::from_shape_vec((2, 3), vec![true, false, false, false, true, true]).unwrap(),
            dilation_range_cells: 2,
            dilation_azimuth_cells: 1,
        };
        let stem = dir.path().join("mask");
        write_mask(&stem, &mask, &g).unwrap();
        let (back, g2) = read_mask(&stem).unwrap();
        assert_eq!(back, mask);
        assert_eq!(g2, g);
    }
}
