//! Georeferenced multi-band grids and the DMR1 container.
//!
//! DMR1 layout (little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 0..4         | magic `DMR1`                                         |
//! | 4..8         | header length `L` as `u32`                           |
//! | 8..8+L       | UTF-8 `key=value` lines                              |
//! | 8+L..        | `width*height*bands` `f32` samples, band-sequential  |
//!
//! Header keys are written in a fixed order: `width`, `height`, `bands`,
//! `band_names` (comma separated), `cell_size`, `origin_x`, `origin_y`.
//! NaN is the only nodata value and is always written as `0x7FC00000`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMR1";
pub const DEFAULT_CELL_SIZE: f64 = 30.0;
const CANONICAL_NAN_BITS: u32 = 0x7FC0_0000;

/// North-up grid of `f64` samples stored band-sequential, each band row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandRaster {
    width: usize,
    height: usize,
    band_names: Vec<String>,
    cell_size: f64,
    origin_x: f64,
    origin_y: f64,
    data: Vec<f64>,
}

impl MultiBandRaster {
    /// Builds a raster from band-sequential data.
    pub fn new(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        cell_size: f64,
        origin: (f64, f64),
        data: Vec<f64>,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell_size must be > 0, got {cell_size}")));
        }
        let expected = width * height * band_names.len();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{} = {expected}",
                data.len(),
                band_names.len()
            )));
        }
        for name in &band_names {
            if name.contains(',') || name.contains('\n') || name.contains('=') {
                return Err(Error::invalid(format!("band name {name:?} contains a reserved character")));
            }
        }
        Ok(Self {
            width,
            height,
            band_names,
            cell_size,
            origin_x: origin.0,
            origin_y: origin.1,
            data,
        })
    }

    /// A raster filled with `value`, default 30 m cells at origin (0, 0).
    pub fn filled(width: usize, height: usize, band_names: Vec<String>, value: f64) -> Self {
        let n = width * height * band_names.len();
        Self::new(width, height, band_names, DEFAULT_CELL_SIZE, (0.0, 0.0), vec![value; n])
            .expect("valid filled raster")
    }

    /// A raster with the same geometry as `self` but different bands.
    pub fn with_geometry_of(template: &MultiBandRaster, band_names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        Self::new(
            template.width,
            template.height,
            band_names,
            template.cell_size,
            (template.origin_x, template.origin_y),
            data,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_x, self.origin_y)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.cells();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.cells();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[band * self.cells() + row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, band: usize, row: usize, col: usize, value: f64) {
        let n = self.cells();
        self.data[band * n + row * self.width + col] = value;
    }

    /// All band values of one cell.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.bands()).map(|b| self.get(b, row, col)).collect()
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|n| n == name)
    }

    /// True when width, height, cell size and origin agree.
    pub fn same_geometry(&self, other: &MultiBandRaster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.cell_size == other.cell_size
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
    }

    pub fn check_geometry(&self, other: &MultiBandRaster, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: {}x{} @ {} ({}, {}) vs {}x{} @ {} ({}, {})",
                self.width,
                self.height,
                self.cell_size,
                self.origin_x,
                self.origin_y,
                other.width,
                other.height,
                other.cell_size,
                other.origin_x,
                other.origin_y
            )))
        }
    }

    /// Copies a rectangular sub-grid; the origin shifts accordingly.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::OutOfBounds(format!(
                "crop {height}x{width} at ({row0}, {col0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.bands());
        for b in 0..self.bands() {
            let band = self.band(b);
            for r in row0..row0 + height {
                data.extend_from_slice(&band[r * self.width + col0..r * self.width + col0 + width]);
            }
        }
        Self::new(
            width,
            height,
            self.band_names.clone(),
            self.cell_size,
            (
                self.origin_x + col0 as f64 * self.cell_size,
                self.origin_y - row0 as f64 * self.cell_size,
            ),
            data,
        )
    }

    /// Cell values of every band inside `window`.
    pub fn window_view(&self, window: &RasterWindow) -> Result<Vec<WindowCell>> {
        let (rows, cols) = window.bounds(self.height, self.width)?;
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            for c in cols.clone() {
                out.push(WindowCell {
                    row: r,
                    col: c,
                    values: self.pixel(r, c),
                });
            }
        }
        Ok(out)
    }
}

/// How a window treats cells that fall outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    Truncate,
    Reject,
}

/// Square window of `(2 * half_extent + 1)^2` cells centered on a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterWindow {
    pub center_row: usize,
    pub center_col: usize,
    pub half_extent: usize,
    pub edge_policy: EdgePolicy,
}

impl RasterWindow {
    pub fn new(center_row: usize, center_col: usize, half_extent: usize, edge_policy: EdgePolicy) -> Self {
        Self {
            center_row,
            center_col,
            half_extent,
            edge_policy,
        }
    }

    /// In-bounds row and column ranges of the window on a `height x width` grid.
    pub fn bounds(
        &self,
        height: usize,
        width: usize,
    ) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        if self.center_row >= height || self.center_col >= width {
            return Err(Error::OutOfBounds(format!(
                "center ({}, {}) outside {height}x{width}",
                self.center_row, self.center_col
            )));
        }
        let h = self.half_extent;
        let r0 = self.center_row.saturating_sub(h);
        let c0 = self.center_col.saturating_sub(h);
        let r1 = (self.center_row + h + 1).min(height);
        let c1 = (self.center_col + h + 1).min(width);
        if self.edge_policy == EdgePolicy::Reject
            && (self.center_row < h || self.center_col < h || self.center_row + h >= height || self.center_col + h >= width)
        {
            return Err(Error::OutOfBounds(format!(
                "window of half extent {h} at ({}, {}) leaves {height}x{width}",
                self.center_row, self.center_col
            )));
        }
        Ok((r0..r1, c0..c1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowCell {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

fn header_text(r: &MultiBandRaster) -> String {
    format!(
        "width={}\nheight={}\nbands={}\nband_names={}\ncell_size={}\norigin_x={}\norigin_y={}\n",
        r.width,
        r.height,
        r.bands(),
        r.band_names.join(","),
        r.cell_size,
        r.origin_x,
        r.origin_y
    )
}

/// Encodes a raster as DMR1 bytes.
pub fn encode(raster: &MultiBandRaster) -> Vec<u8> {
    let header = header_text(raster);
    let mut out = Vec::with_capacity(8 + header.len() + 4 * raster.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in &raster.data {
        let bits = if v.is_nan() { CANONICAL_NAN_BITS } else { (v as f32).to_bits() };
        out.extend_from_slice(&bits.to_le_bytes());
    }
    out
}

/// Decodes DMR1 bytes.
pub fn decode(bytes: &[u8]) -> Result<MultiBandRaster> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file truncated before magic"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"DMR1\"", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "file truncated inside header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header declares {header_len} bytes but file ends early"),
        ));
    }
    let header = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|e| Error::format(8 + e.valid_up_to() as u64, "header is not UTF-8"))?;

    let mut width = None;
    let mut height = None;
    let mut bands = None;
    let mut band_names: Option<Vec<String>> = None;
    let mut cell_size = None;
    let mut origin_x = None;
    let mut origin_y = None;
    let mut line_offset = 8u64;
    for line in header.split_inclusive('\n') {
        let offset = line_offset;
        line_offset += line.len() as u64;
        let line = line.trim_end_matches('\n');
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(offset, format!("header line {line:?} is not key=value")))?;
        let bad = |what: &str| Error::format(offset, format!("invalid {what} value {value:?}"));
        match key {
            "width" => width = Some(value.parse::<usize>().map_err(|_| bad("width"))?),
            "height" => height = Some(value.parse::<usize>().map_err(|_| bad("height"))?),
            "bands" => bands = Some(value.parse::<usize>().map_err(|_| bad("bands"))?),
            "band_names" => {
                band_names = Some(if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(str::to_owned).collect()
                })
            }
            "cell_size" => cell_size = Some(value.parse::<f64>().map_err(|_| bad("cell_size"))?),
            "origin_x" => origin_x = Some(value.parse::<f64>().map_err(|_| bad("origin_x"))?),
            "origin_y" => origin_y = Some(value.parse::<f64>().map_err(|_| bad("origin_y"))?),
            other => return Err(Error::format(offset, format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::format(8, format!("header is missing key {k:?}"));
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;
    let bands = bands.ok_or_else(|| missing("bands"))?;
    let band_names = band_names.ok_or_else(|| missing("band_names"))?;
    let cell_size = cell_size.ok_or_else(|| missing("cell_size"))?;
    let origin_x = origin_x.ok_or_else(|| missing("origin_x"))?;
    let origin_y = origin_y.ok_or_else(|| missing("origin_y"))?;
    if band_names.len() != bands {
        return Err(Error::format(
            8,
            format!("bands={bands} but {} band names listed", band_names.len()),
        ));
    }

    let payload_start = 8 + header_len;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bands))
        .ok_or_else(|| Error::format(8, "raster dimensions overflow"))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::format(8, "raster dimensions overflow"))?;
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(Error::format(
            (payload_start + actual.min(expected)) as u64,
            format!("payload holds {actual} bytes but header implies {expected}"),
        ));
    }
    let data = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    MultiBandRaster::new(width, height, band_names, cell_size, (origin_x, origin_y), data)
        .map_err(|e| Error::format(8, e.to_string()))
}

pub fn write_raster(raster: &MultiBandRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<MultiBandRaster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("b{i}")).collect()
    }

    #[test]
    fn single_cell_roundtrip() {
        let r = MultiBandRaster::filled(1, 1, names(1), 0.5);
        let back = decode(&encode(&r)).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.5);
        assert_eq!(back, r);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&MultiBandRaster::filled(2, 2, names(1), 1.0));
        bytes[0..4].copy_from_slice(b"XXXX");
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&MultiBandRaster::filled(3, 3, names(2), 1.0));
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Format { .. })));
    }

    #[test]
    fn header_length_past_eof() {
        let mut bytes = encode(&MultiBandRaster::filled(1, 1, names(1), 1.0));
        bytes[4..8].copy_from_slice(&10_000u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_written_as_canonical_quiet_nan() {
        let mut r = MultiBandRaster::filled(2, 1, names(1), 0.0);
        r.set(0, 0, 1, f64::from_bits(0x7FF8_0000_0000_0ABC));
        let bytes = encode(&r);
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), 0x7FC0_0000);
        assert!(decode(&bytes).unwrap().get(0, 0, 1).is_nan());
    }

    #[test]
    fn empty_raster_is_header_only() {
        let r = MultiBandRaster::new(0, 0, names(3), 30.0, (0.0, 0.0), vec![]).unwrap();
        let bytes = encode(&r);
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.cells(), 0);
        assert_eq!(back.bands(), 3);
    }

    #[test]
    fn identical_rasters_give_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..48 * 48 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = MultiBandRaster::new(48, 48, names(6), 30.0, (500.0, 6000.0), data).unwrap();
        let a = dir.path().join("a.dmr");
        let b = dir.path().join("b.dmr");
        write_raster(&r, &a).unwrap();
        write_raster(&r, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = read_raster(&a).unwrap();
        let as_f32: Vec<u32> = r.data().iter().map(|&v| (v as f32).to_bits()).collect();
        let read_bits: Vec<u32> = back.data().iter().map(|&v| (v as f32).to_bits()).collect();
        assert_eq!(as_f32, read_bits);
    }

    #[test]
    fn unwritable_path_errors() {
        let r = MultiBandRaster::filled(1, 1, names(1), 0.0);
        let err = write_raster(&r, "/nonexistent-dir/x/y.dmr").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn full_and_corner_windows() {
        let r = MultiBandRaster::filled(5, 5, names(2), 1.0);
        let full = r.window_view(&RasterWindow::new(2, 2, 2, EdgePolicy::Reject)).unwrap();
        assert_eq!(full.len(), 25);
        assert_eq!(full[0].values.len(), 2);
        let corner = r.window_view(&RasterWindow::new(0, 0, 2, EdgePolicy::Truncate)).unwrap();
        assert_eq!(corner.len(), 9);
        assert!(r.window_view(&RasterWindow::new(0, 0, 2, EdgePolicy::Reject)).is_err());
        assert!(r.window_view(&RasterWindow::new(5, 0, 1, EdgePolicy::Truncate)).is_err());
    }

    #[test]
    fn crop_shifts_origin() {
        let data: Vec<f64> = (0..20).map(f64::from).collect();
        let r = MultiBandRaster::new(5, 4, names(1), 30.0, (0.0, 120.0), data).unwrap();
        let c = r.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 9.0, 12.0, 13.0, 14.0]);
        assert_eq!(c.origin(), (60.0, 90.0));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_samples_and_nans(
            w in 0usize..7, h in 0usize..7, b in 1usize..4,
            seed in proptest::collection::vec(-3.0f32..3.0, 0..200),
            nan_every in 1usize..9,
        ) {
            let n = w * h * b;
            let data: Vec<f64> = (0..n)
                .map(|i| if i % nan_every == 0 { f64::NAN } else { seed.get(i % seed.len().max(1)).copied().unwrap_or(0.25) as f64 })
                .collect();
            let r = MultiBandRaster::new(w, h, names(b), 12.5, (-3.5, 7.25), data).unwrap();
            let back = decode(&encode(&r)).unwrap();
            prop_assert!(back.same_geometry(&r));
            prop_assert_eq!(back.band_names(), r.band_names());
            for (x, y) in r.data().iter().zip(back.data()) {
                prop_assert!((x.is_nan() && y.is_nan()) || x == y);
            }
        }

        #[test]
        fn truncate_window_count_matches_enumeration(
            h in 1usize..20, w in 1usize..20, half in 0usize..5, r in 0usize..20, c in 0usize..20,
        ) {
            let (r, c) = (r % h, c % w);
            let raster = MultiBandRaster::filled(w, h, names(1), 0.0);
            let cells = raster.window_view(&RasterWindow::new(r, c, half, EdgePolicy::Truncate)).unwrap();
            let mut expected = 0;
            let half = half as i64;
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                        expected += 1;
                    }
                }
            }
            prop_assert_eq!(cells.len(), expected);
        }
    }
}
