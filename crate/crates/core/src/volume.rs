//! Volume container and bit-exact persistence.
//!
//! A volume is a dense little-endian f32 grid in row-major order with the
//! depth axis outermost, plus per-axis voxel spacing. On disk it is a pair of
//! files sharing one stem: `<stem>.volhdr` (human-readable header with a
//! CRC32 of the payload) and `<stem>.volraw` (the raw samples). Save/load
//! round-trips are bit-exact; any payload tamper is caught by length or
//! checksum.
//!
//! Resampling is corner-aligned trilinear: output index `i` maps to input
//! coordinate `i * (n_in - 1) / (n_out - 1)`, so grid corners coincide and
//! resampling to the same shape is the identity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER_EXT: &str = "volhdr";
pub const PAYLOAD_EXT: &str = "volraw";
const DTYPE_TAG: &str = "f32le";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, validating shape/data agreement and finiteness.
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "volume shape must be positive, got {shape:?}"
            )));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::validation(format!(
                "volume data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                expected
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::validation(format!(
                "voxel spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "volume contains non-finite value at linear index {i}"
            )));
        }
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Volume::new(shape, spacing, vec![0.0; shape[0] * shape[1] * shape[2]])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    /// Trilinear sample at a fractional coordinate; `None` outside the grid.
    /// Interpolation runs in f64 to keep weights exact at lattice points.
    pub fn sample(&self, coord: [f64; 3]) -> Option<f64> {
        let [n0, n1, n2] = self.shape;
        for (c, &n) in coord.iter().zip(self.shape.iter()) {
            if !c.is_finite() || *c < 0.0 || *c > (n - 1) as f64 {
                return None;
            }
        }
        let lo = |c: f64, n: usize| -> (usize, usize, f64) {
            let i0 = (c.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, c - i0 as f64)
        };
        let (d0, d1, fd) = lo(coord[0], n0);
        let (h0, h1, fh) = lo(coord[1], n1);
        let (w0, w1, fw) = lo(coord[2], n2);
        let at = |d: usize, h: usize, w: usize| self.data[(d * n1 + h) * n2 + w] as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
        let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
        let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
        let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
        let c0 = lerp(c00, c01, fh);
        let c1 = lerp(c10, c11, fh);
        Some(lerp(c0, c1, fd))
    }
}

/// Corner-aligned trilinear resample to `target` shape. Every target axis
/// needs at least 2 samples so both corners are representable.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&n| n < 2) {
        return Err(Error::validation(format!(
            "resample target must have >= 2 samples per axis, got {target:?}"
        )));
    }
    let src = v.shape();
    let scale = |axis: usize| -> f64 {
        if target[axis] == 1 {
            0.0
        } else {
            (src[axis] as f64 - 1.0) / (target[axis] as f64 - 1.0)
        }
    };
    let (s0, s1, s2) = (scale(0), scale(1), scale(2));
    let mut out = Vec::with_capacity(target[0] * target[1] * target[2]);
    for d in 0..target[0] {
        let cd = d as f64 * s0;
        for h in 0..target[1] {
            let ch = h as f64 * s1;
            for w in 0..target[2] {
                let cw = w as f64 * s2;
                // Coordinates are in range by construction.
                let val = v.sample([cd, ch, cw]).unwrap_or(0.0);
                out.push(val as f32);
            }
        }
    }
    let spacing = [
        v.spacing[0] * s0,
        v.spacing[1] * s1,
        v.spacing[2] * s2,
    ];
    // Degenerate axes keep the source spacing rather than zero.
    let spacing = [
        if spacing[0] > 0.0 { spacing[0] } else { v.spacing[0] },
        if spacing[1] > 0.0 { spacing[1] } else { v.spacing[1] },
        if spacing[2] > 0.0 { spacing[2] } else { v.spacing[2] },
    ];
    Volume::new(target, spacing, out)
}

/// Percentile with linear interpolation between order statistics
/// (rank = q/100 * (n-1)); `sorted` must be ascending and non-empty.
fn percentile_sorted(sorted: &[f32], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Clip to the [1st, 99th] percentile window, then min-max scale to [0, 1].
/// A volume with no intensity range (constant, or a degenerate percentile
/// window) maps to a uniform 0.5.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let mut sorted = v.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, 1.0);
    let hi = percentile_sorted(&sorted, 99.0);
    let range = hi - lo;
    let out: Vec<f32> = if range > 0.0 {
        v.data()
            .iter()
            .map(|&x| {
                let clipped = (x as f64).clamp(lo, hi);
                ((clipped - lo) / range) as f32
            })
            .collect()
    } else {
        vec![0.5; v.data().len()]
    };
    Volume::new(v.shape(), v.spacing(), out)
}

/// Resolve the header/payload paths for a volume stem. Accepts either the
/// bare stem or a path carrying one of the two extensions.
fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some(HEADER_EXT) | Some(PAYLOAD_EXT) => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (
        stem.with_extension(HEADER_EXT),
        stem.with_extension(PAYLOAD_EXT),
    )
}

fn payload_bytes(data: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Write `<stem>.volhdr` + `<stem>.volraw`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (hdr_path, raw_path) = volume_paths(path.as_ref());
    let bytes = payload_bytes(v.data());
    let crc = crc32fast::hash(&bytes);

    let mut header = String::new();
    let _ = writeln!(header, "volfmt = 1");
    let _ = writeln!(
        header,
        "shape = {} {} {}",
        v.shape[0], v.shape[1], v.shape[2]
    );
    let _ = writeln!(
        header,
        "spacing = {} {} {}",
        v.spacing[0], v.spacing[1], v.spacing[2]
    );
    let _ = writeln!(header, "dtype = {DTYPE_TAG}");
    let _ = writeln!(header, "crc32 = {crc:#010x}");

    std::fs::write(&hdr_path, header).map_err(|e| Error::io(&hdr_path, e))?;
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    crc32: u32,
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut shape = None;
    let mut spacing = None;
    let mut crc32 = None;
    let mut volfmt = None;
    let mut dtype = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(path, format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "volfmt" => {
                volfmt = Some(value.parse::<u32>().map_err(|_| {
                    Error::format(path, format!("bad volfmt value {value:?}"))
                })?);
            }
            "shape" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::format(path, format!("bad shape token {t:?}")))
                    })
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(Error::format(
                        path,
                        format!("shape needs 3 dims, got {}", dims.len()),
                    ));
                }
                shape = Some([dims[0], dims[1], dims[2]]);
            }
            "spacing" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::format(path, format!("bad spacing token {t:?}")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != 3 {
                    return Err(Error::format(
                        path,
                        format!("spacing needs 3 values, got {}", vals.len()),
                    ));
                }
                spacing = Some([vals[0], vals[1], vals[2]]);
            }
            "dtype" => dtype = Some(value.to_string()),
            "crc32" => {
                let digits = value.trim_start_matches("0x");
                crc32 = Some(u32::from_str_radix(digits, 16).map_err(|_| {
                    Error::format(path, format!("bad crc32 value {value:?}"))
                })?);
            }
            other => {
                return Err(Error::format(path, format!("unknown header key {other:?}")));
            }
        }
    }
    match volfmt {
        Some(1) => {}
        Some(v) => return Err(Error::format(path, format!("unsupported volfmt {v}"))),
        None => return Err(Error::format(path, "missing volfmt")),
    }
    match dtype.as_deref() {
        Some(DTYPE_TAG) => {}
        Some(other) => {
            return Err(Error::format(path, format!("unsupported dtype {other:?}")));
        }
        None => return Err(Error::format(path, "missing dtype")),
    }
    Ok(Header {
        shape: shape.ok_or_else(|| Error::format(path, "missing shape"))?,
        spacing: spacing.ok_or_else(|| Error::format(path, "missing spacing"))?,
        crc32: crc32.ok_or_else(|| Error::format(path, "missing crc32"))?,
    })
}

/// Load a volume pair written by [`save_volume`]. Length and checksum
/// mismatches are reported as corruption, naming the offending file.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (hdr_path, raw_path) = volume_paths(path.as_ref());
    let text = std::fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = parse_header(&hdr_path, &text)?;

    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected_len = header.shape[0] * header.shape[1] * header.shape[2] * 4;
    if bytes.len() != expected_len {
        return Err(Error::corrupt(
            &raw_path,
            format!(
                "payload is {} bytes, header shape {:?} requires {}",
                bytes.len(),
                header.shape,
                expected_len
            ),
        ));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != header.crc32 {
        return Err(Error::corrupt(
            &raw_path,
            format!(
                "checksum mismatch: header {:#010x}, payload {:#010x}",
                header.crc32, crc
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::corrupt(
            &raw_path,
            format!("non-finite sample at voxel index {i}"),
        ));
    }
    Volume::new(header.shape, header.spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n = shape[0] * shape[1] * shape[2];
        let data: Vec<f32> = (0..n).map(|i| i as f32 * 0.25 - 3.0).collect();
        Volume::new(shape, [1.0, 1.0, 1.0], data).unwrap()
    }

    #[test]
    fn new_rejects_bad_inputs() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let v = ramp([3, 4, 5]);
        let stem = dir.path().join("vol");
        save_volume(&v, &stem).unwrap();
        let loaded = load_volume(dir.path().join("vol.volhdr")).unwrap();
        assert_eq!(loaded.shape(), v.shape());
        assert_eq!(loaded.spacing(), v.spacing());
        // Bitwise comparison, not approximate.
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = loaded.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_is_readable_text() {
        let dir = tempdir().unwrap();
        let v = ramp([2, 3, 4]);
        save_volume(&v, dir.path().join("t")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.volhdr")).unwrap();
        assert!(text.contains("shape = 2 3 4"));
        assert!(text.contains("dtype = f32le"));
        assert!(text.contains("crc32 = 0x"));
    }

    #[test]
    fn payload_size_matches_96_cube() {
        // 96^3 volumes occupy exactly 3,538,944 payload bytes.
        let v = Volume::zeros([96, 96, 96], [1.0; 3]).unwrap();
        assert_eq!(payload_bytes(v.data()).len(), 3_538_944);
    }

    #[test]
    fn flipped_payload_byte_is_reported_as_corrupt() {
        let dir = tempdir().unwrap();
        let v = ramp([2, 2, 2]);
        let stem = dir.path().join("c");
        save_volume(&v, &stem).unwrap();
        let raw = dir.path().join("c.volraw");
        let mut bytes = std::fs::read(&raw).unwrap();
        bytes[5] ^= 0x40;
        std::fs::write(&raw, bytes).unwrap();
        let err = load_volume(&stem).unwrap_err();
        match err {
            Error::Corrupt { path, reason } => {
                assert!(path.ends_with("c.volraw"));
                assert!(reason.contains("checksum"));
            }
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported_as_corrupt() {
        let dir = tempdir().unwrap();
        let v = ramp([2, 2, 2]);
        let stem = dir.path().join("t");
        save_volume(&v, &stem).unwrap();
        let raw = dir.path().join("t.volraw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_volume(&stem).unwrap_err();
        match err {
            Error::Corrupt { reason, .. } => assert!(reason.contains("bytes")),
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[test]
    fn header_tamper_is_reported() {
        let dir = tempdir().unwrap();
        let v = ramp([2, 2, 2]);
        let stem = dir.path().join("h");
        save_volume(&v, &stem).unwrap();
        let hdr = dir.path().join("h.volhdr");
        let text = std::fs::read_to_string(&hdr).unwrap();
        std::fs::write(&hdr, text.replace("f32le", "f64le")).unwrap();
        assert!(matches!(
            load_volume(&stem).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn resample_same_shape_is_identity() {
        let v = ramp([4, 5, 6]);
        let out = resample_trilinear(&v, [4, 5, 6]).unwrap();
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = out.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn resample_corner_cube_matches_hand_values() {
        // Corners valued 0..7 as v(d,h,w) = 4d + 2h + w. The trilinear
        // interpolant of that field is exactly 4x + 2y + z, so the 3^3
        // output is 2i + j + 0.5k; the center voxel is 3.5.
        let v = Volume::new(
            [2, 2, 2],
            [1.0; 3],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        )
        .unwrap();
        let out = resample_trilinear(&v, [3, 3, 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let expected = 2.0 * i as f32 + j as f32 + 0.5 * k as f32;
                    assert_eq!(out.get(i, j, k), expected, "at ({i},{j},{k})");
                }
            }
        }
        assert_eq!(out.get(1, 1, 1), 3.5);
    }

    #[test]
    fn resample_rejects_degenerate_target() {
        let v = ramp([4, 4, 4]);
        assert!(resample_trilinear(&v, [1, 4, 4]).is_err());
        assert!(resample_trilinear(&v, [4, 0, 4]).is_err());
    }

    #[test]
    fn normalize_constant_volume_is_half() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![3.7; 8]).unwrap();
        let out = normalize_intensity(&v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn normalize_clips_outlier_to_one() {
        // 1000 values in [0, 1) plus one extreme outlier; after percentile
        // clipping the outlier must sit exactly at 1.0 and everything stays
        // inside [0, 1].
        let mut data: Vec<f32> = (0..1000).map(|i| i as f32 / 1000.0).collect();
        data.push(1000.0);
        data.extend(std::iter::repeat(0.25).take(7));
        let n = data.len();
        assert_eq!(n, 1008);
        let v = Volume::new([12, 12, 7], [1.0; 3], data).unwrap();
        let out = normalize_intensity(&v).unwrap();
        let idx = 1000;
        assert_eq!(out.data()[idx], 1.0);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn normalize_matches_hand_percentile_math() {
        // sorted = [10, 20, 30, 40]: p1 rank 0.03 -> 10.3, p99 rank 2.97
        // -> 39.7. 20 maps to (20 - 10.3) / 29.4.
        let v = Volume::new([1, 2, 2], [1.0; 3], vec![30.0, 10.0, 40.0, 20.0]).unwrap();
        let out = normalize_intensity(&v).unwrap();
        let lo = 10.3f64;
        let hi = 39.7f64;
        let expect = |x: f64| (((x.clamp(lo, hi)) - lo) / (hi - lo)) as f32;
        assert!((out.data()[0] - expect(30.0)).abs() < 1e-6);
        assert!((out.data()[1] - expect(10.0)).abs() < 1e-6);
        assert_eq!(out.data()[2], 1.0);
        assert!((out.data()[3] - expect(20.0)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn normalize_stays_in_unit_range(
            values in proptest::collection::vec(-1e6f32..1e6f32, 8..64)
        ) {
            let mut data = values;
            data.truncate(data.len() / 8 * 8);
            prop_assume!(data.len() >= 8);
            let shape = [data.len() / 8, 2, 4];
            let v = Volume::new(shape, [1.0; 3], data).unwrap();
            let out = normalize_intensity(&v).unwrap();
            prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn resample_preserves_value_bounds(
            d in 2usize..5, h in 2usize..5, w in 2usize..5,
            td in 2usize..7, th in 2usize..7, tw in 2usize..7,
            seedval in 0f32..1f32
        ) {
            let n = d * h * w;
            let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seedval) % 1.0).collect();
            let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = Volume::new([d, h, w], [1.0; 3], data).unwrap();
            let out = resample_trilinear(&v, [td, th, tw]).unwrap();
            prop_assert_eq!(out.shape(), [td, th, tw]);
            // Trilinear interpolation is a convex combination.
            prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-4 && x <= hi + 1e-4));
        }
    }
}
