//! Volumetric intensity grids and their preparation pipeline.
//!
//! A [`Volume`] stores raw scalar intensities in [0, 1], row-major over
//! (z, y, x). Preparation zero-pads the smaller axes to a cube and rescales
//! to the requested side length with trilinear interpolation.
//!
//! On-disk format: three u32 dims (little-endian), a dtype byte (0 = f32),
//! then row-major f32 little-endian voxels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::volume(format!("dims must be positive, got {dims:?}")));
        }
        if voxels.len() != n {
            return Err(Error::volume(format!(
                "voxel count {} does not match dims {dims:?}",
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::volume("voxel values must be finite and within [0, 1]"));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn bit_eq(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && self
                .voxels
                .iter()
                .zip(other.voxels.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Zero-pad the smaller axes up to the largest dimension, then rescale to
/// `target` voxels per side with trilinear interpolation. Values are clamped
/// back to [0, 1].
pub fn prepare_volume(raw: &Volume, target: usize) -> Result<Volume> {
    if target == 0 {
        return Err(Error::invalid("prepare_volume target must be positive"));
    }
    let padded = pad_to_cube(raw);
    Ok(resize_cube(&padded, target))
}

fn pad_to_cube(v: &Volume) -> Volume {
    let side = v.dims.into_iter().max().expect("three dims");
    if v.dims == [side, side, side] {
        return v.clone();
    }
    let mut out = Volume::zeros([side, side, side]);
    for z in 0..v.dims[0] {
        for y in 0..v.dims[1] {
            let src = v.index(z, y, 0);
            let dst = out.index(z, y, 0);
            out.voxels[dst..dst + v.dims[2]].copy_from_slice(&v.voxels[src..src + v.dims[2]]);
        }
    }
    out
}

/// Half-pixel-centre trilinear resampling of a cubic volume. The identity
/// size maps each voxel onto itself exactly.
pub fn resize_cube(v: &Volume, target: usize) -> Volume {
    debug_assert!(v.is_cube(), "resize_cube expects a cubic volume");
    let side = v.dims[0];
    if side == target {
        let mut out = v.clone();
        for x in out.voxels.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
        return out;
    }
    let scale = side as f64 / target as f64;
    let mut out = Volume::zeros([target, target, target]);
    let coord = |o: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, c - lo as f64)
    };
    for z in 0..target {
        let (z0, z1, fz) = coord(z);
        for y in 0..target {
            let (y0, y1, fy) = coord(y);
            for x in 0..target {
                let (x0, x1, fx) = coord(x);
                let c000 = v.get(z0, y0, x0) as f64;
                let c001 = v.get(z0, y0, x1) as f64;
                let c010 = v.get(z0, y1, x0) as f64;
                let c011 = v.get(z0, y1, x1) as f64;
                let c100 = v.get(z1, y0, x0) as f64;
                let c101 = v.get(z1, y0, x1) as f64;
                let c110 = v.get(z1, y1, x0) as f64;
                let c111 = v.get(z1, y1, x1) as f64;
                let c00 = c000 * (1.0 - fx) + c001 * fx;
                let c01 = c010 * (1.0 - fx) + c011 * fx;
                let c10 = c100 * (1.0 - fx) + c101 * fx;
                let c11 = c110 * (1.0 - fx) + c111 * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                let val = (c0 * (1.0 - fz) + c1 * fz) as f32;
                let idx = out.index(z, y, x);
                out.voxels[idx] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + v.voxels.len() * 4);
    for d in v.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(0u8); // dtype: f32
    for &x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let buf = fs::read(path)?;
    if buf.len() < 13 {
        return Err(Error::volume(format!("{}: truncated header", path.display())));
    }
    let d = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]) as usize;
    let dims = [d(0), d(4), d(8)];
    if buf[12] != 0 {
        return Err(Error::volume(format!(
            "{}: unsupported dtype {}",
            path.display(),
            buf[12]
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    let payload = &buf[13..];
    if payload.len() != n * 4 {
        return Err(Error::volume(format!(
            "{}: payload of {} bytes does not match dims {dims:?}",
            path.display(),
            payload.len()
        )));
    }
    let voxels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, voxels).map_err(|e| Error::volume(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_preparation_is_exact() {
        let v = Volume::new(
            [2, 2, 2],
            vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1, 0.2, 0.3],
        )
        .unwrap();
        let p = prepare_volume(&v, 2).unwrap();
        assert!(p.bit_eq(&v));
    }

    #[test]
    fn constant_cube_rescales_to_same_constant() {
        let v = Volume::new([5, 5, 5], vec![0.42; 125]).unwrap();
        let p = prepare_volume(&v, 8).unwrap();
        assert_eq!(p.dims(), [8, 8, 8]);
        for &x in p.voxels() {
            assert!((x - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_extends_smaller_axes_with_zeros() {
        // 1x2x2 raw volume pads to 2x2x2 before rescale
        let v = Volume::new([1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let p = prepare_volume(&v, 2).unwrap();
        assert_eq!(p.dims(), [2, 2, 2]);
        assert_eq!(&p.voxels()[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&p.voxels()[4..8], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rectangular_scan_reaches_requested_cube() {
        // mirrors the 124x256x256 -> pad 256^3 -> scale 224^3 pipeline at
        // a smaller size: 31x64x64 -> 64^3 -> 56^3
        let dims = [31usize, 64, 64];
        let n = dims[0] * dims[1] * dims[2];
        let voxels: Vec<f32> = (0..n).map(|i| (i % 97) as f32 / 96.0).collect();
        let v = Volume::new(dims, voxels).unwrap();
        let p = prepare_volume(&v, 56).unwrap();
        assert_eq!(p.dims(), [56, 56, 56]);
        assert!(p.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_target_is_rejected() {
        let v = Volume::zeros([2, 2, 2]);
        assert!(prepare_volume(&v, 0).is_err());
    }

    #[test]
    fn out_of_range_voxels_rejected() {
        assert!(Volume::new([1, 1, 1], vec![1.5]).is_err());
        assert!(Volume::new([1, 1, 1], vec![-0.1]).is_err());
        assert!(Volume::new([1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32 / 23.0).collect()).unwrap();
        save_volume(&v, &path).unwrap();
        let r = load_volume(&path).unwrap();
        assert!(v.bit_eq(&r));
    }

    #[test]
    fn truncated_volume_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let v = Volume::new([2, 2, 2], vec![0.5; 8]).unwrap();
        save_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_volume(&path).is_err());
    }
}
