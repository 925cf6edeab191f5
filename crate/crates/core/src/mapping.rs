//! Input smoothing ahead of the keyed hash.
//!
//! A raw hash decision flips on any single-bit perturbation, which lets a
//! querier probe for watermarked inputs by resubmitting near-duplicates. The
//! mask-and-bin mapping collapses each non-overlapping `q x q` tile to the
//! floor average and keeps only the top `r` bits, so all inputs inside the
//! same per-tile bins hash identically. Only the hash sees the mapped input;
//! the model backend always receives the raw bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashcore::{canonicalize, CanonicalInput, Dtype};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("bad mapping config: {0}")]
    BadConfig(String),
    #[error("not applicable to the identity mapping")]
    NotApplicable,
}

fn default_per_channel() -> bool {
    true
}

/// Which smoothing function the gateway hashes through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingConfig {
    /// Hash the raw canonical bytes.
    Identity,
    /// Tile-average then bin to `r` bits.
    MaskBin {
        /// Mask side length in pixels; must divide both spatial dims.
        q: u32,
        /// Output bit width, 1..=7.
        r: u8,
        /// Tile each channel of a `[C,H,W]` input separately; when false the
        /// channel dim is folded into height and tiled as one plane.
        #[serde(default = "default_per_channel")]
        per_channel: bool,
    },
}

impl MappingConfig {
    pub fn identity() -> Self {
        MappingConfig::Identity
    }

    pub fn mask_bin(q: u32, r: u8) -> Self {
        MappingConfig::MaskBin {
            q,
            r,
            per_channel: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, MappingConfig::Identity)
    }

    /// Geometry of a mask-bin input: (channels, height, width) after the
    /// per-channel flag is applied.
    fn plane_geometry(&self, shape: &[u32]) -> Result<(u32, u32, u32), MapError> {
        let (q, per_channel) = match self {
            MappingConfig::Identity => return Err(MapError::NotApplicable),
            MappingConfig::MaskBin { q, per_channel, .. } => (*q, *per_channel),
        };
        let (c, h, w) = match shape {
            [h, w] => (1, *h, *w),
            [c, h, w] if per_channel => (*c, *h, *w),
            [c, h, w] => (1, *c * *h, *w),
            other => {
                return Err(MapError::BadGeometry(format!(
                    "mask_bin expects [H,W] or [C,H,W], got {} dims",
                    other.len()
                )))
            }
        };
        if h % q != 0 || w % q != 0 {
            return Err(MapError::BadGeometry(format!(
                "q = {q} does not divide spatial dims {h}x{w}"
            )));
        }
        Ok((c, h, w))
    }

    /// Startup check against the model's declared input shape.
    pub fn validate_for_shape(&self, shape: &[u32]) -> Result<(), MapError> {
        match self {
            MappingConfig::Identity => Ok(()),
            MappingConfig::MaskBin { q, r, .. } => {
                if *q == 0 {
                    return Err(MapError::BadConfig("q must be >= 1".into()));
                }
                if !(1..=7).contains(r) {
                    return Err(MapError::BadConfig(format!("r = {r} outside [1,7]")));
                }
                self.plane_geometry(shape).map(|_| ())
            }
        }
    }
}

/// Applies the configured smoothing to a canonical input.
///
/// Identity returns the input unchanged. Mask-bin emits one u8 per tile:
/// `b = floor(tile_sum / q^2) >> (8 - r)`, shape `[C, H/q, W/q]` (or
/// `[H/q, W/q]` for 2-D inputs).
pub fn map_input(cfg: &MappingConfig, x: &CanonicalInput) -> Result<CanonicalInput, MapError> {
    let (q, r) = match cfg {
        MappingConfig::Identity => return Ok(x.clone()),
        MappingConfig::MaskBin { q, r, .. } => (*q, *r),
    };
    if q == 0 {
        return Err(MapError::BadConfig("q must be >= 1".into()));
    }
    if !(1..=7).contains(&r) {
        return Err(MapError::BadConfig(format!("r = {r} outside [1,7]")));
    }
    let (c, h, w) = cfg.plane_geometry(x.shape())?;
    let (oh, ow) = (h / q, w / q);
    let tile_area = (q as u64) * (q as u64);
    let shift = 8 - r;

    let bytes = x.bytes();
    let mut out = Vec::with_capacity((c * oh * ow) as usize);
    for ch in 0..c {
        let plane = &bytes[(ch * h * w) as usize..((ch + 1) * h * w) as usize];
        for ty in 0..oh {
            for tx in 0..ow {
                let mut sum: u64 = 0;
                for dy in 0..q {
                    let row = ((ty * q + dy) * w + tx * q) as usize;
                    for dx in 0..q as usize {
                        sum += plane[row + dx] as u64;
                    }
                }
                let a = sum / tile_area;
                out.push((a as u8) >> shift);
            }
        }
    }

    let out_shape: Vec<u32> = match (x.shape().len(), per_channel_flag(cfg)) {
        (2, _) | (3, false) => vec![oh, ow],
        (3, true) => vec![c, oh, ow],
        _ => unreachable!("rank validated by plane_geometry"),
    };
    canonicalize(Dtype::U8, &out_shape, out)
        .map_err(|e| MapError::BadGeometry(format!("internal shape error: {e}")))
}

fn per_channel_flag(cfg: &MappingConfig) -> bool {
    matches!(
        cfg,
        MappingConfig::MaskBin {
            per_channel: true,
            ..
        }
    )
}

/// Guaranteed invariance slack of a mask-bin mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PerturbationBound {
    pub q: u32,
    pub r: u8,
    /// Averaged-pixel levels per bin: `2^(8-r)`.
    pub bin_width: u32,
}

/// Reports the tolerance within which `map_input` provably cannot change:
/// a perturbation that keeps every tile's byte sum inside the same
/// `[a*q^2, (a+1)*q^2 - 1]` floor band and `a` inside the same `r`-bit bin
/// leaves the mapped output untouched.
pub fn perturbation_bound(cfg: &MappingConfig) -> Result<PerturbationBound, MapError> {
    match cfg {
        MappingConfig::Identity => Err(MapError::NotApplicable),
        MappingConfig::MaskBin { q, r, .. } => {
            if !(1..=7).contains(r) {
                return Err(MapError::BadConfig(format!("r = {r} outside [1,7]")));
            }
            Ok(PerturbationBound {
                q: *q,
                r: *r,
                bin_width: 1u32 << (8 - r),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashcore::{hmac_split, ModelKeySet, WatermarkRatio};

    fn input(shape: &[u32], bytes: Vec<u8>) -> CanonicalInput {
        canonicalize(Dtype::U8, shape, bytes).unwrap()
    }

    #[test]
    fn identity_returns_input_unchanged() {
        let cfg = MappingConfig::identity();
        let x = input(&[2, 2], vec![1, 2, 3, 4]);
        assert_eq!(map_input(&cfg, &x).unwrap(), x);
    }

    #[test]
    fn single_tile_arithmetic() {
        // a = floor(42/4) = 10, b = 10 >> 4 = 0
        let cfg = MappingConfig::mask_bin(2, 4);
        let y = map_input(&cfg, &input(&[2, 2], vec![10, 12, 9, 11])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.bytes(), &[0]);
    }

    #[test]
    fn bright_tile_survives_small_perturbation() {
        let cfg = MappingConfig::mask_bin(2, 4);
        // a = floor(804/4) = 201, b = 201 >> 4 = 12
        let base = map_input(&cfg, &input(&[2, 2], vec![200, 201, 200, 203])).unwrap();
        assert_eq!(base.bytes(), &[12]);
        for delta in -3i16..=3 {
            let px = (200i16 + delta) as u8;
            let y = map_input(&cfg, &input(&[2, 2], vec![px, 201, 200, 203])).unwrap();
            assert_eq!(y.bytes(), &[12], "delta {delta} crossed a bin");
        }
    }

    #[test]
    fn per_channel_tiling() {
        let cfg = MappingConfig::mask_bin(2, 4);
        let x = input(&[2, 2, 2], vec![100, 100, 100, 100, 220, 220, 220, 220]);
        let y = map_input(&cfg, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.bytes(), &[100 >> 4, 220 >> 4]);
    }

    #[test]
    fn folded_channel_tiling() {
        let cfg = MappingConfig::MaskBin {
            q: 2,
            r: 4,
            per_channel: false,
        };
        let x = input(&[2, 2, 2], vec![100, 100, 100, 100, 220, 220, 220, 220]);
        let y = map_input(&cfg, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.bytes(), &[100 >> 4, 220 >> 4]);
    }

    #[test]
    fn geometry_and_config_errors() {
        let x = input(&[4, 4], vec![0; 16]);
        assert!(matches!(
            map_input(&MappingConfig::mask_bin(3, 4), &x),
            Err(MapError::BadGeometry(_))
        ));
        assert!(matches!(
            map_input(&MappingConfig::mask_bin(2, 0), &x),
            Err(MapError::BadConfig(_))
        ));
        assert!(matches!(
            map_input(&MappingConfig::mask_bin(2, 8), &x),
            Err(MapError::BadConfig(_))
        ));
        assert!(MappingConfig::mask_bin(2, 4)
            .validate_for_shape(&[1, 28, 28])
            .is_ok());
        assert!(MappingConfig::mask_bin(3, 4)
            .validate_for_shape(&[1, 28, 28])
            .is_err());
    }

    #[test]
    fn bound_values() {
        assert_eq!(
            perturbation_bound(&MappingConfig::mask_bin(2, 4))
                .unwrap()
                .bin_width,
            16
        );
        assert_eq!(
            perturbation_bound(&MappingConfig::mask_bin(1, 7))
                .unwrap()
                .bin_width,
            2
        );
        assert_eq!(
            perturbation_bound(&MappingConfig::mask_bin(4, 3))
                .unwrap()
                .bin_width,
            32
        );
        assert_eq!(
            perturbation_bound(&MappingConfig::identity()).unwrap_err(),
            MapError::NotApplicable
        );
    }

    #[test]
    fn exhaustive_single_pixel_sweep_q4_r3() {
        // one 4x4 tile; push pixel 0 through every value and recompute the
        // expected bin with straight-line arithmetic
        let cfg = MappingConfig::mask_bin(4, 3);
        let mut base = vec![0u8; 16];
        let mut s = 0x9e3779b97f4a7c15u64;
        for px in base.iter_mut().skip(1) {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            *px = (s >> 56) as u8;
        }
        let rest: u64 = base.iter().skip(1).map(|&b| b as u64).sum();
        for v in 0u16..=255 {
            base[0] = v as u8;
            let y = map_input(&cfg, &input(&[4, 4], base.clone())).unwrap();
            let expected = (((rest + v as u64) / 16) as u8) >> 5;
            assert_eq!(y.bytes(), &[expected], "pixel value {v}");
        }
    }

    #[test]
    fn equal_bins_hash_identically() {
        let cfg = MappingConfig::mask_bin(2, 4);
        let keys = ModelKeySet::new(
            [7u8; 32],
            WatermarkRatio::parse("0.5").unwrap(),
            cfg.clone(),
        );
        // same tile sums up to bin slack, different raw bytes
        let a = input(&[2, 2], vec![100, 104, 96, 100]);
        let b = input(&[2, 2], vec![101, 103, 97, 99]);
        assert_ne!(a.bytes(), b.bytes());
        let (ma, mb) = (map_input(&cfg, &a).unwrap(), map_input(&cfg, &b).unwrap());
        assert_eq!(ma, mb);
        assert_eq!(hmac_split(&keys, &ma), hmac_split(&keys, &mb));
    }
}
