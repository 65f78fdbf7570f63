//! Instance-level feature-space augmentations and two-view generation.
//!
//! Every augmentation touches valid rows only; padded rows stay exactly zero.
//! Donor instances are always read from the input snapshot, never from rows
//! already modified in the same call.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::sampler::SampledBag;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub instance_mask: bool,
    pub mask_rate: f64,
    pub feature_replace: bool,
    pub feat_replace_frac: f64,
    pub instance_replace: bool,
    pub inst_replace_rate: f64,
    pub feature_noise: bool,
    pub noise_sigma: f64,
    pub feature_drop: bool,
    pub block_drop_frac: f64,
    pub feature_dropout: bool,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            instance_mask: true,
            mask_rate: 0.1,
            feature_replace: true,
            feat_replace_frac: 0.1,
            instance_replace: true,
            inst_replace_rate: 0.05,
            feature_noise: true,
            noise_sigma: 0.1,
            feature_drop: true,
            block_drop_frac: 0.1,
            feature_dropout: true,
            dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            instance_mask: false,
            feature_replace: false,
            instance_replace: false,
            feature_noise: false,
            feature_drop: false,
            feature_dropout: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("mask_rate", self.mask_rate),
            ("feat_replace_frac", self.feat_replace_frac),
            ("inst_replace_rate", self.inst_replace_rate),
            ("block_drop_frac", self.block_drop_frac),
            ("dropout_p", self.dropout_p),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("augment.{name} = {r} is outside [0, 1]")));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("augment.noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Array2<f32>,
    pub view2: Array2<f32>,
    pub valid_mask: Vec<bool>,
}

fn valid_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect()
}

fn pick_rows(valid: &[usize], rate: f64, rng: &mut Rng) -> Vec<usize> {
    let count = ((rate * valid.len() as f64).floor() as usize).min(valid.len());
    sample(rng, valid.len(), count)
        .into_iter()
        .map(|i| valid[i])
        .collect()
}

/// A uniformly chosen valid row different from `row`.
fn donor_for(row: usize, valid: &[usize], rng: &mut Rng) -> usize {
    loop {
        let d = valid[rng.random_range(0..valid.len())];
        if d != row {
            return d;
        }
    }
}

/// Zero ⌊rate·n_valid⌋ distinct valid instances.
pub fn instance_mask(x: &Array2<f32>, mask: &[bool], rate: f64, rng: &mut Rng) -> Array2<f32> {
    let mut out = x.clone();
    for row in pick_rows(&valid_rows(mask), rate, rng) {
        out.row_mut(row).fill(0.0);
    }
    out
}

/// For every valid instance, copy ⌊frac·d⌋ randomly chosen dims from another
/// valid instance. No-op with fewer than two valid instances.
pub fn instance_feature_replace(
    x: &Array2<f32>,
    mask: &[bool],
    frac: f64,
    rng: &mut Rng,
) -> Array2<f32> {
    let valid = valid_rows(mask);
    let d = x.ncols();
    let n_dims = ((frac * d as f64).floor() as usize).min(d);
    if valid.len() < 2 || n_dims == 0 {
        return x.clone();
    }
    let mut out = x.clone();
    for &row in &valid {
        let donor = donor_for(row, &valid, rng);
        for j in sample(rng, d, n_dims) {
            out[[row, j]] = x[[donor, j]];
        }
    }
    out
}

/// Overwrite ⌊rate·n_valid⌋ valid instances with a copy of another valid instance.
pub fn instance_replace(x: &Array2<f32>, mask: &[bool], rate: f64, rng: &mut Rng) -> Array2<f32> {
    let valid = valid_rows(mask);
    if valid.len() < 2 {
        return x.clone();
    }
    let mut out = x.clone();
    for row in pick_rows(&valid, rate, rng) {
        let donor = donor_for(row, &valid, rng);
        out.row_mut(row).assign(&x.row(donor));
    }
    out
}

pub fn instance_feature_noise(
    x: &Array2<f32>,
    mask: &[bool],
    sigma: f64,
    rng: &mut Rng,
) -> Array2<f32> {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    for row in valid_rows(mask) {
        for v in out.row_mut(row).iter_mut() {
            let eps: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 + sigma * eps) as f32;
        }
    }
    out
}

/// Zero a contiguous block of ⌊frac·d⌋ dims (uniform start) in every valid instance.
pub fn instance_feature_drop(
    x: &Array2<f32>,
    mask: &[bool],
    frac: f64,
    rng: &mut Rng,
) -> Array2<f32> {
    let d = x.ncols();
    let len = ((frac * d as f64).floor() as usize).min(d);
    let mut out = x.clone();
    if len == 0 {
        return out;
    }
    for row in valid_rows(mask) {
        let start = rng.random_range(0..=d - len);
        for j in start..start + len {
            out[[row, j]] = 0.0;
        }
    }
    out
}

/// Zero each element of each valid row independently with probability `p`.
/// No 1/(1−p) rescaling.
pub fn instance_feature_dropout(
    x: &Array2<f32>,
    mask: &[bool],
    p: f64,
    rng: &mut Rng,
) -> Array2<f32> {
    let mut out = x.clone();
    if p == 0.0 {
        return out;
    }
    for row in valid_rows(mask) {
        for v in out.row_mut(row).iter_mut() {
            if rng.random::<f64>() < p {
                *v = 0.0;
            }
        }
    }
    out
}

fn augment_once(x: &Array2<f32>, mask: &[bool], cfg: &AugmentConfig, rng: &mut Rng) -> Array2<f32> {
    let mut v = x.clone();
    if cfg.instance_mask {
        v = instance_mask(&v, mask, cfg.mask_rate, rng);
    }
    if cfg.feature_replace {
        v = instance_feature_replace(&v, mask, cfg.feat_replace_frac, rng);
    }
    if cfg.instance_replace {
        v = instance_replace(&v, mask, cfg.inst_replace_rate, rng);
    }
    if cfg.feature_noise {
        v = instance_feature_noise(&v, mask, cfg.noise_sigma, rng);
    }
    if cfg.feature_drop {
        v = instance_feature_drop(&v, mask, cfg.block_drop_frac, rng);
    }
    if cfg.feature_dropout {
        v = instance_feature_dropout(&v, mask, cfg.dropout_p, rng);
    }
    v
}

/// Apply the enabled chain twice with independent streams derived from
/// `(cfg.seed, view_index)`.
pub fn make_views(sampled: &SampledBag, cfg: &AugmentConfig) -> ViewPair {
    let mut views = (1..=2u64).map(|view| {
        let mut rng = rng::derived_rng(cfg.seed, &[view]);
        augment_once(&sampled.features, &sampled.valid_mask, cfg, &mut rng)
    });
    let view1 = views.next().unwrap_or_default();
    let view2 = views.next().unwrap_or_default();
    ViewPair {
        view1,
        view2,
        valid_mask: sampled.valid_mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng() -> crate::rng::Rng {
        rng::rng_from(11)
    }

    fn ramp(k: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((k, d), |(i, j)| 1.0 + (i * d + j) as f32)
    }

    fn zero_rows(x: &Array2<f32>) -> usize {
        x.outer_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count()
    }

    #[test]
    fn mask_rates() {
        let x = ramp(10, 4);
        let m = vec![true; 10];
        assert_eq!(instance_mask(&x, &m, 0.0, &mut rng()), x);
        assert_eq!(zero_rows(&instance_mask(&x, &m, 1.0, &mut rng())), 10);
        assert_eq!(zero_rows(&instance_mask(&x, &m, 0.25, &mut rng())), 2);
    }

    #[test]
    fn feature_replace_counts() {
        let x = ramp(5, 8);
        let m = vec![true; 5];
        assert_eq!(instance_feature_replace(&x, &m, 0.0, &mut rng()), x);
        let out = instance_feature_replace(&x, &m, 0.5, &mut rng());
        for i in 0..5 {
            let changed = (0..8).filter(|&j| out[[i, j]] != x[[i, j]]).count();
            assert_eq!(changed, 4, "row {i}");
            // every changed value comes from the same column of some other row
            for j in 0..8 {
                if out[[i, j]] != x[[i, j]] {
                    assert!((0..5).any(|r| r != i && x[[r, j]] == out[[i, j]]));
                }
            }
        }
        let single = vec![true, false, false, false, false];
        assert_eq!(instance_feature_replace(&x, &single, 0.5, &mut rng()), x);
    }

    #[test]
    fn instance_replace_overwrites_with_other_row() {
        let x = ndarray::array![[1.0f32, 2.0], [3.0, 4.0]];
        let m = vec![true, true];
        assert_eq!(instance_replace(&x, &m, 0.0, &mut rng()), x);
        for seed in 0..20 {
            let out = instance_replace(&x, &m, 0.5, &mut rng::rng_from(seed));
            let b = ndarray::array![[3.0f32, 4.0], [3.0, 4.0]];
            let a = ndarray::array![[1.0f32, 2.0], [1.0, 2.0]];
            assert!(out == a || out == b);
        }
    }

    #[test]
    fn padding_never_donates() {
        let mut x = ramp(6, 3);
        let m = vec![true, false, true, false, true, false];
        for (i, &v) in m.iter().enumerate() {
            if !v {
                x.row_mut(i).fill(0.0);
            }
        }
        let out = instance_replace(&x, &m, 1.0, &mut rng());
        for (i, &v) in m.iter().enumerate() {
            if v {
                assert!(out.row(i).iter().any(|&e| e != 0.0));
            }
        }
    }

    #[test]
    fn noise_identity_and_padding() {
        let x = ramp(4, 3);
        let m = vec![true, true, false, true];
        let mut xp = x.clone();
        xp.row_mut(2).fill(0.0);
        assert_eq!(instance_feature_noise(&xp, &m, 0.0, &mut rng()), xp);
        let out = instance_feature_noise(&xp, &m, 0.5, &mut rng());
        assert!(out.row(2).iter().all(|&v| v == 0.0));
        assert_ne!(out, xp);
    }

    #[test]
    fn noise_mean_is_centered() {
        // 10^6 elements, sigma = 1: |mean| < 3·sigma/1000
        let x = Array2::<f32>::zeros((1000, 1000));
        let m = vec![true; 1000];
        let out = instance_feature_noise(&x, &m, 1.0, &mut rng());
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!(mean.abs() < 3.0 / 1000.0, "mean {mean}");
    }

    #[test]
    fn block_drop_is_contiguous() {
        let x = ramp(6, 10);
        let m = vec![true; 6];
        assert_eq!(instance_feature_drop(&x, &m, 0.0, &mut rng()), x);
        let out = instance_feature_drop(&x, &m, 0.3, &mut rng());
        for row in out.outer_iter() {
            let zeros: Vec<usize> = (0..10).filter(|&j| row[j] == 0.0).collect();
            assert_eq!(zeros.len(), 3);
            assert_eq!(zeros[2] - zeros[0], 2);
        }
        assert_eq!(zero_rows(&instance_feature_drop(&x, &m, 1.0, &mut rng())), 6);
    }

    #[test]
    fn dropout_rates() {
        let x = ramp(5, 5);
        let m = vec![true; 5];
        assert_eq!(instance_feature_dropout(&x, &m, 0.0, &mut rng()), x);
        assert_eq!(zero_rows(&instance_feature_dropout(&x, &m, 1.0, &mut rng())), 5);
        let big = Array2::<f32>::ones((1000, 1000));
        let out = instance_feature_dropout(&big, &vec![true; 1000], 0.2, &mut rng());
        let frac = out.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((frac - 0.2).abs() < 0.01, "{frac}");
    }

    fn sampled(k: usize, d: usize, n_valid: usize) -> SampledBag {
        let mut f = ramp(k, d);
        let mask: Vec<bool> = (0..k).map(|i| i < n_valid).collect();
        for i in n_valid..k {
            f.row_mut(i).fill(0.0);
        }
        SampledBag {
            features: f,
            valid_mask: mask,
            source_indices: (0..k as i64).map(|i| if (i as usize) < n_valid { i } else { -1 }).collect(),
        }
    }

    #[test]
    fn disabled_chain_is_identity() {
        let s = sampled(8, 4, 5);
        let v = make_views(&s, &AugmentConfig::disabled());
        assert_eq!(v.view1, s.features);
        assert_eq!(v.view2, s.features);
        assert_eq!(v.valid_mask, s.valid_mask);
    }

    #[test]
    fn views_are_deterministic_and_seed_sensitive() {
        let s = sampled(8, 4, 6);
        let cfg = AugmentConfig { seed: 5, ..Default::default() };
        assert_eq!(make_views(&s, &cfg), make_views(&s, &cfg));
        let other = AugmentConfig { seed: 6, ..cfg.clone() };
        let (a, b) = (make_views(&s, &cfg), make_views(&s, &other));
        assert_ne!(a.view1, b.view1);
        assert_ne!(a.view1, a.view2);
    }

    #[test]
    fn view1_ignores_view2_stream() {
        // view 1 is produced from the stream tagged 1 alone
        let s = sampled(8, 4, 6);
        let cfg = AugmentConfig { seed: 9, ..Default::default() };
        let pair = make_views(&s, &cfg);
        let mut r1 = rng::derived_rng(9, &[1]);
        assert_eq!(pair.view1, augment_once(&s.features, &s.valid_mask, &cfg, &mut r1));
    }

    proptest! {
        #[test]
        fn mask_and_shape_preserved(
            k in 1usize..12, d in 1usize..9, valid_frac in 0.0f64..1.0, seed in any::<u64>(),
            mr in 0.0f64..=1.0, fr in 0.0f64..=1.0, ir in 0.0f64..=1.0,
            sg in 0.0f64..2.0, bd in 0.0f64..=1.0, dp in 0.0f64..=1.0,
        ) {
            let n_valid = ((k as f64) * valid_frac).ceil() as usize;
            let s = sampled(k, d, n_valid.min(k));
            let cfg = AugmentConfig {
                mask_rate: mr, feat_replace_frac: fr, inst_replace_rate: ir,
                noise_sigma: sg, block_drop_frac: bd, dropout_p: dp, seed,
                ..Default::default()
            };
            let v = make_views(&s, &cfg);
            prop_assert_eq!(v.view1.dim(), s.features.dim());
            prop_assert_eq!(v.view2.dim(), s.features.dim());
            for (i, &valid) in s.valid_mask.iter().enumerate() {
                if !valid {
                    prop_assert!(v.view1.row(i).iter().all(|&x| x == 0.0));
                    prop_assert!(v.view2.row(i).iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}
