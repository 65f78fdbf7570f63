//! Uniform spatial sampling of a bag onto a G×G grid.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bag_store::FeatureBag;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    #[serde(rename = "G")]
    pub grid: usize,
    #[serde(rename = "K")]
    pub max_instances: usize,
    pub seed: u64,
    #[serde(rename = "pad_to_K")]
    pub pad_to_k: bool,
    /// When false, draw up to K rows uniformly at random, ignoring the grid.
    pub grid_sampling: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            max_instances: 1024,
            seed: 0,
            pad_to_k: false,
            grid_sampling: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.max_instances == 0 {
            return Err(Error::Config("sampler.G and sampler.K must be >= 1".into()));
        }
        Ok(())
    }
}

/// A fixed-length (or capped) bag with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBag {
    pub features: Array2<f32>,
    pub valid_mask: Vec<bool>,
    /// Original row index per kept row; −1 marks padding.
    pub source_indices: Vec<i64>,
}

impl SampledBag {
    /// Wrap an unpadded matrix; every row is valid.
    pub fn from_features(features: Array2<f32>) -> Self {
        let n = features.nrows();
        Self {
            features,
            valid_mask: vec![true; n],
            source_indices: (0..n as i64).collect(),
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }
}

/// Per-axis min-max scaling into the unit square; a constant axis maps to 0.
pub fn normalize_coords(coords: &Array2<f32>) -> Result<Array2<f64>> {
    if coords.nrows() == 0 || coords.ncols() != 2 {
        return Err(Error::InvalidArgument(format!(
            "coords must be N×2 with N >= 1, got {}×{}",
            coords.nrows(),
            coords.ncols()
        )));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    let mut out = coords.mapv(f64::from);
    for mut col in out.axis_iter_mut(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        col.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
    Ok(out)
}

/// Flattened cell index `row·G + col` per point, where the first coordinate
/// selects the row and the second the column.
pub fn grid_assign(unit_coords: &Array2<f64>, grid: usize) -> Vec<usize> {
    let cell = |u: f64| ((u * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    unit_coords
        .outer_iter()
        .map(|p| cell(p[0]) * grid + cell(p[1]))
        .collect()
}

/// Round-robin over occupied grid cells, one patch per cell per round, until
/// `K` patches are drawn or every cell is exhausted. Optionally zero-pads to K,
/// then applies one seeded permutation to rows, mask and indices jointly.
pub fn uniform_sample(bag: &FeatureBag, cfg: &SamplerConfig) -> Result<SampledBag> {
    cfg.validate()?;
    let n = bag.n_instances();
    if n == 0 {
        return Err(Error::EmptyAfterFilter(bag.slide_id().to_string()));
    }
    let mut rng = rng::rng_from(cfg.seed);
    let k = cfg.max_instances;

    let picked: Vec<usize> = if cfg.grid_sampling {
        let unit = normalize_coords(bag.coords())?;
        let cells = grid_assign(&unit, cfg.grid);
        let mut by_cell: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (row, &c) in cells.iter().enumerate() {
            by_cell.entry(c).or_default().push(row);
        }
        let mut queues: Vec<Vec<usize>> = by_cell.into_values().collect();
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        let mut picked = Vec::with_capacity(k.min(n));
        let mut order: Vec<usize> = (0..queues.len()).collect();
        'rounds: while picked.len() < k {
            order.retain(|&c| !queues[c].is_empty());
            if order.is_empty() {
                break;
            }
            order.shuffle(&mut rng);
            for &c in &order {
                if let Some(row) = queues[c].pop() {
                    picked.push(row);
                    if picked.len() == k {
                        break 'rounds;
                    }
                }
            }
        }
        picked
    } else {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        rows.truncate(k);
        rows
    };

    let d = bag.dim();
    let len = if cfg.pad_to_k { k } else { picked.len() };
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);

    let mut features = Array2::<f32>::zeros((len, d));
    let mut valid_mask = vec![false; len];
    let mut source_indices = vec![-1i64; len];
    for (slot, &src_slot) in perm.iter().enumerate() {
        if let Some(&row) = picked.get(src_slot) {
            features.row_mut(slot).assign(&bag.features().row(row));
            valid_mask[slot] = true;
            source_indices[slot] = row as i64;
        }
    }
    Ok(SampledBag {
        features,
        valid_mask,
        source_indices,
    })
}
