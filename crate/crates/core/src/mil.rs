//! Attention-MIL aggregators.
//!
//! ABMIL pools instances with gated attention,
//! `a = softmax_valid(w·(tanh(zV + b_v) ⊙ σ(zU + b_u)))`, and classifies the
//! pooled embedding `Σ a_k z_k` with an affine head. ACMIL shares the gated
//! trunk across `n_branch` attention heads, each with its own classifier;
//! branch logits and embeddings are averaged. During training each branch
//! randomly drops some of its most-attended instances, and a diversity
//! penalty (mean pairwise cosine between branch attention maps) is reported.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, mask_matrix, Parameters};
use crate::rng::{self, Rng};

pub const N_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilKind {
    Abmil,
    Acmil,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    pub kind: MilKind,
    pub n_branch: usize,
    pub mask_rate: f64,
    /// Number of top-attended instances eligible for stochastic masking.
    pub mask_top_k: usize,
    pub attn_hidden: usize,
    pub diversity_coef: f64,
    /// Inverse-frequency class weights in the supervised loss.
    pub class_weighting: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            kind: MilKind::Acmil,
            n_branch: 5,
            mask_rate: 0.1,
            mask_top_k: 10,
            attn_hidden: 128,
            diversity_coef: 0.1,
            class_weighting: false,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_branch == 0 || self.attn_hidden == 0 {
            return Err(Error::Config("mil.n_branch and mil.attn_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mil.mask_rate = {} is outside [0, 1)", self.mask_rate)));
        }
        if self.kind == MilKind::Abmil && self.n_branch != 1 {
            return Err(Error::Config("abmil has exactly one branch; set mil.n_branch = 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilParams {
    pub kind: MilKind,
    pub input_dim: usize,
    pub n_branch: usize,
    pub mask_rate: f64,
    pub mask_top_k: usize,
    pub attn_v: Array2<f64>,
    pub attn_v_b: Array2<f64>,
    pub attn_u: Array2<f64>,
    pub attn_u_b: Array2<f64>,
    /// L×n_branch attention projection.
    pub attn_w: Array2<f64>,
    /// Per-branch d×C classifier weights and 1×C biases.
    pub cls_w: Vec<Array2<f64>>,
    pub cls_b: Vec<Array2<f64>>,
}

impl Parameters for MilParams {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.attn_v, &self.attn_v_b, &self.attn_u, &self.attn_u_b, &self.attn_w];
        out.extend(self.cls_w.iter());
        out.extend(self.cls_b.iter());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.attn_v,
            &mut self.attn_v_b,
            &mut self.attn_u,
            &mut self.attn_u_b,
            &mut self.attn_w,
        ];
        out.extend(self.cls_w.iter_mut());
        out.extend(self.cls_b.iter_mut());
        out
    }
}

pub struct MilVars {
    attn_v: Var,
    attn_v_b: Var,
    attn_u: Var,
    attn_u_b: Var,
    attn_w: Var,
    cls_w: Vec<Var>,
    cls_b: Vec<Var>,
    pub all: Vec<Var>,
}

/// Forward results still on the tape.
pub struct MilGraph {
    pub logits: Var,
    pub bag_embedding: Var,
    pub attention: Var,
    pub diversity: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilOutput {
    pub logits: Vec<f64>,
    pub bag_embedding: Vec<f64>,
    /// n_branch×K; zero at invalid positions.
    pub attention: Array2<f64>,
    pub aux_losses: BTreeMap<String, f64>,
}

pub fn init_mil(cfg: &MilConfig, input_dim: usize, seed: u64) -> Result<MilParams> {
    cfg.validate()?;
    if input_dim == 0 {
        return Err(Error::InvalidArgument("MIL input dim must be >= 1".into()));
    }
    let mut rng = rng::rng_from(seed);
    let (d, l, nb) = (input_dim, cfg.attn_hidden, cfg.n_branch);
    let attn_v = fan_in_uniform(d, l, d, &mut rng);
    let attn_v_b = fan_in_uniform(1, l, d, &mut rng);
    let attn_u = fan_in_uniform(d, l, d, &mut rng);
    let attn_u_b = fan_in_uniform(1, l, d, &mut rng);
    let attn_w = fan_in_uniform(l, nb, l, &mut rng);
    let cls_w = (0..nb).map(|_| fan_in_uniform(d, N_CLASSES, d, &mut rng)).collect();
    let cls_b = (0..nb).map(|_| fan_in_uniform(1, N_CLASSES, d, &mut rng)).collect();
    Ok(MilParams {
        kind: cfg.kind,
        input_dim,
        n_branch: nb,
        mask_rate: cfg.mask_rate,
        mask_top_k: cfg.mask_top_k,
        attn_v,
        attn_v_b,
        attn_u,
        attn_u_b,
        attn_w,
        cls_w,
        cls_b,
    })
}

impl MilParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MilVars {
        let all = Parameters::bind(self, tape, trainable);
        let nb = self.n_branch;
        MilVars {
            attn_v: all[0],
            attn_v_b: all[1],
            attn_u: all[2],
            attn_u_b: all[3],
            attn_w: all[4],
            cls_w: all[5..5 + nb].to_vec(),
            cls_b: all[5 + nb..5 + 2 * nb].to_vec(),
            all,
        }
    }

    /// Forward one bag (K×d) on the tape. `masking_rng` enables the
    /// training-time stochastic top-instance masking (ACMIL only).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &MilVars,
        z: Var,
        mask: &[bool],
        masking_rng: Option<&mut Rng>,
    ) -> Result<MilGraph> {
        let (k, d) = tape.value(z).dim();
        if d != self.input_dim {
            return Err(Error::Dim(format!("MIL expects d={}, got d={d}", self.input_dim)));
        }
        if mask.len() != k {
            return Err(Error::LengthMismatch(mask.len(), k));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let z = if mask.iter().all(|&m| m) {
            z
        } else {
            let m = tape.constant(mask_matrix(mask, d));
            tape.mul(z, m)
        };

        let hv = tape.linear(z, vars.attn_v, vars.attn_v_b);
        let hv = tape.tanh(hv);
        let hu = tape.linear(z, vars.attn_u, vars.attn_u_b);
        let hu = tape.sigmoid(hu);
        let gated = tape.mul(hv, hu);
        let scores = tape.matmul(gated, vars.attn_w);
        let scores = tape.transpose(scores);

        let branch_masks = match (self.kind, masking_rng) {
            (MilKind::Acmil, Some(rng)) if self.mask_rate > 0.0 => {
                Some(self.branch_masks(tape.value(scores), mask, rng))
            }
            _ => None,
        };
        let attention = match branch_masks {
            None => tape.masked_softmax(scores, Rc::new(mask.to_vec())),
            Some(masks) => {
                let rows: Vec<Var> = masks
                    .into_iter()
                    .enumerate()
                    .map(|(b, m)| {
                        let r = tape.select_row(scores, b);
                        tape.masked_softmax(r, Rc::new(m))
                    })
                    .collect();
                tape.concat_rows(&rows)
            }
        };

        let embeddings = tape.matmul(attention, z);
        let nb = self.n_branch;
        let mut branch_logits = Vec::with_capacity(nb);
        for b in 0..nb {
            let e = tape.select_row(embeddings, b);
            branch_logits.push(tape.linear(e, vars.cls_w[b], vars.cls_b[b]));
        }
        let (logits, bag_embedding) = if nb == 1 {
            (branch_logits[0], embeddings)
        } else {
            let avg = tape.constant(Array2::from_elem((1, nb), 1.0 / nb as f64));
            let stacked = tape.concat_rows(&branch_logits);
            (tape.matmul(avg, stacked), tape.matmul(avg, embeddings))
        };
        let diversity = (self.kind == MilKind::Acmil && nb > 1).then(|| diversity_penalty(tape, attention, nb));
        Ok(MilGraph {
            logits,
            bag_embedding,
            attention,
            diversity,
        })
    }

    /// Per-branch validity masks with some top-attended instances dropped.
    /// At least one valid instance always survives in each branch.
    fn branch_masks(&self, scores: &Array2<f64>, mask: &[bool], rng: &mut Rng) -> Vec<Vec<bool>> {
        scores
            .outer_iter()
            .map(|row| {
                let mut order: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                let mut m = mask.to_vec();
                let mut remaining = order.len();
                for &i in order.iter().take(self.mask_top_k) {
                    if remaining > 1 && rng.random::<f64>() < self.mask_rate {
                        m[i] = false;
                        remaining -= 1;
                    }
                }
                m
            })
            .collect()
    }

    fn run(&self, z: &Array2<f64>, mask: &[bool], masking_rng: Option<&mut Rng>) -> Result<MilOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let g = self.forward(&mut tape, &vars, zv, mask, masking_rng)?;
        let mut aux_losses = BTreeMap::new();
        if let Some(div) = g.diversity {
            aux_losses.insert("diversity".to_string(), tape.scalar(div));
        }
        Ok(MilOutput {
            logits: tape.value(g.logits).row(0).to_vec(),
            bag_embedding: tape.value(g.bag_embedding).row(0).to_vec(),
            attention: tape.value(g.attention).clone(),
            aux_losses,
        })
    }
}

/// Mean pairwise cosine similarity between the rows of an n×K attention matrix.
fn diversity_penalty(tape: &mut Tape, attention: Var, nb: usize) -> Var {
    let unit = tape.l2_normalize_rows(attention, 1e-8);
    let unit_t = tape.transpose(unit);
    let gram = tape.matmul(unit, unit_t);
    let off_diag = tape.constant(Array2::from_shape_fn((nb, nb), |(i, j)| {
        if i == j {
            0.0
        } else {
            1.0 / (nb * (nb - 1)) as f64
        }
    }));
    let weighted = tape.mul(gram, off_diag);
    tape.sum(weighted)
}

pub fn abmil_forward(z: &Array2<f64>, mask: &[bool], params: &MilParams) -> Result<MilOutput> {
    if params.kind != MilKind::Abmil {
        return Err(Error::InvalidArgument("abmil_forward needs abmil params".into()));
    }
    params.run(z, mask, None)
}

/// `rng` drives the stochastic masking and is only consulted when `training`.
pub fn acmil_forward(
    z: &Array2<f64>,
    mask: &[bool],
    params: &MilParams,
    training: bool,
    rng: &mut Rng,
) -> Result<MilOutput> {
    if params.kind != MilKind::Acmil {
        return Err(Error::InvalidArgument("acmil_forward needs acmil params".into()));
    }
    params.run(z, mask, training.then_some(rng))
}

/// Inference forward for either backbone (no stochastic masking).
pub fn mil_forward(z: &Array2<f64>, mask: &[bool], params: &MilParams) -> Result<MilOutput> {
    params.run(z, mask, None)
}

/// Inverse-frequency weights for classes (0, 1), normalised to mean 1.
pub fn class_weights(positive_fraction: f64) -> Result<[f64; 2]> {
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive fraction {positive_fraction} must lie in (0, 1)"
        )));
    }
    let inv = [1.0 / (1.0 - positive_fraction), 1.0 / positive_fraction];
    let mean = (inv[0] + inv[1]) / 2.0;
    Ok([inv[0] / mean, inv[1] / mean])
}

/// Weighted cross-entropy of the logits plus `diversity_coef` × the diversity
/// term, on the tape.
pub fn supervised_loss_graph(
    tape: &mut Tape,
    graph: &MilGraph,
    target: u8,
    weights: Option<[f64; 2]>,
    diversity_coef: f64,
) -> Result<Var> {
    if target > 1 {
        return Err(Error::InvalidLabel(target as i64));
    }
    let logp = tape.log_softmax(graph.logits);
    let w = weights.map_or(1.0, |w| w[target as usize]);
    let mut pick = Array2::zeros((1, N_CLASSES));
    pick[[0, target as usize]] = -w;
    let pick = tape.constant(pick);
    let ce = tape.mul(logp, pick);
    let mut loss = tape.sum(ce);
    if let Some(div) = graph.diversity {
        if diversity_coef != 0.0 {
            let d = tape.scale(div, diversity_coef);
            loss = tape.add(loss, d);
        }
    }
    Ok(loss)
}

pub fn supervised_loss(
    output: &MilOutput,
    target: i64,
    weights: Option<[f64; 2]>,
    diversity_coef: f64,
) -> Result<f64> {
    if !(0..=1).contains(&target) {
        return Err(Error::InvalidLabel(target));
    }
    let l = &output.logits;
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let w = weights.map_or(1.0, |w| w[target as usize]);
    let div = output.aux_losses.get("diversity").copied().unwrap_or(0.0);
    Ok(w * (lse - l[target as usize]) + diversity_coef * div)
}

pub fn positive_probability(logits: &[f64]) -> f64 {
    let d = logits[1] - logits[0];
    1.0 / (1.0 + (-d).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::{check_op, randn};

    fn abmil(d: usize, seed: u64) -> MilParams {
        let cfg = MilConfig {
            kind: MilKind::Abmil,
            n_branch: 1,
            attn_hidden: 6,
            ..Default::default()
        };
        init_mil(&cfg, d, seed).unwrap()
    }

    fn acmil(d: usize, nb: usize, seed: u64) -> MilParams {
        let cfg = MilConfig {
            kind: MilKind::Acmil,
            n_branch: nb,
            attn_hidden: 6,
            mask_top_k: 3,
            mask_rate: 0.5,
            ..Default::default()
        };
        init_mil(&cfg, d, seed).unwrap()
    }

    #[test]
    fn singleton_bag_pools_to_its_instance() {
        let p = abmil(3, 1);
        let z = ndarray::array![[0.4, -1.0, 2.0], [9.0, 9.0, 9.0]];
        let out = abmil_forward(&z, &[true, false], &p).unwrap();
        assert_eq!(out.attention.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(out.bag_embedding, vec![0.4, -1.0, 2.0]);
    }

    #[test]
    fn identical_instances_get_equal_attention() {
        let p = abmil(3, 2);
        let z = ndarray::array![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]];
        let out = abmil_forward(&z, &[true, true], &p).unwrap();
        assert_eq!(out.attention.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn padding_rows_do_not_matter() {
        let p = abmil(4, 3);
        let z = randn(3, 4, 4);
        let base = abmil_forward(&z, &[true; 3], &p).unwrap();
        let mut padded = Array2::from_elem((8, 4), 123.0);
        padded.slice_mut(ndarray::s![..3, ..]).assign(&z);
        let mut mask = vec![false; 8];
        mask[..3].fill(true);
        let out = abmil_forward(&padded, &mask, &p).unwrap();
        for (a, b) in base.logits.iter().zip(&out.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in base.bag_embedding.iter().zip(&out.bag_embedding) {
            assert!((a - b).abs() < 1e-12);
        }
        for j in 0..3 {
            assert!((base.attention[[0, j]] - out.attention[[0, j]]).abs() < 1e-12);
        }
        assert!(out.attention.row(0).iter().skip(3).all(|&a| a == 0.0));
    }

    #[test]
    fn all_invalid_mask_is_an_error() {
        let p = abmil(2, 0);
        assert!(matches!(abmil_forward(&randn(2, 2, 0), &[false, false], &p), Err(Error::AllMasked)));
    }

    #[test]
    fn acmil_single_branch_eval_is_abmil() {
        let cfg = MilConfig {
            kind: MilKind::Acmil,
            n_branch: 1,
            mask_rate: 0.0,
            attn_hidden: 5,
            ..Default::default()
        };
        let ac = init_mil(&cfg, 4, 9).unwrap();
        let ab = MilParams { kind: MilKind::Abmil, ..ac.clone() };
        let z = randn(6, 4, 10);
        let mask = [true, true, false, true, true, true];
        let a = abmil_forward(&z, &mask, &ab).unwrap();
        let c = acmil_forward(&z, &mask, &ac, false, &mut rng::rng_from(0)).unwrap();
        assert_eq!(a.logits, c.logits);
        assert_eq!(a.bag_embedding, c.bag_embedding);
        assert_eq!(a.attention, c.attention);
    }

    #[test]
    fn identical_instances_make_branches_maximally_similar() {
        let p = acmil(3, 4, 5);
        let z = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 * 0.3 - 0.2);
        let out = acmil_forward(&z, &[true; 5], &p, false, &mut rng::rng_from(0)).unwrap();
        for row in out.attention.outer_iter() {
            for &a in row {
                assert!((a - 0.2).abs() < 1e-12);
            }
        }
        assert!((out.aux_losses["diversity"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_masking_drops_top_instances() {
        let p = acmil(3, 3, 6);
        let z = randn(8, 3, 7);
        let mask = vec![true; 8];
        let eval = acmil_forward(&z, &mask, &p, false, &mut rng::rng_from(1)).unwrap();
        let mut changed = false;
        for seed in 0..10 {
            let tr = acmil_forward(&z, &mask, &p, true, &mut rng::rng_from(seed)).unwrap();
            for row in tr.attention.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().filter(|&&a| a > 0.0).count() >= 8 - 3);
            }
            changed |= tr.attention != eval.attention;
        }
        assert!(changed);
    }

    #[test]
    fn cross_entropy_values() {
        let mut out = MilOutput {
            logits: vec![0.0, 0.0],
            bag_embedding: vec![],
            attention: Array2::zeros((1, 1)),
            aux_losses: BTreeMap::new(),
        };
        assert!((supervised_loss(&out, 1, None, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let w = class_weights(0.35).unwrap();
        assert!((w[1] - 1.3).abs() < 1e-12 && (w[0] - 0.7).abs() < 1e-12);
        let weighted = supervised_loss(&out, 1, Some(w), 0.0).unwrap();
        assert!((weighted - 1.3 * std::f64::consts::LN_2).abs() < 1e-12);
        out.logits = vec![-40.0, 40.0];
        assert!(supervised_loss(&out, 1, None, 0.0).unwrap() < 1e-30);
        assert!(matches!(supervised_loss(&out, 2, None, 0.0), Err(Error::InvalidLabel(2))));
        out.aux_losses.insert("diversity".into(), 0.5);
        let l = supervised_loss(&out, 0, None, 0.1).unwrap();
        assert!((l - (80.0 + 0.05)).abs() < 1e-9);
    }

    #[test]
    fn abmil_requires_single_branch() {
        let cfg = MilConfig {
            kind: MilKind::Abmil,
            n_branch: 3,
            ..Default::default()
        };
        assert!(init_mil(&cfg, 4, 0).is_err());
    }

    #[test]
    fn loss_gradient_wrt_instances_matches_finite_differences() {
        let p = acmil(4, 3, 12);
        let mask = [true, true, true, false, true];
        let rel = check_op(randn(5, 4, 13), |t, z| {
            let vars = p.bind(t, false);
            let g = p.forward(t, &vars, z, &mask, None).unwrap();
            supervised_loss_graph(t, &g, 1, Some([0.7, 1.3]), 0.1).unwrap()
        });
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let p = acmil(4, 3, 14);
        let z = randn(6, 4, 15);
        let mask = [true; 6];
        let out = mil_forward(&z, &mask, &p).unwrap();
        let mut t = Tape::new();
        let vars = p.bind(&mut t, true);
        let zv = t.constant(z);
        let g = p.forward(&mut t, &vars, zv, &mask, None).unwrap();
        let l = supervised_loss_graph(&mut t, &g, 0, None, 0.1).unwrap();
        assert!((t.scalar(l) - supervised_loss(&out, 0, None, 0.1).unwrap()).abs() < 1e-12);
        let grads = t.backward(l);
        assert!(vars.all.iter().all(|&v| grads.get(v).is_some()));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let p = acmil(3, 2, 16);
        let z = randn(4, 3, 17);
        let mask = [true, false, true, true];
        let rel = crate::params::tests::check_param_grads(&p, |t, q, trainable| {
            let vars = q.bind(t, trainable);
            let zv = t.constant(z.clone());
            let g = q.forward(t, &vars, zv, &mask, None).unwrap();
            let l = supervised_loss_graph(t, &g, 0, None, 0.1).unwrap();
            (l, vars.all)
        });
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn permuting_instances_permutes_attention() {
        let p = acmil(4, 3, 18);
        let z = randn(5, 4, 19);
        let perm = [3, 0, 4, 1, 2];
        let zp = Array2::from_shape_fn((5, 4), |(i, j)| z[[perm[i], j]]);
        let a = mil_forward(&z, &[true; 5], &p).unwrap();
        let b = mil_forward(&zp, &[true; 5], &p).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.bag_embedding.iter().zip(&b.bag_embedding) {
            assert!((x - y).abs() < 1e-12);
        }
        for br in 0..3 {
            for (i, &src) in perm.iter().enumerate() {
                assert!((b.attention[[br, i]] - a.attention[[br, src]]).abs() < 1e-12);
            }
        }
    }
}
