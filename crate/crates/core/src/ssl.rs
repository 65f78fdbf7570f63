//! SimSiam heads and the adapter self-supervision objective.
//!
//! Both augmented views go through adapter → MIL (frozen, eval mode) →
//! projector. The predictor output of each view is pulled towards the
//! detached projection of the other view; a cross-view consistency term on
//! the adapted instances, with an L1 penalty on the first view, is added with
//! weight `cons_weight`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterParams, AdapterVars};
use crate::augment::ViewPair;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mil::{MilParams, MilVars};
use crate::params::{fan_in_uniform, mask_matrix, to_f64, Parameters};
use crate::rng;

pub const COSINE_EPS: f64 = 1e-8;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub latent_dim: usize,
    pub lambda: f64,
    pub cons_weight: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            lambda: 0.1,
            cons_weight: 0.5,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("ssl.latent_dim must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.cons_weight < 0.0 {
            return Err(Error::Config("ssl.lambda and ssl.cons_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslHeads {
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub pred_w: Array2<f64>,
    pub pred_b: Array2<f64>,
}

impl Parameters for SslHeads {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.proj_w, &self.proj_b, &self.pred_w, &self.pred_b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.proj_w, &mut self.proj_b, &mut self.pred_w, &mut self.pred_b]
    }
}

pub struct HeadVars {
    proj_w: Var,
    proj_b: Var,
    pred_w: Var,
    pred_b: Var,
    pub all: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_simsiam: f64,
    pub l_cons: f64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sup: Option<f64>,
}

pub fn init_heads(embed_dim: usize, latent_dim: usize, seed: u64) -> Result<SslHeads> {
    if embed_dim == 0 || latent_dim == 0 {
        return Err(Error::InvalidArgument("SSL head dims must be >= 1".into()));
    }
    let mut rng = rng::rng_from(seed);
    Ok(SslHeads {
        proj_w: fan_in_uniform(embed_dim, latent_dim, embed_dim, &mut rng),
        proj_b: fan_in_uniform(1, latent_dim, embed_dim, &mut rng),
        pred_w: fan_in_uniform(latent_dim, latent_dim, latent_dim, &mut rng),
        pred_b: fan_in_uniform(1, latent_dim, latent_dim, &mut rng),
    })
}

impl SslHeads {
    pub fn embed_dim(&self) -> usize {
        self.proj_w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.proj_w.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let all = Parameters::bind(self, tape, trainable);
        HeadVars {
            proj_w: all[0],
            proj_b: all[1],
            pred_w: all[2],
            pred_b: all[3],
            all,
        }
    }

    /// affine → ReLU → per-row normalisation.
    pub fn project_graph(&self, tape: &mut Tape, vars: &HeadVars, m: Var) -> Var {
        let h = tape.linear(m, vars.proj_w, vars.proj_b);
        let h = tape.relu(h);
        tape.row_norm(h, NORM_EPS)
    }

    /// per-row normalisation → ReLU → affine.
    pub fn predict_graph(&self, tape: &mut Tape, vars: &HeadVars, z: Var) -> Var {
        let h = tape.row_norm(z, NORM_EPS);
        let h = tape.relu(h);
        tape.linear(h, vars.pred_w, vars.pred_b)
    }

    fn apply(&self, x: &Array2<f64>, expect: usize, f: fn(&Self, &mut Tape, &HeadVars, Var) -> Var) -> Result<Array2<f64>> {
        if x.ncols() != expect {
            return Err(Error::Dim(format!("SSL head expects width {expect}, got {}", x.ncols())));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = f(self, &mut tape, &vars, xv);
        Ok(tape.value(out).clone())
    }
}

pub fn project(m: &Array2<f64>, heads: &SslHeads) -> Result<Array2<f64>> {
    heads.apply(m, heads.embed_dim(), SslHeads::project_graph)
}

pub fn predict(z: &Array2<f64>, heads: &SslHeads) -> Result<Array2<f64>> {
    heads.apply(z, heads.latent_dim(), SslHeads::predict_graph)
}

/// Mean over rows of ½(−cos(p1, t2) − cos(p2, t1)); targets are detached.
pub fn simsiam_graph(tape: &mut Tape, p1: Var, t2: Var, p2: Var, t1: Var) -> Var {
    let t1 = tape.detach(t1);
    let t2 = tape.detach(t2);
    let c12 = tape.cosine_rows(p1, t2, COSINE_EPS);
    let c21 = tape.cosine_rows(p2, t1, COSINE_EPS);
    let s = tape.add(c12, c21);
    let m = tape.mean(s);
    tape.scale(m, -0.5)
}

pub fn simsiam_loss(p1: &Array2<f64>, t2: &Array2<f64>, p2: &Array2<f64>, t1: &Array2<f64>) -> Result<f64> {
    let shape = p1.dim();
    if [t2.dim(), p2.dim(), t1.dim()].iter().any(|&s| s != shape) {
        return Err(Error::Dim("simsiam_loss inputs must share a shape".into()));
    }
    if shape.0 == 0 {
        return Err(Error::InvalidArgument("simsiam_loss needs at least one row".into()));
    }
    let mut tape = Tape::new();
    let vs: Vec<Var> = [p1, t2, p2, t1].iter().map(|a| tape.constant((*a).clone())).collect();
    let l = simsiam_graph(&mut tape, vs[0], vs[1], vs[2], vs[3]);
    Ok(tape.scalar(l))
}

/// `mean_valid ‖z1 − z2‖² + λ · mean_valid ‖z1‖₁` over every valid instance
/// of every bag.
pub fn cv_consistency_graph(
    tape: &mut Tape,
    z1: &[Var],
    z2: &[Var],
    masks: &[&[bool]],
    lambda: f64,
) -> Result<Var> {
    let n_valid: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    if n_valid == 0 {
        return Err(Error::AllMasked);
    }
    let mut total: Option<Var> = None;
    for ((&a, &b), mask) in z1.iter().zip(z2).zip(masks) {
        let d = tape.value(a).ncols();
        let m = tape.constant(mask_matrix(mask, d));
        let diff = tape.sub(a, b);
        let sq = tape.square(diff);
        let sq = tape.mul(sq, m);
        let l1 = tape.abs(a);
        let l1 = tape.mul(l1, m);
        let l1 = tape.scale(l1, lambda);
        let per = tape.add(sq, l1);
        let s = tape.sum(per);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let total = total.expect("at least one bag");
    Ok(tape.scale(total, 1.0 / n_valid as f64))
}

/// B×K×d inputs with a B×K validity mask.
pub fn cv_consistency_loss(z1: &Array3<f64>, z2: &Array3<f64>, mask: &Array2<bool>, lambda: f64) -> Result<f64> {
    if z1.dim() != z2.dim() {
        return Err(Error::Dim("cv_consistency_loss views differ in shape".into()));
    }
    let (b, k, _) = z1.dim();
    if mask.dim() != (b, k) {
        return Err(Error::Dim(format!("mask is {:?}, expected ({b}, {k})", mask.dim())));
    }
    let mut tape = Tape::new();
    let a: Vec<Var> = z1.outer_iter().map(|x| tape.constant(x.to_owned())).collect();
    let c: Vec<Var> = z2.outer_iter().map(|x| tape.constant(x.to_owned())).collect();
    let rows: Vec<Vec<bool>> = mask.outer_iter().map(|r| r.to_vec()).collect();
    let refs: Vec<&[bool]> = rows.iter().map(|r| r.as_slice()).collect();
    let l = cv_consistency_graph(&mut tape, &a, &c, &refs, lambda)?;
    Ok(tape.scalar(l))
}

/// Loss nodes for a batch of view pairs.
pub struct DasslGraph {
    pub l_simsiam: Var,
    pub l_cons: Var,
    pub l_total: Var,
}

/// Adapter handles on the tape; `None` runs the MIL on the masked inputs.
pub type BoundAdapter<'a> = Option<(&'a AdapterParams, &'a AdapterVars)>;

pub fn adapt(tape: &mut Tape, adapter: BoundAdapter<'_>, x: Var, mask: &[bool]) -> Var {
    match adapter {
        Some((p, v)) => p.forward_masked(tape, v, x, mask),
        None if mask.iter().all(|&m| m) => x,
        None => {
            let m = tape.constant(mask_matrix(mask, tape.value(x).ncols()));
            tape.mul(x, m)
        }
    }
}

/// Builds the DA-SSL loss for a batch. The MIL runs deterministically; its
/// handles should be bound as constants so that only adapter and heads learn.
pub fn dassl_graph(
    tape: &mut Tape,
    adapter: BoundAdapter<'_>,
    mil: (&MilParams, &MilVars),
    heads: (&SslHeads, &HeadVars),
    pairs: &[&ViewPair],
    cfg: &SslConfig,
) -> Result<DasslGraph> {
    dassl_graph_inner(tape, adapter, mil, heads, pairs, cfg, None)
}

/// `frozen_targets` replaces the (detached) projections used as targets,
/// which lets tests difference the loss with the targets held still.
fn dassl_graph_inner(
    tape: &mut Tape,
    adapter: BoundAdapter<'_>,
    mil: (&MilParams, &MilVars),
    heads: (&SslHeads, &HeadVars),
    pairs: &[&ViewPair],
    cfg: &SslConfig,
    frozen_targets: Option<&(Array2<f64>, Array2<f64>)>,
) -> Result<DasslGraph> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dassl loss needs at least one view pair".into()));
    }
    let (mil_p, mil_v) = mil;
    let (heads_p, heads_v) = heads;
    let mut z1s = Vec::with_capacity(pairs.len());
    let mut z2s = Vec::with_capacity(pairs.len());
    let mut e1s = Vec::with_capacity(pairs.len());
    let mut e2s = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mask = &pair.valid_mask;
        for (view, zs, es) in [(&pair.view1, &mut z1s, &mut e1s), (&pair.view2, &mut z2s, &mut e2s)] {
            let x = tape.constant(to_f64(view));
            let z = adapt(tape, adapter, x, mask);
            let g = mil_p.forward(tape, mil_v, z, mask, None)?;
            zs.push(z);
            es.push(g.bag_embedding);
        }
    }
    let e1 = tape.concat_rows(&e1s);
    let e2 = tape.concat_rows(&e2s);
    if tape.value(e1).ncols() != heads_p.embed_dim() {
        return Err(Error::Dim(format!(
            "SSL heads expect embedding width {}, MIL produced {}",
            heads_p.embed_dim(),
            tape.value(e1).ncols()
        )));
    }
    let m1 = heads_p.project_graph(tape, heads_v, e1);
    let m2 = heads_p.project_graph(tape, heads_v, e2);
    let p1 = heads_p.predict_graph(tape, heads_v, m1);
    let p2 = heads_p.predict_graph(tape, heads_v, m2);
    let (t1, t2) = match frozen_targets {
        Some((a, b)) => (tape.constant(a.clone()), tape.constant(b.clone())),
        None => (m1, m2),
    };
    let l_simsiam = simsiam_graph(tape, p1, t2, p2, t1);
    let masks: Vec<&[bool]> = pairs.iter().map(|p| p.valid_mask.as_slice()).collect();
    let l_cons = cv_consistency_graph(tape, &z1s, &z2s, &masks, cfg.lambda)?;
    let weighted = tape.scale(l_cons, cfg.cons_weight);
    let l_total = tape.add(l_simsiam, weighted);
    Ok(DasslGraph {
        l_simsiam,
        l_cons,
        l_total,
    })
}

/// Loss values for one view pair (no gradients).
pub fn dassl_loss(
    view_pair: &ViewPair,
    adapter: Option<&AdapterParams>,
    mil: &MilParams,
    heads: &SslHeads,
    cfg: &SslConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let avars = adapter.map(|a| a.bind(&mut tape, false));
    let bound = adapter.zip(avars.as_ref());
    let mvars = mil.bind(&mut tape, false);
    let hvars = heads.bind(&mut tape, false);
    let g = dassl_graph(&mut tape, bound, (mil, &mvars), (heads, &hvars), &[view_pair], cfg)?;
    Ok(LossReport {
        l_simsiam: tape.scalar(g.l_simsiam),
        l_cons: tape.scalar(g.l_cons),
        l_total: tape.scalar(g.l_total),
        l_sup: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterKind};
    use crate::autodiff::tests::randn;
    use crate::mil::{init_mil, MilConfig};
    use crate::params::tests::check_param_grads;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Array2<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Array2::from_shape_vec((1, v.len()), v.iter().map(|x| x / n).collect()).unwrap()
    }

    #[test]
    fn simsiam_identical_is_minus_one() {
        let a = unit(&[0.6, 0.8]);
        let b = unit(&[1.0, -2.0]);
        let l = simsiam_loss(&a, &a, &b, &b).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_orthogonal_is_zero() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert!(simsiam_loss(&a, &b, &b, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn simsiam_mixed_case() {
        let p1 = array![[1.0, 0.0]];
        let t2 = array![[0.0, 1.0]];
        let p2 = unit(&[1.0, 1.0]);
        let t1 = array![[1.0, 0.0]];
        let l = simsiam_loss(&p1, &t2, &p2, &t1).unwrap();
        assert!((l + 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!((l + 0.353_553_390_593_273_7).abs() < 1e-12);
    }

    #[test]
    fn simsiam_zero_vectors_stay_finite() {
        let z = Array2::zeros((2, 3));
        assert_eq!(simsiam_loss(&z, &z, &z, &z).unwrap(), 0.0);
    }

    #[test]
    fn consistency_values() {
        let zeros = Array3::zeros((1, 2, 2));
        let mask = Array2::from_elem((1, 2), true);
        assert_eq!(cv_consistency_loss(&zeros, &zeros, &mask, 0.1).unwrap(), 0.0);

        let z1 = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = cv_consistency_loss(&z1, &zeros, &mask, 0.1).unwrap();
        assert!((l - 0.55).abs() < 1e-12);

        let z = Array3::from_shape_vec((1, 2, 2), vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let l = cv_consistency_loss(&z, &z, &mask, 0.1).unwrap();
        assert!((l - 0.1 * (3.0 + 0.5) / 2.0).abs() < 1e-12);

        let none = Array2::from_elem((1, 2), false);
        assert!(matches!(cv_consistency_loss(&z, &z, &none, 0.1), Err(Error::AllMasked)));
    }

    #[test]
    fn consistency_ignores_invalid_rows() {
        let z1 = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 50.0, -9.0]).unwrap();
        let z2 = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        let mask = array![[true, false]];
        let l = cv_consistency_loss(&z1, &z2, &mask, 0.1).unwrap();
        assert!((l - 1.1).abs() < 1e-12);
    }

    fn row_norm_oracle(v: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        v.iter().map(|x| (x - mean) / (var + NORM_EPS).sqrt()).collect()
    }

    fn tiny_heads() -> SslHeads {
        SslHeads {
            proj_w: array![[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.5, 2.0]],
            proj_b: array![[0.0, 0.5]],
            pred_w: array![[2.0, 1.0], [-1.0, 3.0]],
            pred_b: array![[0.1, -0.1]],
        }
    }

    #[test]
    fn project_hand_computed() {
        let heads = tiny_heads();
        let m = array![[1.0, 2.0, 3.0, 4.0]];
        // affine: (1 + 3 + 2, 2 − 3 + 8) + (0, 0.5) = (6, 7.5); relu keeps both
        let expect = row_norm_oracle(&[6.0, 7.5]);
        let out = project(&m, &heads).unwrap();
        for j in 0..2 {
            assert!((out[[0, j]] - expect[j]).abs() < 1e-12);
        }
        assert!((out.row(0).sum()).abs() < 1e-12);
        let var = out.row(0).mapv(|v| v * v).mean().unwrap();
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn predict_hand_computed() {
        let heads = tiny_heads();
        let z = array![[3.0, -1.0]];
        let n = row_norm_oracle(&[3.0, -1.0]);
        let r = [n[0].max(0.0), n[1].max(0.0)];
        let expect = [r[0] * 2.0 + -r[1] + 0.1, r[0] * 1.0 + r[1] * 3.0 - 0.1];
        let out = predict(&z, &heads).unwrap();
        for j in 0..2 {
            assert!((out[[0, j]] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_are_deterministic_and_check_dims() {
        let heads = init_heads(6, 4, 3).unwrap();
        let m = randn(3, 6, 4);
        assert_eq!(project(&m, &heads).unwrap(), project(&m, &heads).unwrap());
        let twin = ndarray::concatenate![ndarray::Axis(0), m.slice(ndarray::s![0..1, ..]), m.slice(ndarray::s![0..1, ..])];
        let p = project(&twin, &heads).unwrap();
        assert_eq!(p.row(0), p.row(1));
        assert!(matches!(project(&randn(1, 5, 0), &heads), Err(Error::Dim(_))));
        assert!(matches!(predict(&randn(1, 6, 0), &heads), Err(Error::Dim(_))));
        for row in project(&m, &heads).unwrap().outer_iter() {
            assert!(row.sum().abs() < 1e-9);
        }
    }

    struct Fixture {
        adapter: AdapterParams,
        mil: MilParams,
        heads: SslHeads,
        pair: ViewPair,
    }

    fn fixture(d: usize, k: usize, seed: u64) -> Fixture {
        let mut adapter = init_adapter(AdapterKind::Mlp, d, 2, 1, seed).unwrap();
        adapter.w2[0] = randn(2, d, seed + 1) * 0.5;
        let cfg = MilConfig {
            n_branch: 2,
            attn_hidden: 3,
            ..Default::default()
        };
        let mil = init_mil(&cfg, d, seed + 2).unwrap();
        let heads = init_heads(d, 3, seed + 3).unwrap();
        let mut mask = vec![true; k];
        mask[k - 1] = false;
        let mut view1 = randn(k, d, seed + 4).mapv(|v| v as f32);
        let mut view2 = randn(k, d, seed + 5).mapv(|v| v as f32);
        view1.row_mut(k - 1).fill(0.0);
        view2.row_mut(k - 1).fill(0.0);
        Fixture {
            adapter,
            mil,
            heads,
            pair: ViewPair { view1, view2, valid_mask: mask },
        }
    }

    #[test]
    fn identical_views_with_identity_adapter() {
        let mut f = fixture(4, 5, 30);
        f.pair.view2 = f.pair.view1.clone();
        let identity = init_adapter(AdapterKind::Mlp, 4, 2, 1, 0).unwrap();
        let cfg = SslConfig { latent_dim: 3, ..Default::default() };
        let r = dassl_loss(&f.pair, Some(&identity), &f.mil, &f.heads, &cfg).unwrap();

        let x = to_f64(&f.pair.view1);
        let l1: f64 = x.outer_iter().take(4).map(|r| r.mapv(f64::abs).sum()).sum::<f64>() / 4.0;
        assert!((r.l_cons - 0.1 * l1).abs() < 1e-12);

        // both cosine terms collapse to cos(pred(m), m) for the shared m
        let e = Array2::from_shape_vec((1, 4), mil_embedding(&f)).unwrap();
        let m = project(&e, &f.heads).unwrap();
        let p = predict(&m, &f.heads).unwrap();
        let dot = (&p * &m).sum();
        let cos = dot / (p.mapv(|v| v * v).sum().sqrt() * m.mapv(|v| v * v).sum().sqrt());
        assert!((r.l_simsiam + cos).abs() < 1e-12);

        // with the prediction equal to its target the loss reaches −1
        let mut tape = Tape::new();
        let e = tape.constant(m);
        let t = tape.detach(e);
        let l = simsiam_graph(&mut tape, e, t, e, t);
        assert!((tape.scalar(l) + 1.0).abs() < 1e-12);
    }

    fn mil_embedding(f: &Fixture) -> Vec<f64> {
        crate::mil::mil_forward(&to_f64(&f.pair.view1), &f.pair.valid_mask, &f.mil)
            .unwrap()
            .bag_embedding
    }

    #[test]
    fn total_is_recomputed_from_parts() {
        let f = fixture(4, 6, 40);
        let cfg = SslConfig { latent_dim: 3, ..Default::default() };
        let r = dassl_loss(&f.pair, Some(&f.adapter), &f.mil, &f.heads, &cfg).unwrap();
        assert!((r.l_total - (r.l_simsiam + 0.5 * r.l_cons)).abs() <= 4.0 * f64::EPSILON * r.l_total.abs().max(1.0));
        assert!(r.l_cons >= 0.0);
        assert!((-1.0..=1.0).contains(&r.l_simsiam));
    }

    #[test]
    fn degenerate_zero_features_stay_finite() {
        let f = fixture(4, 4, 41);
        let zero = ViewPair {
            view1: Array2::zeros((4, 4)),
            view2: Array2::zeros((4, 4)),
            valid_mask: vec![true; 4],
        };
        let mut heads = f.heads.clone();
        heads.proj_b.fill(0.0);
        heads.pred_b.fill(0.0);
        let cfg = SslConfig { latent_dim: 3, ..Default::default() };
        let r = dassl_loss(&zero, None, &f.mil, &heads, &cfg).unwrap();
        assert!(r.l_total.is_finite() && r.l_simsiam.is_finite());
    }

    #[test]
    fn swapping_views_keeps_symmetric_parts() {
        let f = fixture(4, 5, 42);
        let cfg = SslConfig { latent_dim: 3, lambda: 0.0, ..Default::default() };
        let swapped = ViewPair {
            view1: f.pair.view2.clone(),
            view2: f.pair.view1.clone(),
            valid_mask: f.pair.valid_mask.clone(),
        };
        let a = dassl_loss(&f.pair, Some(&f.adapter), &f.mil, &f.heads, &cfg).unwrap();
        let b = dassl_loss(&swapped, Some(&f.adapter), &f.mil, &f.heads, &cfg).unwrap();
        assert!((a.l_simsiam - b.l_simsiam).abs() < 1e-12);
        assert!((a.l_cons - b.l_cons).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_blocks_target_branch() {
        // loss = simsiam(p(x1), m(x2), p(x2), m(x1)) where m is fixed data:
        // moving the targets changes the loss but leaves no gradient on them.
        let mut tape = Tape::new();
        let p1 = tape.param(randn(2, 3, 1));
        let p2 = tape.param(randn(2, 3, 2));
        let t1 = tape.param(randn(2, 3, 3));
        let t2 = tape.param(randn(2, 3, 4));
        let l = simsiam_graph(&mut tape, p1, t2, p2, t1);
        let g = tape.backward(l);
        assert!(g.get(t1).is_none() && g.get(t2).is_none());
        assert!(g.get(p1).is_some() && g.get(p2).is_some());
        let base = tape.scalar(l);
        let moved = simsiam_loss(
            tape.value(p1),
            &(tape.value(t2) + 0.3),
            tape.value(p2),
            tape.value(t1),
        )
        .unwrap();
        assert!((moved - base).abs() > 1e-6);
    }

    #[test]
    fn projector_gradient_flows_only_through_predictor_branch() {
        // If the target side carried gradient, d/dW would pick up an extra
        // term; compare against a graph whose targets are explicit constants.
        let f = fixture(4, 5, 43);
        let cfg = SslConfig { latent_dim: 3, lambda: 0.1, ..Default::default() };
        let full = {
            let mut t = Tape::new();
            let mv = f.mil.bind(&mut t, false);
            let hv = f.heads.bind(&mut t, true);
            let g = dassl_graph(&mut t, None, (&f.mil, &mv), (&f.heads, &hv), &[&f.pair], &cfg).unwrap();
            t.backward(g.l_simsiam).get_or_zeros(hv.all[0], &f.heads.proj_w)
        };
        let manual = {
            let e1 = mil_embedding(&f);
            let e2 = crate::mil::mil_forward(&to_f64(&f.pair.view2), &f.pair.valid_mask, &f.mil)
                .unwrap()
                .bag_embedding;
            let e1 = Array2::from_shape_vec((1, 4), e1).unwrap();
            let e2 = Array2::from_shape_vec((1, 4), e2).unwrap();
            let m1 = project(&e1, &f.heads).unwrap();
            let m2 = project(&e2, &f.heads).unwrap();
            let mut t = Tape::new();
            let hv = f.heads.bind(&mut t, true);
            let e1v = t.constant(e1);
            let e2v = t.constant(e2);
            let a = f.heads.project_graph(&mut t, &hv, e1v);
            let b = f.heads.project_graph(&mut t, &hv, e2v);
            let p1 = f.heads.predict_graph(&mut t, &hv, a);
            let p2 = f.heads.predict_graph(&mut t, &hv, b);
            let t1 = t.constant(m1);
            let t2 = t.constant(m2);
            let l = simsiam_graph(&mut t, p1, t2, p2, t1);
            t.backward(l).get_or_zeros(hv.all[0], &f.heads.proj_w)
        };
        assert!((&full - &manual).iter().all(|v| v.abs() < 1e-12));
    }

    /// Targets at the current parameters, held fixed for differencing.
    fn current_targets(f: &Fixture) -> (Array2<f64>, Array2<f64>) {
        let mut t = Tape::new();
        let av = f.adapter.bind(&mut t, false);
        let mut out = Vec::new();
        for view in [&f.pair.view1, &f.pair.view2] {
            let x = t.constant(to_f64(view));
            let z = adapt(&mut t, Some((&f.adapter, &av)), x, &f.pair.valid_mask);
            let z = t.value(z).clone();
            let e = crate::mil::mil_forward(&z, &f.pair.valid_mask, &f.mil).unwrap().bag_embedding;
            out.push(project(&Array2::from_shape_vec((1, e.len()), e).unwrap(), &f.heads).unwrap());
        }
        (out.remove(0), out.remove(0))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(3, 4, 44);
        let cfg = SslConfig { latent_dim: 3, ..Default::default() };
        let targets = current_targets(&f);
        // Analytic gradients come from the real graph; the finite differences
        // hold the stop-gradient targets at their current values.
        let graph = |t: &mut Tape, a: &AdapterParams, h: &SslHeads, train_a: bool, train_h: bool| {
            let av = a.bind(t, train_a);
            let mv = f.mil.bind(t, false);
            let hv = h.bind(t, train_h);
            let frozen = (!train_a && !train_h).then_some(&targets);
            let g = dassl_graph_inner(t, Some((a, &av)), (&f.mil, &mv), (h, &hv), &[&f.pair], &cfg, frozen).unwrap();
            (g.l_total, av.all, hv.all)
        };
        let adapter_rel = check_param_grads(&f.adapter, |t, a, trainable| {
            let (l, av, _) = graph(t, a, &f.heads, trainable, false);
            (l, av)
        });
        assert!(adapter_rel < 1e-4, "adapter relative error {adapter_rel}");
        let heads_rel = check_param_grads(&f.heads, |t, h, trainable| {
            let (l, _, hv) = graph(t, &f.adapter, h, false, trainable);
            (l, hv)
        });
        assert!(heads_rel < 1e-4, "head relative error {heads_rel}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn simsiam_is_bounded(vals in proptest::collection::vec(-1e3f64..1e3, 4 * 2 * 3)) {
            let a = Array1::from(vals).into_shape((4, 6)).unwrap();
            let p1 = a.slice(ndarray::s![.., 0..3]).to_owned();
            let t2 = a.slice(ndarray::s![.., 3..6]).to_owned();
            let l = simsiam_loss(&p1, &t2, &t2, &p1).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        }
    }

    #[test]
    fn simsiam_bound_over_many_inputs() {
        let mut worst = (0.0f64, 0.0f64);
        for s in 0..10_000u64 {
            let p1 = randn(1, 4, s);
            let t2 = randn(1, 4, s + 20_000);
            let p2 = randn(1, 4, s + 40_000) * 1e-9;
            let t1 = randn(1, 4, s + 60_000) * 1e6;
            let l = simsiam_loss(&p1, &t2, &p2, &t1).unwrap();
            worst = (worst.0.min(l), worst.1.max(l));
        }
        assert!(worst.0 >= -1.0 - 1e-12 && worst.1 <= 1.0 + 1e-12);
    }
}
