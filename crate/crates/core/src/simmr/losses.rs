//! Per-visit training losses. Each function takes a batch (one row per
//! visit) and returns a `B x 1` column of per-visit values.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::medrep::info_nce;

/// Clamp for probabilities inside logarithms and guard for cosine norms.
pub const EPS: f64 = 1e-8;

/// Summed binary cross-entropy over medications.
pub fn bce_loss<'t>(y: Var<'t>, labels: &Mat) -> Var<'t> {
    let tape = y.tape();
    let pos = tape.constant(labels.clone());
    let neg = tape.constant(labels.mapv(|m| 1.0 - m));
    let y = y.clamp(EPS, 1.0 - EPS);
    let one_minus = y.neg().add_scalar(1.0);
    pos.mul(y.ln()).add(neg.mul(one_minus.ln())).sum_cols().neg()
}

/// `(1/|M|) Σ_{i pos, j neg} max(0, 1 - (y_i - y_j))` per row.
pub fn multilabel_margin_loss<'t>(y: Var<'t>, labels: &Mat) -> Var<'t> {
    let yv = y.value();
    let (b, m) = yv.dim();
    let labels = Rc::new(labels.clone());
    let mut value = Mat::zeros((b, 1));
    let mut grad = Mat::zeros((b, m));
    for r in 0..b {
        for i in (0..m).filter(|&i| labels[[r, i]] > 0.5) {
            for j in (0..m).filter(|&j| labels[[r, j]] <= 0.5) {
                let slack = 1.0 - (yv[[r, i]] - yv[[r, j]]);
                if slack > 0.0 {
                    value[[r, 0]] += slack;
                    grad[[r, i]] -= 1.0;
                    grad[[r, j]] += 1.0;
                }
            }
        }
    }
    let norm = 1.0 / m.max(1) as f64;
    value.mapv_inplace(|v| v * norm);
    grad.mapv_inplace(|v| v * norm);
    y.tape().custom(&[y], value, move |g| vec![&grad * g])
}

/// `Σ_{i,j} A_ij y_i y_j` per row (each unordered pair counted twice).
pub fn ddi_loss<'t>(y: Var<'t>, adjacency: &Mat) -> Var<'t> {
    let a = y.tape().constant(adjacency.clone());
    y.matmul(a).mul(y).sum_cols()
}

/// `|cos(a_r, b_r)|` per row; rows where either norm is below [`EPS`] give 0
/// and are reported in the returned flags.
pub fn orthogonality_loss<'t>(a: Var<'t>, b: Var<'t>) -> (Var<'t>, Vec<bool>) {
    let (av, bv) = (a.value(), b.value());
    let rows = av.nrows();
    let mut value = Mat::zeros((rows, 1));
    let mut ga = Mat::zeros(av.raw_dim());
    let mut gb = Mat::zeros(bv.raw_dim());
    let mut guarded = vec![false; rows];
    for r in 0..rows {
        let (x, y) = (av.row(r), bv.row(r));
        let (nx, ny) = (x.dot(&x).sqrt(), y.dot(&y).sqrt());
        if nx < EPS || ny < EPS {
            guarded[r] = true;
            continue;
        }
        let cos = x.dot(&y) / (nx * ny);
        let sign = if cos >= 0.0 { 1.0 } else { -1.0 };
        value[[r, 0]] = cos.abs();
        // d cos / dx = y / (|x||y|) - cos x / |x|^2
        let dx = &y / (nx * ny) - &(&x * (cos / (nx * nx)));
        let dy = &x / (nx * ny) - &(&y * (cos / (ny * ny)));
        ga.row_mut(r).assign(&(dx * sign));
        gb.row_mut(r).assign(&(dy * sign));
    }
    let out = a.tape().custom(&[a, b], value, move |g| {
        let col = g.column(0).insert_axis(ndarray::Axis(1)).to_owned();
        vec![&ga * &col, &gb * &col]
    });
    (out, guarded)
}

/// In-batch contrast of each visit's health status and medication vector
/// against its own training-visit rows.
pub fn alignment_loss<'t>(health: Var<'t>, meds: Var<'t>, keys: Var<'t>, values: Var<'t>, tau: f64) -> Result<Var<'t>> {
    Ok(info_nce(health, keys, tau)?.add(info_nce(meds, values, tau)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub multi: f64,
    pub ddi: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            multi: 0.1,
            ddi: 0.01,
            aux: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("multi", self.multi), ("ddi", self.ddi), ("aux", self.aux)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("loss weight `{name}` must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar components of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub bce: Var<'t>,
    pub multi: Var<'t>,
    pub ddi: Var<'t>,
    pub align: Var<'t>,
    pub orth: Var<'t>,
}

/// `bce + multi·w_multi + ddi·w_ddi + aux·(align + orth)`.
pub fn total_loss<'t>(terms: &LossTerms<'t>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    Ok(terms
        .bce
        .add(terms.multi.scale(w.multi))
        .add(terms.ddi.scale(w.ddi))
        .add(terms.align.add(terms.orth).scale(w.aux)))
}
