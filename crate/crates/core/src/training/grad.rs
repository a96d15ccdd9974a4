//! Batch loss and its exact gradient with respect to every model parameter.
//!
//! The backward pass runs per word: upstream gradients on mapped vectors are
//! pushed back through the reflector chain, the unit normalization of the
//! calibrated vector, the activation and the adapter matrix. Reflector inputs
//! are recovered by reflecting the outputs again (each `H(v)` is an
//! involution), so no per-step activations are stored.
//!
//! CSLS penalties and negative indices are constants here.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::loss::{mse_loss, rank_loss, sigmoid, softplus};
use super::negatives::NegativeSet;
use crate::embio::{ContextualTable, EmbeddingTable};
use crate::error::{Error, Result};
use crate::mapping::{apply_units, Adapter, AlignmentModel, HouseholderChain, Side};

/// Names of the parameter blocks, in [`AlignmentModel::blocks`] order.
pub const BLOCK_NAMES: [&str; 4] = ["W_s", "W_t", "V_s", "U_t"];

const WORD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// CSLS penalties for every source and target word, frozen for the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub r_src: Array1<f64>,
    pub r_tgt: Array1<f64>,
}

/// Embedding and contextual tables of both languages.
#[derive(Debug, Clone, Copy)]
pub struct Tables<'a> {
    pub src: &'a EmbeddingTable,
    pub src_ctx: &'a ContextualTable,
    pub tgt: &'a EmbeddingTable,
    pub tgt_ctx: &'a ContextualTable,
}

impl<'a> Tables<'a> {
    pub fn side(&self, side: Side) -> (&'a EmbeddingTable, &'a ContextualTable) {
        match side {
            Side::Source => (self.src, self.src_ctx),
            Side::Target => (self.tgt, self.tgt_ctx),
        }
    }
}

/// Gradient blocks shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: [Array2<f64>; 4],
}

impl ModelGrads {
    pub fn zeros_like(model: &AlignmentModel) -> Self {
        Self {
            blocks: model.blocks().map(|b| Array2::zeros(b.raw_dim())),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self) -> Result<()> {
        for (b, name) in self.blocks.iter().zip(BLOCK_NAMES) {
            if !b.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in block {name}")));
            }
        }
        Ok(())
    }
}

fn squared_norm(model: &AlignmentModel) -> f64 {
    model.blocks().iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Batch loss, computed directly from mapped vectors.
///
/// `(1/l) Σ (rank_loss + λ1 · distance) + λ2 · Σ ‖block‖²_F` over the `l`
/// pairs of the batch.
pub fn total_loss(
    model: &AlignmentModel,
    tables: &Tables<'_>,
    pairs: &[(usize, usize)],
    negatives: &NegativeSet,
    penalties: &Penalties,
    weights: LossWeights,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyLexicon("empty batch".into()));
    }
    let mut sum = 0.0;
    for &(s, t) in pairs {
        let negs = negatives.for_source(s)?;
        let x = model.forward_map(Side::Source, &[s], tables.src, tables.src_ctx)?;
        let y = model.forward_map(Side::Target, &[t], tables.tgt, tables.tgt_ctx)?;
        let yn = model.forward_map(Side::Target, negs, tables.tgt, tables.tgt_ctx)?;
        let r_neg: Vec<f64> = negs.iter().map(|&n| penalties.r_tgt[n]).collect();
        sum += rank_loss(
            x.row(0),
            y.row(0),
            yn.view(),
            penalties.r_src[s],
            penalties.r_tgt[t],
            &r_neg,
        );
        sum += weights.lambda1 * mse_loss(x.row(0), y.row(0));
    }
    Ok(sum / pairs.len() as f64 + weights.lambda2 * squared_norm(model))
}

pub fn gradients(
    model: &AlignmentModel,
    tables: &Tables<'_>,
    pairs: &[(usize, usize)],
    negatives: &NegativeSet,
    penalties: &Penalties,
    weights: LossWeights,
) -> Result<ModelGrads> {
    Ok(loss_and_gradients(model, tables, pairs, negatives, penalties, weights)?.1)
}

/// Batch loss together with its gradient.
pub fn loss_and_gradients(
    model: &AlignmentModel,
    tables: &Tables<'_>,
    pairs: &[(usize, usize)],
    negatives: &NegativeSet,
    penalties: &Penalties,
    weights: LossWeights,
) -> Result<(f64, ModelGrads)> {
    if pairs.is_empty() {
        return Err(Error::EmptyLexicon("empty batch".into()));
    }
    let l = pairs.len() as f64;

    let mut src_ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    src_ids.sort_unstable();
    src_ids.dedup();
    let mut tgt_ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    for &s in &src_ids {
        tgt_ids.extend_from_slice(negatives.for_source(s)?);
    }
    tgt_ids.sort_unstable();
    tgt_ids.dedup();

    let xs = model.forward_map(Side::Source, &src_ids, tables.src, tables.src_ctx)?;
    let ys = model.forward_map(Side::Target, &tgt_ids, tables.tgt, tables.tgt_ctx)?;
    let src_pos: HashMap<usize, usize> = src_ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let tgt_pos: HashMap<usize, usize> = tgt_ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();

    let mut gx = Array2::<f64>::zeros(xs.raw_dim());
    let mut gy = Array2::<f64>::zeros(ys.raw_dim());
    let mut loss = 0.0;
    for &(s, t) in pairs {
        let negs = negatives.for_source(s)?;
        let k = negs.len() as f64;
        let (ps, pt) = (src_pos[&s], tgt_pos[&t]);
        let x = xs.row(ps);
        let y = ys.row(pt);
        let r_x = penalties.r_src[s];
        let pos = 2.0 * x.dot(&y) - r_x - penalties.r_tgt[t];
        for &n in negs {
            let pn = tgt_pos[&n];
            let yn = ys.row(pn);
            let margin = pos - (2.0 * x.dot(&yn) - r_x - penalties.r_tgt[n]);
            loss += softplus(-margin) / k;
            // d/dmargin of softplus(-margin) = -σ(-margin)
            let c = -2.0 * sigmoid(-margin) / (k * l);
            gx.row_mut(ps).scaled_add(c, &(&y - &yn));
            gy.row_mut(pt).scaled_add(c, &x);
            gy.row_mut(pn).scaled_add(-c, &x);
        }
        let diff = &x - &y;
        let dist = diff.dot(&diff).sqrt();
        loss += weights.lambda1 * dist;
        if dist > 0.0 {
            let c = weights.lambda1 / (l * dist);
            gx.row_mut(ps).scaled_add(c, &diff);
            gy.row_mut(pt).scaled_add(-c, &diff);
        }
    }
    loss = loss / l + weights.lambda2 * squared_norm(model);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }

    let (dw_s, dv_s) = backprop_side(
        &model.src_adapter,
        &model.src_chain,
        tables.src,
        tables.src_ctx,
        &src_ids,
        gx.view(),
    )?;
    let (dw_t, dv_t) = backprop_side(
        &model.tgt_adapter,
        &model.tgt_chain,
        tables.tgt,
        tables.tgt_ctx,
        &tgt_ids,
        gy.view(),
    )?;
    let mut grads = ModelGrads {
        blocks: [dw_s, dw_t, dv_s, dv_t],
    };
    if weights.lambda2 != 0.0 {
        for (g, p) in grads.blocks.iter_mut().zip(model.blocks()) {
            g.scaled_add(2.0 * weights.lambda2, &p);
        }
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Gradients of one side's adapter weight and raw reflectors, given the
/// gradient of the loss with respect to each mapped row.
fn backprop_side(
    adapter: &Adapter,
    chain: &HouseholderChain,
    emb: &EmbeddingTable,
    ctx: &ContextualTable,
    ids: &[usize],
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = adapter.dim();
    let (units, norms) = chain.unit_vectors();
    let n = units.nrows();

    let partials: Vec<(Array2<f64>, Array2<f64>)> = ids
        .par_chunks(WORD_CHUNK)
        .zip(upstream.axis_chunks_iter(Axis(0), WORD_CHUNK).into_par_iter())
        .map(|(chunk, g_chunk)| -> Result<_> {
            let mut dv = Array2::<f64>::zeros((n, d));
            let mut g_pre = Array2::<f64>::zeros((chunk.len(), d));
            let mut bars = Array2::<f64>::zeros((chunk.len(), d));
            for (r, (&i, g_row)) in chunk.iter().zip(g_chunk.rows()).enumerate() {
                let trace = adapter.calibrate_traced(emb.row(i), ctx.row(i))?;
                let mut z = trace.out.clone();
                apply_units(units.view(), z.as_slice_mut().unwrap());
                let mut g = g_row.to_owned();
                chain_backward(units.view(), &mut z, &mut g, &mut dv);

                // through x̃ = u / ‖u‖
                let x_t = &trace.out;
                let radial = g.dot(x_t);
                let mut gu = (&g - &(x_t * radial)) / trace.raw_norm;
                gu.iter_mut()
                    .zip(&trace.pre)
                    .for_each(|(gi, &p)| *gi *= adapter.activation.derivative(p));
                g_pre.row_mut(r).assign(&gu);
                bars.row_mut(r).assign(&ctx.row(i));
            }
            let dw = g_pre.t().dot(&bars);
            Ok((dw, dv))
        })
        .collect::<Result<_>>()?;

    let mut dw = Array2::<f64>::zeros((d, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    for (pw, pv) in partials {
        dw += &pw;
        dv += &pv;
    }
    // v = w / ‖w‖  =>  dL/dw = (I - v vᵀ) dL/dv / ‖w‖
    for ((mut row, v), &norm) in dv.rows_mut().into_iter().zip(units.rows()).zip(&norms) {
        let along = row.dot(&v);
        row.scaled_add(-along, &v);
        row /= norm;
    }
    Ok((dw, dv))
}

/// Walk the chain from output back to input. On entry `z` is the chain output
/// and `g` the gradient there; on exit they are the chain input and its
/// gradient. Gradients with respect to the unit reflectors accumulate in `dv`.
fn chain_backward(units: ArrayView2<'_, f64>, z: &mut Array1<f64>, g: &mut Array1<f64>, dv: &mut Array2<f64>) {
    // Row 0 is applied last, so it is undone first.
    for (v, mut dv_row) in units.rows().into_iter().zip(dv.rows_mut()) {
        undo_reflection(v, z);
        let gv = g.dot(&v);
        let zv = z.dot(&v);
        dv_row.scaled_add(-2.0 * gv, z);
        dv_row.scaled_add(-2.0 * zv, g);
        g.scaled_add(-2.0 * gv, &v);
    }
}

#[inline]
fn undo_reflection(v: ArrayView1<'_, f64>, z: &mut Array1<f64>) {
    let zv = z.dot(&v);
    z.scaled_add(-2.0 * zv, &v);
}
