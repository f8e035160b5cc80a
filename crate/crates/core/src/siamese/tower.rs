//! One tower of the twin network: forward pass with a saved trace, and the
//! matching backward pass.
//!
//! Sequences are processed at their real length; padding positions are
//! masked out entirely, which is equivalent to running over a padded input
//! with a mask.

use super::layout::{Layout, LstmSeg, Seg};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += W x` for row-major `W`.
#[inline]
fn matvec_add(w: &[f64], cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, yr) in y.iter_mut().enumerate() {
        *yr += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `dx += Wᵀ dy` and `dW += dy xᵀ`.
#[inline]
fn linear_backward(w: &[f64], dw: &mut [f64], cols: usize, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, &mut dw[r * cols..(r + 1) * cols]);
        }
    }
    if let Some(dx) = dx {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[r * cols..(r + 1) * cols], dx);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Saved activations of one LSTM direction, in processing order.
#[derive(Clone, Debug, Default)]
pub(crate) struct LstmTrace {
    /// Token ids in processing order.
    ids: Vec<u32>,
    /// Post-activation gates `[i f g o]`, `steps × 4H`.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmTrace {
    fn h_at(&self, step: usize, hidden: usize) -> &[f64] {
        &self.h[step * hidden..(step + 1) * hidden]
    }
}

fn lstm_forward(p: &[f64], seg: &LstmSeg, emb: &Seg, ids: Vec<u32>, hidden: usize) -> LstmTrace {
    let steps = ids.len();
    let e = emb.cols;
    let g4 = 4 * hidden;
    let w_ih = seg.w_ih.slice(p);
    let w_hh = seg.w_hh.slice(p);
    let bias = seg.b.slice(p);
    let mut tr = LstmTrace {
        gates: vec![0.0; steps * g4],
        c: vec![0.0; steps * hidden],
        h: vec![0.0; steps * hidden],
        tanh_c: vec![0.0; steps * hidden],
        ids,
    };
    let zeros = vec![0.0; hidden];
    let mut pre = vec![0.0; g4];
    for s in 0..steps {
        let x = emb.row(p, tr.ids[s] as usize);
        pre.copy_from_slice(bias);
        matvec_add(w_ih, e, x, &mut pre);
        {
            let h_prev = if s == 0 {
                &zeros[..]
            } else {
                &tr.h[(s - 1) * hidden..s * hidden]
            };
            matvec_add(w_hh, hidden, h_prev, &mut pre);
        }
        let gates = &mut tr.gates[s * g4..(s + 1) * g4];
        for k in 0..hidden {
            gates[k] = sigmoid(pre[k]);
            gates[hidden + k] = sigmoid(pre[hidden + k]);
            gates[2 * hidden + k] = pre[2 * hidden + k].tanh();
            gates[3 * hidden + k] = sigmoid(pre[3 * hidden + k]);
        }
        for k in 0..hidden {
            let c_prev = if s == 0 { 0.0 } else { tr.c[(s - 1) * hidden + k] };
            let c = gates[hidden + k] * c_prev + gates[k] * gates[2 * hidden + k];
            let tc = c.tanh();
            tr.c[s * hidden + k] = c;
            tr.tanh_c[s * hidden + k] = tc;
            tr.h[s * hidden + k] = gates[3 * hidden + k] * tc;
        }
    }
    tr
}

/// `dh_ext` holds the loss gradient w.r.t. each step's hidden output, in
/// processing order.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    p: &[f64],
    g: &mut [f64],
    seg: &LstmSeg,
    emb: &Seg,
    tr: &LstmTrace,
    dh_ext: &[f64],
    hidden: usize,
    train_embeddings: bool,
) {
    let steps = tr.ids.len();
    let e = emb.cols;
    let g4 = 4 * hidden;
    let zeros = vec![0.0; hidden];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut da = vec![0.0; g4];
    let mut dx = vec![0.0; e];
    for s in (0..steps).rev() {
        let gates = &tr.gates[s * g4..(s + 1) * g4];
        for k in 0..hidden {
            let (i, f, gg, o) = (
                gates[k],
                gates[hidden + k],
                gates[2 * hidden + k],
                gates[3 * hidden + k],
            );
            let dh = dh_ext[s * hidden + k] + dh_next[k];
            let tc = tr.tanh_c[s * hidden + k];
            let c_prev = if s == 0 { 0.0 } else { tr.c[(s - 1) * hidden + k] };
            let d_o = dh * tc;
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            let di = dc * gg;
            let dg = dc * i;
            let df = dc * c_prev;
            dc_next[k] = dc * f;
            da[k] = di * i * (1.0 - i);
            da[hidden + k] = df * f * (1.0 - f);
            da[2 * hidden + k] = dg * (1.0 - gg * gg);
            da[3 * hidden + k] = d_o * o * (1.0 - o);
        }
        let x = emb.row(p, tr.ids[s] as usize);
        let h_prev = if s == 0 { &zeros[..] } else { tr.h_at(s - 1, hidden) };
        axpy(1.0, &da, seg.b.slice_mut(g));
        dx.fill(0.0);
        linear_backward(
            seg.w_ih.slice(p),
            seg.w_ih.slice_mut(g),
            e,
            x,
            &da,
            if train_embeddings { Some(&mut dx) } else { None },
        );
        dh_next.fill(0.0);
        linear_backward(
            seg.w_hh.slice(p),
            seg.w_hh.slice_mut(g),
            hidden,
            h_prev,
            &da,
            Some(&mut dh_next),
        );
        if train_embeddings {
            axpy(1.0, &dx, emb.row_mut(g, tr.ids[s] as usize));
        }
    }
}

#[derive(Clone, Debug, Default)]
struct AttentionTrace {
    /// `tanh(W h_t + b)`, `steps × A`.
    u: Vec<f64>,
    alpha: Vec<f64>,
}

/// Everything the backward pass needs from one tower evaluation.
#[derive(Clone, Debug, Default)]
pub(crate) struct TowerTrace {
    fw: LstmTrace,
    bw: LstmTrace,
    /// Concatenated `[h_fw(t), h_bw(t)]` per position, `steps × 2H`.
    seq: Vec<f64>,
    att: Option<AttentionTrace>,
    pooled: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn forward(layout: &Layout, p: &[f64], ids: &[u32]) -> TowerTrace {
    let hdim = layout.hidden;
    let steps = ids.len();
    let fw = lstm_forward(p, &layout.fw, &layout.emb, ids.to_vec(), hdim);
    let bw = lstm_forward(p, &layout.bw, &layout.emb, ids.iter().rev().copied().collect(), hdim);

    let two_h = 2 * hdim;
    let mut seq = vec![0.0; steps * two_h];
    for t in 0..steps {
        seq[t * two_h..t * two_h + hdim].copy_from_slice(fw.h_at(t, hdim));
        seq[t * two_h + hdim..(t + 1) * two_h].copy_from_slice(bw.h_at(steps - 1 - t, hdim));
    }

    let mut pooled = vec![0.0; two_h];
    let att = match &layout.att {
        Some(a) if steps > 0 => {
            let units = a.w.rows;
            let (w, b, v) = (a.w.slice(p), a.b.slice(p), a.v.slice(p));
            let mut u = vec![0.0; steps * units];
            let mut scores = vec![0.0; steps];
            for t in 0..steps {
                let ut = &mut u[t * units..(t + 1) * units];
                ut.copy_from_slice(b);
                matvec_add(w, two_h, &seq[t * two_h..(t + 1) * two_h], ut);
                for x in ut.iter_mut() {
                    *x = x.tanh();
                }
                scores[t] = dot(v, ut);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut alpha: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = alpha.iter().sum();
            for x in &mut alpha {
                *x /= z;
            }
            for t in 0..steps {
                axpy(alpha[t], &seq[t * two_h..(t + 1) * two_h], &mut pooled);
            }
            Some(AttentionTrace { u, alpha })
        }
        _ => {
            if steps > 0 {
                pooled[..hdim].copy_from_slice(fw.h_at(steps - 1, hdim));
                pooled[hdim..].copy_from_slice(bw.h_at(steps - 1, hdim));
            }
            None
        }
    };

    let mut z1 = layout.d1b.slice(p).to_vec();
    matvec_add(layout.d1w.slice(p), two_h, &pooled, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|&x| x.max(0.0)).collect();
    let mut out = layout.d2b.slice(p).to_vec();
    matvec_add(layout.d2w.slice(p), layout.d2w.cols, &a1, &mut out);

    TowerTrace {
        fw,
        bw,
        seq,
        att,
        pooled,
        z1,
        a1,
        out,
    }
}

/// Accumulates the gradient of the loss into `g`, given `dout`, the loss
/// gradient w.r.t. this tower's output.
pub(crate) fn backward(
    layout: &Layout,
    p: &[f64],
    g: &mut [f64],
    tr: &TowerTrace,
    dout: &[f64],
    train_embeddings: bool,
) {
    let hdim = layout.hidden;
    let two_h = 2 * hdim;
    let steps = tr.fw.ids.len();

    axpy(1.0, dout, layout.d2b.slice_mut(g));
    let mut da1 = vec![0.0; tr.a1.len()];
    linear_backward(
        layout.d2w.slice(p),
        layout.d2w.slice_mut(g),
        layout.d2w.cols,
        &tr.a1,
        dout,
        Some(&mut da1),
    );
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&tr.z1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    axpy(1.0, &dz1, layout.d1b.slice_mut(g));
    let mut dpooled = vec![0.0; two_h];
    linear_backward(
        layout.d1w.slice(p),
        layout.d1w.slice_mut(g),
        two_h,
        &tr.pooled,
        &dz1,
        Some(&mut dpooled),
    );

    if steps == 0 {
        return;
    }
    // gradient w.r.t. each position's concatenated hidden state
    let mut dseq = vec![0.0; steps * two_h];
    match (&layout.att, &tr.att) {
        (Some(a), Some(at)) => {
            let units = a.w.rows;
            let dalpha: Vec<f64> = (0..steps)
                .map(|t| dot(&dpooled, &tr.seq[t * two_h..(t + 1) * two_h]))
                .collect();
            let mean: f64 = at.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let (v, w) = (a.v.slice(p), a.w.slice(p));
            let mut dz = vec![0.0; units];
            for t in 0..steps {
                let ds = at.alpha[t] * (dalpha[t] - mean);
                let ut = &at.u[t * units..(t + 1) * units];
                axpy(ds, ut, a.v.slice_mut(g));
                for k in 0..units {
                    dz[k] = ds * v[k] * (1.0 - ut[k] * ut[k]);
                }
                axpy(1.0, &dz, a.b.slice_mut(g));
                let dst = &mut dseq[t * two_h..(t + 1) * two_h];
                axpy(at.alpha[t], &dpooled, dst);
                linear_backward(
                    w,
                    a.w.slice_mut(g),
                    two_h,
                    &tr.seq[t * two_h..(t + 1) * two_h],
                    &dz,
                    Some(dst),
                );
            }
        }
        _ => {
            let last = steps - 1;
            dseq[last * two_h..last * two_h + hdim].copy_from_slice(&dpooled[..hdim]);
            // the backward direction finishes at position 0
            dseq[hdim..two_h].copy_from_slice(&dpooled[hdim..]);
        }
    }

    let mut dh_fw = vec![0.0; steps * hdim];
    let mut dh_bw = vec![0.0; steps * hdim];
    for t in 0..steps {
        dh_fw[t * hdim..(t + 1) * hdim].copy_from_slice(&dseq[t * two_h..t * two_h + hdim]);
        let s = steps - 1 - t;
        dh_bw[s * hdim..(s + 1) * hdim].copy_from_slice(&dseq[t * two_h + hdim..(t + 1) * two_h]);
    }
    lstm_backward(p, g, &layout.fw, &layout.emb, &tr.fw, &dh_fw, hdim, train_embeddings);
    lstm_backward(p, g, &layout.bw, &layout.emb, &tr.bw, &dh_bw, hdim, train_embeddings);
}
