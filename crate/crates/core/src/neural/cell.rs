use super::{sigmoid, Activation, GruParams, LstmParams};
use crate::error::{shape, Result};
use crate::numeric::Tensor;

/// `out += v · M` with `M` row-major `v.len() × out.len()`.
#[inline]
pub(crate) fn vec_mat_acc(out: &mut [f64], v: &[f64], m: &[f64]) {
    let cols = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        for (o, w) in out.iter_mut().zip(row) {
            *o += vi * w;
        }
    }
}

/// `out[i] += Σ_j M[i, j] · v[j]`.
#[inline]
pub(crate) fn mat_vec_acc(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `M += a ⊗ b`.
#[inline]
pub(crate) fn outer_acc(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut m[i * cols..(i + 1) * cols];
        for (r, bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

#[inline]
fn acc(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn affine(b: &Tensor, x: &[f64], w: &Tensor, h: &[f64], u: &Tensor) -> Vec<f64> {
    let mut out = b.values().to_vec();
    vec_mat_acc(&mut out, x, w.values());
    vec_mat_acc(&mut out, h, u.values());
    out
}

/// Intermediates of one LSTM step.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g_pre: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub c_act: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn lstm_forward(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    act: Activation,
) -> LstmCache {
    let mut i = affine(&p.b_i, x, &p.w_xi, h_prev, &p.w_hi);
    let mut f = affine(&p.b_f, x, &p.w_xf, h_prev, &p.w_hf);
    let mut o = affine(&p.b_o, x, &p.w_xo, h_prev, &p.w_ho);
    let g_pre = affine(&p.b_g, x, &p.w_xg, h_prev, &p.w_hg);
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    o.iter_mut().for_each(|v| *v = sigmoid(*v));
    let g: Vec<f64> = g_pre.iter().map(|&v| act.apply(v)).collect();
    let c: Vec<f64> = (0..g.len()).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let c_act: Vec<f64> = c.iter().map(|&v| act.apply(v)).collect();
    let h: Vec<f64> = o.iter().zip(&c_act).map(|(a, b)| a * b).collect();
    LstmCache {
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        o,
        g_pre,
        g,
        c,
        c_act,
        h,
    }
}

/// Accumulates one step's parameter gradients into `grads` and returns
/// `(dh_prev, dc_prev)`.
pub(crate) fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    x: &[f64],
    dh: &[f64],
    dc_next: &[f64],
    act: Activation,
    grads: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>) {
    let n = dh.len();
    let mut da_i = vec![0.0; n];
    let mut da_f = vec![0.0; n];
    let mut da_o = vec![0.0; n];
    let mut da_g = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let d_o = dh[k] * cache.c_act[k];
        let dc = dc_next[k] + dh[k] * cache.o[k] * act.derivative(cache.c[k], cache.c_act[k]);
        let d_f = dc * cache.c_prev[k];
        let d_i = dc * cache.g[k];
        let d_g = dc * cache.i[k];
        dc_prev[k] = dc * cache.f[k];
        da_i[k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
        da_f[k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
        da_o[k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
        da_g[k] = d_g * act.derivative(cache.g_pre[k], cache.g[k]);
    }
    let gates = [
        (&da_i, &p.w_hi, &mut grads.w_xi, &mut grads.w_hi, &mut grads.b_i),
        (&da_f, &p.w_hf, &mut grads.w_xf, &mut grads.w_hf, &mut grads.b_f),
        (&da_o, &p.w_ho, &mut grads.w_xo, &mut grads.w_ho, &mut grads.b_o),
        (&da_g, &p.w_hg, &mut grads.w_xg, &mut grads.w_hg, &mut grads.b_g),
    ];
    let mut dh_prev = vec![0.0; n];
    for (da, w_h, g_wx, g_wh, g_b) in gates {
        outer_acc(g_wx.values_mut(), x, da);
        outer_acc(g_wh.values_mut(), &cache.h_prev, da);
        acc(g_b.values_mut(), da);
        mat_vec_acc(&mut dh_prev, w_h.values(), da);
    }
    (dh_prev, dc_prev)
}

/// Intermediates of one GRU step.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub rh: Vec<f64>,
    pub c_pre: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn gru_forward(p: &GruParams, x: &[f64], h_prev: &[f64], act: Activation) -> GruCache {
    let mut z = affine(&p.b_z, x, &p.w_z, h_prev, &p.u_z);
    let mut r = affine(&p.b_r, x, &p.w_r, h_prev, &p.u_r);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let c_pre = affine(&p.b_c, x, &p.w_c, &rh, &p.u_c);
    let c: Vec<f64> = c_pre.iter().map(|&v| act.apply(v)).collect();
    let h: Vec<f64> = (0..c.len())
        .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
        .collect();
    GruCache {
        h_prev: h_prev.to_vec(),
        z,
        r,
        rh,
        c_pre,
        c,
        h,
    }
}

/// Accumulates one step's parameter gradients and returns `dh_prev`.
pub(crate) fn gru_backward(
    p: &GruParams,
    cache: &GruCache,
    x: &[f64],
    dh: &[f64],
    act: Activation,
    grads: &mut GruParams,
) -> Vec<f64> {
    let n = dh.len();
    let mut dh_prev: Vec<f64> = (0..n).map(|k| dh[k] * (1.0 - cache.z[k])).collect();
    let mut da_z = vec![0.0; n];
    let mut da_c = vec![0.0; n];
    for k in 0..n {
        let dz = dh[k] * (cache.c[k] - cache.h_prev[k]);
        da_z[k] = dz * cache.z[k] * (1.0 - cache.z[k]);
        da_c[k] = dh[k] * cache.z[k] * act.derivative(cache.c_pre[k], cache.c[k]);
    }
    outer_acc(grads.w_c.values_mut(), x, &da_c);
    outer_acc(grads.u_c.values_mut(), &cache.rh, &da_c);
    acc(grads.b_c.values_mut(), &da_c);

    let mut drh = vec![0.0; n];
    mat_vec_acc(&mut drh, p.u_c.values(), &da_c);
    let mut da_r = vec![0.0; n];
    for k in 0..n {
        dh_prev[k] += drh[k] * cache.r[k];
        da_r[k] = drh[k] * cache.h_prev[k] * cache.r[k] * (1.0 - cache.r[k]);
    }

    outer_acc(grads.w_z.values_mut(), x, &da_z);
    outer_acc(grads.u_z.values_mut(), &cache.h_prev, &da_z);
    acc(grads.b_z.values_mut(), &da_z);
    outer_acc(grads.w_r.values_mut(), x, &da_r);
    outer_acc(grads.u_r.values_mut(), &cache.h_prev, &da_r);
    acc(grads.b_r.values_mut(), &da_r);
    mat_vec_acc(&mut dh_prev, p.u_z.values(), &da_z);
    mat_vec_acc(&mut dh_prev, p.u_r.values(), &da_r);
    dh_prev
}

fn check_len(what: &str, t: &Tensor, n: usize) -> Result<()> {
    if t.shape() != [n] {
        return Err(shape(format!("{what} must have shape [{n}], got {:?}", t.shape())));
    }
    Ok(())
}

/// One LSTM step; returns `(h_t, c_t)`.
pub fn lstm_step(
    p: &LstmParams,
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    act: Activation,
) -> Result<(Tensor, Tensor)> {
    let (d, h) = p.dims()?;
    check_len("x_t", x_t, d)?;
    check_len("h_prev", h_prev, h)?;
    check_len("c_prev", c_prev, h)?;
    let cache = lstm_forward(p, x_t.values(), h_prev.values(), c_prev.values(), act);
    Ok((Tensor::from_vec(cache.h), Tensor::from_vec(cache.c)))
}

/// One GRU step; returns `h_t`.
pub fn gru_step(p: &GruParams, x_t: &Tensor, h_prev: &Tensor, act: Activation) -> Result<Tensor> {
    let (d, h) = p.dims()?;
    check_len("x_t", x_t, d)?;
    check_len("h_prev", h_prev, h)?;
    Ok(Tensor::from_vec(gru_forward(p, x_t.values(), h_prev.values(), act).h))
}
