//! Parameterized layers recorded on a [`Tape`].

use super::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// Gated recurrent unit with fused gate matrices.
///
/// Gate rows are ordered update (`z`), reset (`r`), candidate (`n`):
///
/// ```text
/// z  = σ(W_z x + b_z + U_z h + c_z)
/// r  = σ(W_r x + b_r + U_r h + c_r)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[3·hidden × input]`
    pub w_ih: ParamId,
    /// `[3·hidden × hidden]`
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl GruParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(GruParams {
            input_dim,
            hidden_dim,
            w_ih: store.add_xavier(format!("{prefix}.w_ih"), 3 * hidden_dim, input_dim, rng)?,
            w_hh: store.add_xavier(format!("{prefix}.w_hh"), 3 * hidden_dim, hidden_dim, rng)?,
            b_ih: store.add_zeros(format!("{prefix}.b_ih"), &[3 * hidden_dim])?,
            b_hh: store.add_zeros(format!("{prefix}.b_hh"), &[3 * hidden_dim])?,
        })
    }
}

/// One GRU step over a batch: `x[B × input]`, `h[B × hidden]` → `[B × hidden]`.
pub fn gru_cell_step<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &GruParams,
    x: Var,
    h: Var,
) -> Result<Var> {
    let (bx, dx) = tape.dims(x);
    let (bh, dh) = tape.dims(h);
    if dx != p.input_dim || dh != p.hidden_dim || bx != bh {
        return Err(shape_err!(
            "gru expects x[B×{}], h[B×{}]; got x[{bx}×{dx}], h[{bh}×{dh}]",
            p.input_dim,
            p.hidden_dim
        ));
    }
    let hd = p.hidden_dim;
    let w_ih = tape.param(store, p.w_ih);
    let w_hh = tape.param(store, p.w_hh);
    let b_ih = tape.param(store, p.b_ih);
    let b_hh = tape.param(store, p.b_hh);
    let gx = tape.matmul_t(x, w_ih);
    let gx = tape.add_row(gx, b_ih);
    let gh = tape.matmul_t(h, w_hh);
    let gh = tape.add_row(gh, b_hh);

    let gx_z = tape.slice_cols(gx, 0, hd);
    let gh_z = tape.slice_cols(gh, 0, hd);
    let z = tape.add(gx_z, gh_z);
    let z = tape.sigmoid(z);

    let gx_r = tape.slice_cols(gx, hd, hd);
    let gh_r = tape.slice_cols(gh, hd, hd);
    let r = tape.add(gx_r, gh_r);
    let r = tape.sigmoid(r);

    let gx_n = tape.slice_cols(gx, 2 * hd, hd);
    let gh_n = tape.slice_cols(gh, 2 * hd, hd);
    let rn = tape.mul(r, gh_n);
    let n = tape.add(gx_n, rn);
    let n = tape.tanh(n);

    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(h, n);
    let zd = tape.mul(z, diff);
    Ok(tape.add(n, zd))
}

/// `x · Wᵀ (+ b)` with `W[out × in]`.
pub fn linear<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    w: ParamId,
    b: Option<ParamId>,
    x: Var,
) -> Var {
    let wv = tape.param(store, w);
    let y = tape.matmul_t(x, wv);
    match b {
        Some(b) => {
            let bv = tape.param(store, b);
            tape.add_row(y, bv)
        }
        None => y,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add_filled(format!("{prefix}.gamma"), &[dim], F::one())?,
            beta: store.add_zeros(format!("{prefix}.beta"), &[dim])?,
        })
    }
}

pub fn layer_norm<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &LayerNormParams,
    x: Var,
) -> Var {
    let g = tape.param(store, p.gamma);
    let b = tape.param(store, p.beta);
    tape.layer_norm(x, g, b)
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub d_model: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MhaParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(invalid!("d_model {d_model} not divisible by {heads} heads"));
        }
        Ok(MhaParams {
            d_model,
            heads,
            w_q: store.add_xavier(format!("{prefix}.w_q"), d_model, d_model, rng)?,
            w_k: store.add_xavier(format!("{prefix}.w_k"), d_model, d_model, rng)?,
            w_v: store.add_xavier(format!("{prefix}.w_v"), d_model, d_model, rng)?,
            w_o: store.add_xavier(format!("{prefix}.w_o"), d_model, d_model, rng)?,
        })
    }
}

/// Attention of `queries[n×d]` over `keys_values[m×d]`.
///
/// `mask`, when given, is row-major `n × m`; `false` blocks a key for a query.
/// Every query row must keep at least one key.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &MhaParams,
    queries: Var,
    keys_values: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (n, dq) = tape.dims(queries);
    let (m, dk) = tape.dims(keys_values);
    if dq != p.d_model || dk != p.d_model {
        return Err(shape_err!(
            "attention expects width {}, got queries {dq}, keys {dk}",
            p.d_model
        ));
    }
    if p.d_model % p.heads != 0 {
        return Err(invalid!("d_model {} not divisible by {} heads", p.d_model, p.heads));
    }
    if m == 0 {
        return Err(invalid!("attention over zero keys"));
    }
    if let Some(mask) = mask {
        if mask.len() != n * m {
            return Err(shape_err!("attention mask has {} entries, need {}", mask.len(), n * m));
        }
        if let Some(r) = (0..n).find(|&r| !mask[r * m..(r + 1) * m].iter().any(|&b| b)) {
            return Err(invalid!("query row {r} has no unmasked key"));
        }
    }
    let dh = p.d_model / p.heads;
    let q = linear(tape, store, p.w_q, None, queries);
    let k = linear(tape, store, p.w_k, None, keys_values);
    let v = linear(tape, store, p.w_v, None, keys_values);
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores, mask);
        outs.push(tape.matmul(attn, vh));
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    Ok(linear(tape, store, p.w_o, None, cat))
}

/// Position-wise `W₂ · relu(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(FeedForwardParams {
            w1: store.add_xavier(format!("{prefix}.w1"), d_ff, d_model, rng)?,
            b1: store.add_zeros(format!("{prefix}.b1"), &[d_ff])?,
            w2: store.add_xavier(format!("{prefix}.w2"), d_model, d_ff, rng)?,
            b2: store.add_zeros(format!("{prefix}.b2"), &[d_model])?,
        })
    }
}

pub fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &FeedForwardParams,
    x: Var,
) -> Var {
    let h = linear(tape, store, p.w1, Some(p.b1), x);
    let h = tape.relu(h);
    linear(tape, store, p.w2, Some(p.b2), h)
}

/// Fixed sinusoidal position table `[len × d]`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            data.push(F::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

/// Row-major `n × n` mask letting position `i` see positions `≤ i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_gru(store: &mut ParamStore<f64>, i: usize, h: usize) -> GruParams {
        let mut rng = Rng::new(0);
        let p = GruParams::new(store, "g", i, h, &mut rng).unwrap();
        for id in [p.w_ih, p.w_hh] {
            let t = store.get(id).clone();
            store.set(id, Tensor::zeros(t.shape().to_vec())).unwrap();
        }
        p
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let mut store = ParamStore::<f64>::new();
        let p = zero_gru(&mut store, 3, 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 3], &[0.3, -1.0, 2.0]).unwrap());
        let h = tape.constant(Tensor::from_f64(vec![1, 4], &[1.0, -2.0, 0.5, 8.0]).unwrap());
        let out = gru_cell_step(&mut tape, &store, &p, x, h).unwrap();
        assert_eq!(tape.data(out), &[0.5, -1.0, 0.25, 4.0]);
    }

    #[test]
    fn gru_rejects_bad_shapes_and_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(1);
        let p = GruParams::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let run = |store: &ParamStore<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let h = tape.constant(Tensor::vector(vec![0.5, -0.5, 0.1, 0.0]));
            let out = gru_cell_step(&mut tape, store, &p, x, h).unwrap();
            tape.data(out).to_vec()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let h = tape.constant(Tensor::vector(vec![0.5, -0.5, 0.1, 0.0]));
        assert!(gru_cell_step(&mut tape, &store, &p, x, h).is_err());
    }

    fn identity(store: &mut ParamStore<f64>, id: ParamId, d: usize) {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        store.set(id, Tensor::new(vec![d, d], data).unwrap()).unwrap();
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        let p = MhaParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_f64(vec![3, 4], &[0.3; 12]).unwrap());
        let kv = tape.constant(Tensor::from_f64(vec![1, 4], &[1.0, -1.0, 0.5, 2.0]).unwrap());
        let out = multi_head_attention(&mut tape, &store, &p, q, kv, None).unwrap();
        let v = linear(&mut tape, &store, p.w_v, None, kv);
        let expected = linear(&mut tape, &store, p.w_o, None, v);
        for r in 0..3 {
            for c in 0..4 {
                let a = tape.data(out)[r * 4 + c];
                let b = tape.data(expected)[c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_mask_selects_value_row() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let p = MhaParams::new(&mut store, "a", 4, 1, &mut rng).unwrap();
        for id in [p.w_q, p.w_k, p.w_v, p.w_o] {
            identity(&mut store, id, 4);
        }
        let mut tape = Tape::new();
        let kv_data = [1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0, 9.0, 8.0, 7.0, 6.0];
        let kv = tape.constant(Tensor::from_f64(vec![3, 4], &kv_data).unwrap());
        let q = tape.constant(Tensor::from_f64(vec![2, 4], &[0.1; 8]).unwrap());
        let mask = [false, false, true, true, false, false];
        let out = multi_head_attention(&mut tape, &store, &p, q, kv, Some(&mask)).unwrap();
        assert_eq!(&tape.data(out)[0..4], &kv_data[8..12]);
        assert_eq!(&tape.data(out)[4..8], &kv_data[0..4]);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        assert_eq!(causal_mask(2), vec![true, false, true, true]);
        let pos = sinusoidal_positions::<f64>(3, 4);
        assert_eq!(pos.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pos.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pos.row(2)[2] - (0.02f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn attention_errors() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        assert!(MhaParams::new(&mut store, "bad", 6, 4, &mut rng).is_err());
        let p = MhaParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 4]));
        let kv = tape.constant(Tensor::zeros(vec![2, 4]));
        let mask = [true, false, false, false];
        assert!(multi_head_attention(&mut tape, &store, &p, q, kv, Some(&mask)).is_err());
    }
}
