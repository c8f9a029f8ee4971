//! Reference attention written as explicit loops, sharing no code with the
//! graph-based implementation.

/// Row-major `[d, d]` projection matrices applied as `y = x · W`.
pub struct DenseWeights<'a> {
    pub q: &'a [f64],
    pub q_mem: Option<&'a [f64]>,
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub o: &'a [f64],
}

fn project(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..d {
            s += x[i] * w[i * d + j];
        }
        *o = s;
    }
    out
}

/// Multi-head attention of `x [t, d]` over itself with `mask [t, t]` and an
/// optional additive `bias [heads, t, t]`. Rows flagged in `mem_rows` take
/// their queries from `w.q_mem`. Returns `[t, d]`.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention_oracle(
    x: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    w: &DenseWeights,
    mem_rows: &[bool],
    mask: &[bool],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    cross_attention_oracle(x, t, x, t, d, heads, w, mem_rows, mask, bias)
}

/// Queries from `xq [tq, d]`, keys and values from `xk [tk, d]`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_oracle(
    xq: &[f64],
    tq: usize,
    xk: &[f64],
    tk: usize,
    d: usize,
    heads: usize,
    w: &DenseWeights,
    mem_rows: &[bool],
    mask: &[bool],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let dk = d / heads;
    let q: Vec<Vec<f64>> = (0..tq)
        .map(|i| {
            let wq = if mem_rows.get(i).copied().unwrap_or(false) {
                w.q_mem.expect("memory query weights")
            } else {
                w.q
            };
            project(&xq[i * d..(i + 1) * d], wq, d)
        })
        .collect();
    let k: Vec<Vec<f64>> = (0..tk).map(|j| project(&xk[j * d..(j + 1) * d], w.k, d)).collect();
    let v: Vec<Vec<f64>> = (0..tk).map(|j| project(&xk[j * d..(j + 1) * d], w.v, d)).collect();
    let mut ctx = vec![vec![0.0; d]; tq];
    for h in 0..heads {
        for i in 0..tq {
            let mut scores = vec![f64::NEG_INFINITY; tk];
            for j in 0..tk {
                if !mask[i * tk + j] {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..dk {
                    s += q[i][h * dk + c] * k[j][h * dk + c];
                }
                if let Some(b) = bias {
                    s += b[(h * tq + i) * tk + j];
                }
                scores[j] = s;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
                z += *s;
            }
            for j in 0..tk {
                let p = scores[j] / z;
                for c in 0..dk {
                    ctx[i][h * dk + c] += p * v[j][h * dk + c];
                }
            }
        }
    }
    ctx.iter().flat_map(|row| project(row, w.o, d)).collect()
}

/// Chunk-selector cross-attention for one batch element.
///
/// `dec [tq, d]`, `enc [n · (M + cl), d]`, `valid [n · cl]`. For every head
/// and query: chunk score `s_c = log Σ_m exp(q·k_m)` over the chunk's memory
/// keys (0 without memory), chunk weight `w_c = softmax(s)` over chunks with
/// real tokens, token weight `w_c · softmax_within_chunk(q·k_t)`, and a final
/// renormalization over all real tokens.
#[allow(clippy::too_many_arguments)]
pub fn selector_oracle(
    dec: &[f64],
    tq: usize,
    enc: &[f64],
    n: usize,
    mem: usize,
    cl: usize,
    d: usize,
    heads: usize,
    w: &DenseWeights,
    valid: &[bool],
) -> Vec<f64> {
    let dk = d / heads;
    let block = mem + cl;
    let tk = n * block;
    let q: Vec<Vec<f64>> = (0..tq).map(|i| project(&dec[i * d..(i + 1) * d], w.q, d)).collect();
    let k: Vec<Vec<f64>> = (0..tk).map(|j| project(&enc[j * d..(j + 1) * d], w.k, d)).collect();
    let v: Vec<Vec<f64>> = (0..tk).map(|j| project(&enc[j * d..(j + 1) * d], w.v, d)).collect();
    let dot = |i: usize, j: usize, h: usize| -> f64 {
        (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum()
    };
    let mut ctx = vec![vec![0.0; d]; tq];
    for h in 0..heads {
        for i in 0..tq {
            let live: Vec<usize> = (0..n)
                .filter(|&c| (0..cl).any(|t| valid[c * cl + t]))
                .collect();
            let chunk_score: Vec<f64> = live
                .iter()
                .map(|&c| {
                    if mem == 0 {
                        return 0.0;
                    }
                    let s: f64 = (0..mem).map(|m| dot(i, c * block + m, h).exp()).sum();
                    s.ln()
                })
                .collect();
            let cmax = chunk_score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let cz: f64 = chunk_score.iter().map(|s| (s - cmax).exp()).sum();
            let mut weights = vec![0.0; tk];
            for (ci, &c) in live.iter().enumerate() {
                let wc = (chunk_score[ci] - cmax).exp() / cz;
                let toks: Vec<usize> = (0..cl).filter(|&t| valid[c * cl + t]).collect();
                let sc: Vec<f64> = toks.iter().map(|&t| dot(i, c * block + mem + t, h)).collect();
                let tmax = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let tz: f64 = sc.iter().map(|s| (s - tmax).exp()).sum();
                for (ti, &t) in toks.iter().enumerate() {
                    weights[c * block + mem + t] = wc * (sc[ti] - tmax).exp() / tz;
                }
            }
            let total: f64 = weights.iter().sum();
            for j in 0..tk {
                let p = weights[j] / total;
                for c in 0..dk {
                    ctx[i][h * dk + c] += p * v[j][h * dk + c];
                }
            }
        }
    }
    ctx.iter().flat_map(|row| project(row, w.o, d)).collect()
}

/// Largest `|a - b| / max(|b|, floor)` over paired elements, and the largest
/// absolute difference.
pub fn max_diffs(a: &[f64], b: &[f64], floor: f64) -> (f64, f64) {
    let mut abs: f64 = 0.0;
    let mut rel: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let e = (x - y).abs();
        abs = abs.max(e);
        rel = rel.max(e / y.abs().max(floor));
    }
    (abs, rel)
}
