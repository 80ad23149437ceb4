//! Slow, obviously-correct reference implementations shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

/// Full multi-head self-attention over one window, straight from the
/// formula, in f64.
///
/// `x` is `[N,d]` row-major with `N = w*w` tokens in row-major window
/// order; `table` is `[h, (2w-1)^2]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_window_attention(
    x: &[f32],
    w: usize,
    d: usize,
    heads: usize,
    qkv_weight: &[f32],
    qkv_bias: &[f32],
    out_weight: &[f32],
    out_bias: &[f32],
    table: &[f32],
) -> Vec<f64> {
    let n = w * w;
    let dh = d / heads;
    let side = 2 * w - 1;
    // q,k,v: [N,d] each
    let project = |part: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for o in 0..d {
                let row = part * d + o;
                let mut acc = qkv_bias[row] as f64;
                for i in 0..d {
                    acc += qkv_weight[row * d + i] as f64 * x[t * d + i] as f64;
                }
                out[t * d + o] = acc;
            }
        }
        out
    };
    let (q, k, v) = (project(0), project(1), project(2));
    let mut concat = vec![0.0f64; n * d];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..n {
            let (ri, ci) = ((i / w) as isize, (i % w) as isize);
            let mut logits = vec![0.0f64; n];
            for (j, logit) in logits.iter_mut().enumerate() {
                let (rj, cj) = ((j / w) as isize, (j % w) as isize);
                let dot: f64 = (0..dh)
                    .map(|c| q[i * d + off + c] * k[j * d + off + c])
                    .sum();
                let idx = ((ri - rj + w as isize - 1) as usize) * side
                    + (ci - cj + w as isize - 1) as usize;
                *logit = dot / (dh as f64).sqrt() + table[head * side * side + idx] as f64;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                concat[i * d + off + c] = (0..n).map(|j| exps[j] / z * v[j * d + off + c]).sum();
            }
        }
    }
    let mut out = vec![0.0f64; n * d];
    for t in 0..n {
        for o in 0..d {
            out[t * d + o] = out_bias[o] as f64
                + (0..d)
                    .map(|i| out_weight[o * d + i] as f64 * concat[t * d + i])
                    .sum::<f64>();
        }
    }
    out
}

/// Rates at one threshold by direct counting under "bona fide iff score >= t".
pub fn rates(bonafide: &[f64], attack: &[f64], t: f64) -> (f64, f64) {
    let accepted_attacks = attack.iter().filter(|&&a| a >= t).count();
    let rejected_bonafide = bonafide.iter().filter(|&&b| b < t).count();
    (
        accepted_attacks as f64 / attack.len() as f64,
        rejected_bonafide as f64 / bonafide.len() as f64,
    )
}

fn candidates(bonafide: &[f64], attack: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = bonafide.iter().chain(attack).copied().collect();
    c.push(f64::NEG_INFINITY);
    c.push(f64::INFINITY);
    c
}

/// `(eer, threshold)` by trying every candidate threshold.
pub fn brute_eer(bonafide: &[f64], attack: &[f64]) -> (f64, f64) {
    let mut best: Option<(f64, f64, f64)> = None; // (gap, threshold, eer)
    for t in candidates(bonafide, attack) {
        let (a, b) = rates(bonafide, attack, t);
        let gap = (a - b).abs();
        let better = match best {
            None => true,
            Some((g, bt, _)) => gap < g || (gap == g && t < bt),
        };
        if better {
            best = Some((gap, t, (a + b) / 2.0));
        }
    }
    let (_, t, e) = best.unwrap();
    (e, t)
}

/// `(bpcer, threshold)`: lowest BPCER with APCER <= alpha, smallest threshold.
pub fn brute_bpcer_at_apcer(bonafide: &[f64], attack: &[f64], alpha: f64) -> (f64, f64) {
    let mut best: Option<(f64, f64)> = None;
    for t in candidates(bonafide, attack) {
        let (a, b) = rates(bonafide, attack, t);
        if a > alpha {
            continue;
        }
        let better = match best {
            None => true,
            Some((bb, bt)) => b < bb || (b == bb && t < bt),
        };
        if better {
            best = Some((b, t));
        }
    }
    best.unwrap()
}

/// Multiplies performed by a direct convolution loop nest.
pub fn loop_conv_macs(
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    groups: usize,
) -> u64 {
    let mut count = 0u64;
    for co in 0..c_out {
        let g = co / (c_out / groups);
        for _y in 0..h_out {
            for _x in 0..w_out {
                for ci in 0..c_in {
                    if ci / (c_in / groups) != g {
                        continue;
                    }
                    for _ky in 0..kh {
                        for _kx in 0..kw {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

pub fn loop_linear_macs(d_in: usize, d_out: usize, tokens: usize) -> u64 {
    let mut count = 0u64;
    for _t in 0..tokens {
        for _o in 0..d_out {
            for _i in 0..d_in {
                count += 1;
            }
        }
    }
    count
}

/// Multiplies of one window-attention pass: Q/K/V and output projections,
/// per-head logits and per-head weighted sums.
pub fn loop_attention_macs(n: usize, d: usize, heads: usize, windows: usize) -> u64 {
    let dh = d / heads;
    let mut count = 0u64;
    for _w in 0..windows {
        count += 3 * loop_linear_macs(d, d, n);
        for _h in 0..heads {
            for _i in 0..n {
                for _j in 0..n {
                    for _c in 0..dh {
                        count += 2; // q.k and a*v
                    }
                }
            }
        }
        count += loop_linear_macs(d, d, n);
    }
    count
}
