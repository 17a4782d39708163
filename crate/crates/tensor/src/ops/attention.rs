//! Fused scaled dot-product multi-head attention.

use crate::gemm::{gemm, MatMut, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Attention of already-projected queries `[Tq, D]` over keys and values
/// `[Tk, D]`, split into `heads` contiguous column groups. With `causal`
/// set, query `i` only sees keys `0..=i`.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, heads: usize, causal: bool) -> Var<'t> {
    let (qv, kv, vv) = (q.value_arc(), k.value_arc(), v.value_arc());
    assert!(
        qv.rank() == 2 && kv.rank() == 2 && vv.rank() == 2,
        "attention expects matrices"
    );
    let (tq, d) = (qv.shape()[0], qv.shape()[1]);
    let tk = kv.shape()[0];
    assert_eq!(kv.shape()[1], d, "key width");
    assert_eq!(vv.shape(), kv.shape(), "value shape");
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    if causal {
        assert_eq!(tq, tk, "causal attention needs a square score matrix");
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let lp = q.tape.low_precision();

    let mut probs = vec![0.0f32; heads * tq * tk];
    let mut out = vec![0.0f32; tq * d];
    for h in 0..heads {
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        gemm(
            scale,
            MatRef::new(qv.data(), tq, d).cols_slice(h * dh, dh),
            MatRef::new(kv.data(), tk, d).cols_slice(h * dh, dh).t(),
            0.0,
            MatMut::new(p, tq, tk),
            lp,
        );
        softmax_rows(p, tq, tk, causal);
        gemm(
            1.0,
            MatRef::new(p, tq, tk),
            MatRef::new(vv.data(), tk, d).cols_slice(h * dh, dh),
            0.0,
            MatMut::new(&mut out, tq, d).cols_slice(h * dh, dh),
            lp,
        );
    }

    q.tape
        .record(Tensor::from_vec([tq, d], out), &[q, k, v], move |g, needs| {
            let mut gq = vec![0.0f32; tq * d];
            let mut gk = vec![0.0f32; tk * d];
            let mut gv = vec![0.0f32; tk * d];
            let mut gp = vec![0.0f32; tq * tk];
            for h in 0..heads {
                let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                let g_h = MatRef::new(g.data(), tq, d).cols_slice(h * dh, dh);
                if needs[2] {
                    gemm(
                        1.0,
                        MatRef::new(p, tq, tk).t(),
                        g_h,
                        0.0,
                        MatMut::new(&mut gv, tk, d).cols_slice(h * dh, dh),
                        lp,
                    );
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                gemm(
                    1.0,
                    g_h,
                    MatRef::new(vv.data(), tk, d).cols_slice(h * dh, dh).t(),
                    0.0,
                    MatMut::new(&mut gp, tq, tk),
                    lp,
                );
                // Softmax backward, in place: gs = p * (gp - <gp, p>_row).
                for r in 0..tq {
                    let pr = &p[r * tk..(r + 1) * tk];
                    let gr = &mut gp[r * tk..(r + 1) * tk];
                    let dot: f32 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (gv, pv) in gr.iter_mut().zip(pr) {
                        *gv = pv * (*gv - dot);
                    }
                }
                if needs[0] {
                    gemm(
                        scale,
                        MatRef::new(&gp, tq, tk),
                        MatRef::new(kv.data(), tk, d).cols_slice(h * dh, dh),
                        0.0,
                        MatMut::new(&mut gq, tq, d).cols_slice(h * dh, dh),
                        lp,
                    );
                }
                if needs[1] {
                    gemm(
                        scale,
                        MatRef::new(&gp, tq, tk).t(),
                        MatRef::new(qv.data(), tq, d).cols_slice(h * dh, dh),
                        0.0,
                        MatMut::new(&mut gk, tk, d).cols_slice(h * dh, dh),
                        lp,
                    );
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec([tq, d], gq)),
                needs[1].then(|| Tensor::from_vec([tk, d], gk)),
                needs[2].then(|| Tensor::from_vec([tk, d], gv)),
            ]
        })
}

fn softmax_rows(p: &mut [f32], rows: usize, cols: usize, causal: bool) {
    for r in 0..rows {
        let row = &mut p[r * cols..(r + 1) * cols];
        let visible = if causal { r + 1 } else { cols };
        let max = row[..visible].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for v in &mut row[..visible] {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in &mut row[..visible] {
            *v /= z;
        }
        for v in &mut row[visible..] {
            *v = 0.0;
        }
    }
}
