use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f32) -> Var<'t> {
        let x = self.value_arc();
        let n = x.last_dim();
        assert_eq!(gamma.shape(), &[n], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[n], "layer_norm beta shape");
        let rows = x.rows();
        let mut xhat = vec![0.0f32; x.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; x.numel()];
        let (gv, bv) = (gamma.value.data(), beta.value.data());
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let gamma_v = gamma.value_arc();
        let shape = x.shape().to_vec();
        self.tape.record(
            Tensor::from_vec(shape.clone(), out),
            &[self, gamma, beta],
            move |g, needs| {
                let gd = g.data();
                let gam = gamma_v.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0f32; gd.len()];
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let o = r * n;
                        let mut mean_gg = 0.0f32;
                        let mut mean_ggx = 0.0f32;
                        for j in 0..n {
                            let gg = gd[o + j] * gam[j];
                            mean_gg += gg;
                            mean_ggx += gg * xhat[o + j];
                        }
                        mean_gg /= n as f32;
                        mean_ggx /= n as f32;
                        for j in 0..n {
                            let gg = gd[o + j] * gam[j];
                            gx[o + j] = rs * (gg - mean_gg - xhat[o + j] * mean_ggx);
                        }
                    }
                    Tensor::from_vec(shape.clone(), gx)
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![0.0f32; n];
                    for r in 0..rows {
                        for j in 0..n {
                            acc[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    Tensor::from_vec([n], acc)
                });
                let gbeta = needs[2].then(|| {
                    let mut acc = vec![0.0f32; n];
                    for row in gd.chunks(n) {
                        for (a, b) in acc.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::from_vec([n], acc)
                });
                vec![gx, ggamma, gbeta]
            },
        )
    }

    /// Per-channel affine map on a channel-first tensor `[C, ...]`:
    /// `out[c, i] = x[c, i] * scale[c] + shift[c]`.
    pub fn channel_affine(&self, scale: &Var<'t>, shift: &Var<'t>) -> Var<'t> {
        let x = self.value_arc();
        let c = x.shape()[0];
        assert_eq!(scale.shape(), &[c]);
        assert_eq!(shift.shape(), &[c]);
        let inner = x.numel() / c.max(1);
        let s = scale.value_arc();
        let mut out = x.as_ref().clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let (a, b) = (s.data()[ch], shift.value.data()[ch]);
            for v in chunk {
                *v = *v * a + b;
            }
        }
        self.tape.record(out, &[self, scale, shift], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for (ch, chunk) in gx.data_mut().chunks_mut(inner.max(1)).enumerate() {
                    let a = s.data()[ch];
                    for v in chunk {
                        *v *= a;
                    }
                }
                gx
            });
            let gs = needs[1].then(|| {
                let data = (0..c)
                    .map(|ch| {
                        let r = ch * inner..(ch + 1) * inner;
                        g.data()[r.clone()].iter().zip(&x.data()[r]).map(|(g, x)| g * x).sum()
                    })
                    .collect();
                Tensor::from_vec([c], data)
            });
            let gb = needs[2].then(|| {
                let data = g.data().chunks(inner.max(1)).map(|ch| ch.iter().sum()).collect();
                Tensor::from_vec([c], data)
            });
            vec![gx, gs, gb]
        })
    }

    /// Mean softmax cross-entropy of `[T, K]` logits against class targets.
    pub fn cross_entropy_logits(&self, targets: &[usize]) -> Var<'t> {
        let x = self.value_arc();
        assert_eq!(x.rank(), 2, "cross_entropy_logits expects [T, K]");
        let (t, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), t, "one target per row");
        let mut probs = vec![0.0f32; t * k];
        let mut loss = 0.0f64;
        for (r, &target) in targets.iter().enumerate() {
            assert!(target < k, "target {target} out of range {k}");
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - max) as f64).exp();
                probs[r * k + j] = e as f32;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = (*p as f64 / z) as f32;
            }
            loss += z.ln() - (row[target] - max) as f64;
        }
        let targets = targets.to_vec();
        self.tape
            .record(Tensor::scalar((loss / t as f64) as f32), &[self], move |g, _| {
                let scale = g.item() / t as f32;
                let mut gx = probs;
                for (r, &target) in targets.iter().enumerate() {
                    gx[r * k + target] -= 1.0;
                }
                for v in &mut gx {
                    *v *= scale;
                }
                vec![Some(Tensor::from_vec([t, k], gx))]
            })
    }
}
