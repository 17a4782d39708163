use crate::gemm::{gemm, MatMut, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_arc(), other.value_arc());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension mismatch");
        let lp = self.tape.low_precision();
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(a.data(), m, k),
            MatRef::new(b.data(), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
            lp,
        );
        self.tape
            .record(Tensor::from_vec([m, n], out), &[self, other], move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        1.0,
                        MatRef::new(g.data(), m, n),
                        MatRef::new(b.data(), k, n).t(),
                        0.0,
                        MatMut::new(&mut ga, m, k),
                        lp,
                    );
                    Tensor::from_vec([m, k], ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        1.0,
                        MatRef::new(a.data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        0.0,
                        MatMut::new(&mut gb, k, n),
                        lp,
                    );
                    Tensor::from_vec([k, n], gb)
                });
                vec![ga, gb]
            })
    }

    /// Affine map over the last axis: `x @ weight^T + bias`, with
    /// `weight: [out, in]` and `bias: [out]`. Leading axes are preserved.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Var<'t> {
        let x = self.value_arc();
        let w = weight.value_arc();
        assert_eq!(w.rank(), 2, "linear weight must be [out, in]");
        let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
        assert_eq!(
            x.last_dim(),
            in_f,
            "linear input width {} does not match weight {:?}",
            x.last_dim(),
            w.shape()
        );
        let rows = x.rows();
        let lp = self.tape.low_precision();
        let mut out = vec![0.0; rows * out_f];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[out_f], "linear bias shape");
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(b.value.data());
            }
        }
        gemm(
            1.0,
            MatRef::new(x.data(), rows, in_f),
            MatRef::new(w.data(), out_f, in_f).t(),
            1.0,
            MatMut::new(&mut out, rows, out_f),
            lp,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let in_shape = x.shape().to_vec();
        let value = Tensor::from_vec(shape, out);
        let backward = move |g: &Tensor, needs: &[bool]| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; rows * in_f];
                gemm(
                    1.0,
                    MatRef::new(g.data(), rows, out_f),
                    MatRef::new(w.data(), out_f, in_f),
                    0.0,
                    MatMut::new(&mut gx, rows, in_f),
                    lp,
                );
                Tensor::from_vec(in_shape.clone(), gx)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; out_f * in_f];
                gemm(
                    1.0,
                    MatRef::new(g.data(), rows, out_f).t(),
                    MatRef::new(x.data(), rows, in_f),
                    0.0,
                    MatMut::new(&mut gw, out_f, in_f),
                    lp,
                );
                Tensor::from_vec([out_f, in_f], gw)
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; out_f];
                    for row in g.data().chunks(out_f) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::from_vec([out_f], gb)
                }));
            }
            grads
        };
        match bias {
            Some(b) => self.tape.record(value, &[self, weight, b], backward),
            None => self.tape.record(value, &[self, weight], backward),
        }
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Var<'t> {
        let out = self.value.transpose2d();
        self.tape.record(out, &[self], |g, _| vec![Some(g.transpose2d())])
    }
}
