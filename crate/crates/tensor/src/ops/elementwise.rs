use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let out = self.value.zip_map(&other.value, |a, b| a + b);
        self.tape.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let out = self.value.zip_map(&other.value, |a, b| a - b);
        self.tape.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let out = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value_arc(), other.value_arc());
        self.tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, b| g * b)),
                needs[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        })
    }

    pub fn scale(&self, factor: f32) -> Var<'t> {
        let out = self.value.map(|v| v * factor);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn add_scalar(&self, c: f32) -> Var<'t> {
        let out = self.value.map(|v| v + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Adds `other` broadcast over the leading axes of `self`; `other.shape()`
    /// must equal a suffix of `self.shape()`.
    pub fn add_broadcast(&self, other: &Var<'t>) -> Var<'t> {
        let s = self.shape();
        let o = other.shape();
        assert!(
            o.len() <= s.len() && s[s.len() - o.len()..] == *o,
            "cannot broadcast {o:?} onto {s:?}"
        );
        let inner = other.value.numel();
        let mut out = self.value.as_ref().clone();
        for chunk in out.data_mut().chunks_mut(inner.max(1)) {
            for (a, b) in chunk.iter_mut().zip(other.value.data()) {
                *a += b;
            }
        }
        let oshape = o.to_vec();
        self.tape.record(out, &[self, other], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; inner];
                for chunk in g.data().chunks(inner.max(1)) {
                    for (a, b) in acc.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                Tensor::from_vec(oshape, acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value.map(|v| v.max(0.0));
        let x = self.value_arc();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'t> {
        const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;
        const INV_SQRT_2PI: f32 = 0.398_942_3;
        let out = self.value.map(|x| 0.5 * x * (1.0 + libm::erff(x * INV_SQRT2)));
        let x = self.value_arc();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| {
                let cdf = 0.5 * (1.0 + libm::erff(x * INV_SQRT2));
                let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                g * (cdf + x * pdf)
            }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value.map(sigmoid);
        let y = Tensor::clone(&out);
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    /// Mean squared difference `mean((self - other)^2)`.
    pub fn mse(&self, other: &Var<'t>) -> Var<'t> {
        let n = self.value.numel().max(1) as f32;
        let diff = self.value.zip_map(&other.value, |a, b| a - b);
        let out = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f32>() / n);
        self.tape.record(out, &[self, other], move |g, needs| {
            let k = 2.0 * g.item() / n;
            vec![
                needs[0].then(|| diff.map(|d| k * d)),
                needs[1].then(|| diff.map(|d| -k * d)),
            ]
        })
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of several variables of identical shape, accumulated in slice order.
pub fn sum_all<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "sum_all of nothing");
    let tape = vars[0].tape;
    let mut acc = vars[0].value.as_ref().clone();
    for v in &vars[1..] {
        acc.add_assign(&v.value);
    }
    let refs: Vec<&Var<'t>> = vars.iter().collect();
    let n = vars.len();
    tape.record(acc, &refs, move |g, needs| {
        (0..n).map(|i| needs[i].then(|| g.clone())).collect()
    })
}
