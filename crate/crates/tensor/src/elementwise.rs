use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        // (a, b, grad) -> (da, db)
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |_, g| {
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for ((&x, &y), &go) in a.data().iter().zip(b.data()).zip(g) {
                    let (dx, dy) = df(x, y, go);
                    ga.push(dx);
                    gb.push(dy);
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// `f` maps input to output; `df(x, y)` is dy/dx given input and output.
    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |out, g| {
                let gi = input
                    .data()
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&x, &y), &go)| go * df(x, y))
                    .collect();
                vec![Some(gi)]
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |_, g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |_, g| vec![Some(g.iter().map(|&v| v * s).collect())],
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Multiplies every channel of `self` `[N,C,H,W]` by a per-pixel map `[N,1,H,W]`.
    pub fn mul_spatial(&self, gate: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("mul_spatial")?;
        let (gn, gc, gh, gw) = gate.dims4("mul_spatial")?;
        if gn != n || gc != 1 || gh != h || gw != w {
            return Err(TensorError::shape(
                "mul_spatial",
                format!(
                    "gate must be [{n},1,{h},{w}] for input {:?}, got {:?}",
                    self.shape(),
                    gate.shape()
                ),
            ));
        }
        let hw = h * w;
        let mut data = vec![0.0; self.numel()];
        for b in 0..n {
            let gp = &gate.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    data[off + p] = self.data()[off + p] * gp[p];
                }
            }
        }
        let (x, gt) = (self.clone(), gate.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gate.clone()],
            move |_, g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; n * hw];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in 0..hw {
                            gx[off + p] = g[off + p] * gt.data()[b * hw + p];
                            gg[b * hw + p] += g[off + p] * x.data()[off + p];
                        }
                    }
                }
                vec![Some(gx), Some(gg)]
            },
        ))
    }
}
