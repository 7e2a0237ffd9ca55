//! Differentiable primitives over [`Var`].

use super::tape::{Backward, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index maps for a same-rank broadcast where each extent is equal or 1.
struct Broadcast {
    shape: Vec<usize>,
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
}

fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                shape: a.to_vec(),
                lhs: None,
                rhs: None,
            });
        }
        let a_n: usize = a.iter().product();
        let b_n: usize = b.iter().product();
        if b_n == 1 {
            return Ok(Self {
                shape: a.to_vec(),
                lhs: None,
                rhs: Some(vec![0; a_n]),
            });
        }
        if a_n == 1 {
            return Ok(Self {
                shape: b.to_vec(),
                lhs: Some(vec![0; b_n]),
                rhs: None,
            });
        }
        if a.len() != b.len() {
            return Err(Error::shape(op, a, b));
        }
        let mut shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(op, a, b));
            }
            shape.push(x.max(y));
        }
        let lhs = (a != shape.as_slice()).then(|| broadcast_index(&shape, a));
        let rhs = (b != shape.as_slice()).then(|| broadcast_index(&shape, b));
        Ok(Self { shape, lhs, rhs })
    }
}

fn gather(t: &Tensor, idx: &Option<Vec<usize>>, n: usize) -> Vec<f64> {
    match idx {
        None => t.data().to_vec(),
        Some(idx) => {
            let d = t.data();
            idx.iter().take(n).map(|&i| d[i]).collect()
        }
    }
}

fn scatter(values: Vec<f64>, idx: &Option<Vec<usize>>, shape: &[usize]) -> Tensor {
    match idx {
        None => Tensor::from_parts(shape.to_vec(), values),
        Some(idx) => {
            let mut out = Tensor::zeros(shape);
            let d = out.data_mut();
            for (&i, v) in idx.iter().zip(values) {
                d[i] += v;
            }
            out
        }
    }
}

/// Element-wise binary op with local partials `(∂f/∂a, ∂f/∂b)`.
fn binary<'t>(
    op: &'static str,
    a: Var<'t>,
    b: Var<'t>,
    f: fn(f64, f64) -> f64,
    partials: fn(f64, f64) -> (f64, f64),
) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let plan = Broadcast::plan(op, av.shape(), bv.shape())?;
    let n: usize = plan.shape.iter().product();
    let x = gather(&av, &plan.lhs, n);
    let y = gather(&bv, &plan.rhs, n);
    let data: Vec<f64> = x.iter().zip(&y).map(|(&p, &q)| f(p, q)).collect();
    let out = Tensor::from_parts(plan.shape.clone(), data);
    Ok(a.tape().record(
        out,
        &[a, b],
        Box::new(move |ctx: &Backward<'_>| {
            let g = ctx.grad.data();
            let x = gather(&ctx.inputs[0], &plan.lhs, n);
            let y = gather(&ctx.inputs[1], &plan.rhs, n);
            let mut ga = Vec::with_capacity(if ctx.needs[0] { n } else { 0 });
            let mut gb = Vec::with_capacity(if ctx.needs[1] { n } else { 0 });
            for i in 0..n {
                let (da, db) = partials(x[i], y[i]);
                if ctx.needs[0] {
                    ga.push(g[i] * da);
                }
                if ctx.needs[1] {
                    gb.push(g[i] * db);
                }
            }
            vec![
                ctx.needs[0].then(|| scatter(ga, &plan.lhs, ctx.inputs[0].shape())),
                ctx.needs[1].then(|| scatter(gb, &plan.rhs, ctx.inputs[1].shape())),
            ]
        }),
    ))
}

/// Element-wise unary op whose derivative is expressed through input and output.
fn unary<'t>(a: Var<'t>, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
    let out = a.value().map(f);
    a.tape().record(
        out,
        &[a],
        Box::new(move |ctx: &Backward<'_>| {
            let g = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), g))]
        }),
    )
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("add", self, other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("sub", self, other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("mul", self, other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let denom = other.value();
        if let Some((index, &value)) = denom.data().iter().enumerate().find(|(_, v)| **v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value,
            });
        }
        binary("div", self, other, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    pub fn neg(self) -> Var<'t> {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.tape().record(
            out,
            &[self],
            Box::new(move |ctx: &Backward<'_>| vec![Some(ctx.grad.map(|g| g * factor))]),
        )
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        let out = self.value().map(|x| x + offset);
        self.tape().record(
            out,
            &[self],
            Box::new(|ctx: &Backward<'_>| vec![Some(ctx.grad.clone())]),
        )
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn log(self) -> Result<Var<'t>> {
        check_domain("log", &self.value(), |x| x > 0.0)?;
        Ok(unary(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root; rejects negative inputs.
    pub fn sqrt(self) -> Result<Var<'t>> {
        check_domain("sqrt", &self.value(), |x| x >= 0.0)?;
        Ok(unary(self, f64::sqrt, |_, y| 0.5 / y))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.value().map(|x| x.clamp(lo, hi));
        self.tape().record(
            out,
            &[self],
            Box::new(move |ctx: &Backward<'_>| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0].as_ref(), |g, x| {
                    if (lo..=hi).contains(&x) {
                        g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::EmptyReduction("sum"));
        }
        Ok(self.tape().record(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(|ctx: &Backward<'_>| {
                vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.data()[0]))]
            }),
        ))
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyReduction("mean"));
        }
        Ok(self.sum()?.scale(1.0 / n as f64))
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidShape {
                op: "sum_axes",
                detail: format!("axes {axes:?} out of range for {shape:?}"),
            });
        }
        if axes.iter().any(|&a| shape[a] == 0) {
            return Err(Error::EmptyReduction("sum_axes"));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(d, &e)| if axes.contains(&d) { 1 } else { e })
            .collect();
        let idx = broadcast_index(&shape, &kept);
        let mut out = Tensor::zeros(&kept);
        for (&i, &x) in idx.iter().zip(v.data()) {
            out.data_mut()[i] += x;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let out = out.reshape(&out_shape)?;
        Ok(self.tape().record(
            out,
            &[self],
            Box::new(move |ctx: &Backward<'_>| {
                let g = ctx.grad.data();
                let data = idx.iter().map(|&i| g[i]).collect();
                vec![Some(Tensor::from_parts(shape.clone(), data))]
            }),
        ))
    }

    /// Means over `axes`, removing them from the shape.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes
            .iter()
            .filter_map(|&a| shape.get(a))
            .product();
        let s = self.sum_axes(axes)?;
        Ok(s.scale(1.0 / count as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape().record(
            value,
            &[self],
            Box::new(|ctx: &Backward<'_>| {
                vec![Some(Tensor::from_parts(
                    ctx.inputs[0].shape().to_vec(),
                    ctx.grad.data().to_vec(),
                ))]
            }),
        ))
    }

    /// Columns `start..end` of a rank-2 `[rows, cols]` variable.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let &[rows, cols] = v.shape() else {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                detail: format!("expected rank 2, got {:?}", v.shape()),
            });
        };
        if start > end || end > cols {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of {cols} columns"),
            });
        }
        let width = end - start;
        let data = (0..rows)
            .flat_map(|r| v.data()[r * cols + start..r * cols + end].iter().copied())
            .collect();
        Ok(self.tape().record(
            Tensor::from_parts(vec![rows, width], data),
            &[self],
            Box::new(move |ctx: &Backward<'_>| {
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    g.data_mut()[r * cols + start..r * cols + end]
                        .copy_from_slice(&ctx.grad.data()[r * width..(r + 1) * width]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let out = v.slice_batch(start, end)?;
        let row: usize = v.shape()[1..].iter().product();
        Ok(self.tape().record(
            out,
            &[self],
            Box::new(move |ctx: &Backward<'_>| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.data_mut()[start * row..end * row].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        ))
    }
}

/// Concatenates along the leading axis.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::EmptyReduction("concat"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
    Ok(first.tape().record(
        out,
        parts,
        Box::new(move |ctx: &Backward<'_>| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(ctx.inputs)
                .zip(ctx.needs)
                .map(|((&n, input), &need)| {
                    let slice = &ctx.grad.data()[offset..offset + n];
                    offset += n;
                    need.then(|| Tensor::from_parts(input.shape().to_vec(), slice.to_vec()))
                })
                .collect()
        }),
    ))
}

fn check_domain(op: &'static str, t: &Tensor, ok: impl Fn(f64) -> bool) -> Result<()> {
    match t.data().iter().enumerate().find(|(_, &x)| !ok(x)) {
        Some((index, &value)) => Err(Error::Domain { op, index, value }),
        None => Ok(()),
    }
}
