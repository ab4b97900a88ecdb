use super::{cast, split_axis, Float, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Float>(self, a: T, b: T) -> (T, T) {
        match self {
            BinaryOp::Add => (T::one(), T::one()),
            BinaryOp::Sub => (T::one(), -T::one()),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (T::one() / b, -a / (b * b)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

/// How the right operand maps onto the left one.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// `b` holds one value per index of the axis splitting `a` into (outer, len, inner).
    Axis { len: usize, inner: usize },
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize], axis: Option<usize>) -> Option<Self> {
        if a == b {
            return Some(Bcast::Same);
        }
        let nb: usize = b.iter().product();
        if nb == 1 {
            return Some(Bcast::Scalar);
        }
        let axis = match axis {
            Some(ax) => ax,
            // Per-channel form: a vector matching axis 1 of an N,C,... tensor.
            None if a.len() >= 2 => 1,
            None => return None,
        };
        if axis >= a.len() || a[axis] != nb {
            return None;
        }
        // Accept [C] or [1, C, 1, ...] style vectors.
        let non_unit: Vec<_> = b.iter().filter(|&&d| d != 1).collect();
        if non_unit.len() != 1 {
            return None;
        }
        let (_, len, inner) = split_axis(a, axis);
        Some(Bcast::Axis { len, inner })
    }

    #[inline]
    fn b_index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Axis { len, inner, .. } => (i / inner) % len,
        }
    }
}

impl<T: Float> Graph<T> {
    /// Elementwise binary operation. `b` may equal `a` in shape, be a single
    /// value, or be a per-channel vector (axis 1).
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.binary_along(op, a, b, None)
    }

    fn binary_along(&mut self, op: BinaryOp, a: Var, b: Var, axis: Option<usize>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(ta.shape(), tb.shape(), axis)
            .ok_or_else(|| shape_err(op.name(), ta.shape(), tb.shape()))?;
        let bd = tb.data();
        let out: Vec<T> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| op.apply(x, bd[bc.b_index(i)]))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        let nb = tb.numel();
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = ctx.needs[0].then(|| vec![T::zero(); ad.len()]);
                let mut gb = ctx.needs[1].then(|| vec![T::zero(); nb]);
                for (i, &g) in ctx.grad.iter().enumerate() {
                    let j = bc.b_index(i);
                    let (da, db) = op.partials(ad[i], bd[j]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = g * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g * db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Adds a bias vector along the last axis (linear layers).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.binary_along(BinaryOp::Add, x, bias, Some(axis))
    }

    /// Multiplies by a vector along `axis`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.binary_along(BinaryOp::Mul, x, v, Some(axis))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s: T = cast(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s: T = cast(s);
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let two: T = cast(2.0);
        self.unary(x, |v| v * v, move |v, _| two * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |v, _| T::one() / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let half: T = cast(0.5);
        self.unary(x, |v| v.sqrt(), move |_, y| half / y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.record(
            value,
            &[x],
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let yd = ctx.output.data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
