//! Pointwise arithmetic with trailing-dimension broadcasting, plus shape
//! manipulation (reshape, narrow, concat).

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Pointwise operators available through [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Abs,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Elu,
    Clamp { lo: f64, hi: f64 },
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Per output dimension, the stride into `shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut base_a = 0;
        let mut base_b = 0;
        for (d, &c) in counter.iter().enumerate() {
            base_a += c * sa[d];
            base_b += c * sb[d];
        }
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        forward: fn(T, T) -> T,
        da: fn(T, T, T) -> T,
        db: fn(T, T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa_shape, sb_shape) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = broadcast_shape(&sa_shape, &sb_shape)?;
        let n = numel(&out_shape);
        let mut out = vec![T::zero(); n];
        {
            let a = self.data();
            let b = other.data();
            if sa_shape == sb_shape {
                for i in 0..n {
                    out[i] = forward(a[i], b[i]);
                }
            } else {
                let sa = broadcast_strides(&sa_shape, &out_shape);
                let sb = broadcast_strides(&sb_shape, &out_shape);
                for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = forward(a[i], b[j]));
            }
        }
        let shape = out_shape.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let g = ctx.grad;
                let y = ctx.output;
                let mut ga = ctx.needs(0).then(|| vec![T::zero(); a.len()]);
                let mut gb = ctx.needs(1).then(|| vec![T::zero(); b.len()]);
                if sa_shape == sb_shape {
                    for i in 0..g.len() {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g[i] * da(a[i], b[i], y[i]);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g[i] * db(a[i], b[i], y[i]);
                        }
                    }
                } else {
                    let sa = broadcast_strides(&sa_shape, &out_shape);
                    let sb = broadcast_strides(&sb_shape, &out_shape);
                    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = ga[i] + g[o] * da(a[i], b[j], y[o]);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] = gb[j] + g[o] * db(a[i], b[j], y[o]);
                        }
                    });
                }
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    /// Plain division; callers guard denominators that can vanish.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a / b, |_, b, _| b.recip(), |_, b, y| -y / b)
    }

    /// Pointwise maximum; on ties the value and the gradient come from `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { T::one() } else { T::zero() },
            |a, b, _| if a >= b { T::zero() } else { T::one() },
        )
    }

    /// Pointwise minimum; on ties the value and the gradient come from `self`.
    pub fn minimum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            |a, b| if a <= b { a } else { b },
            |a, b, _| if a <= b { T::one() } else { T::zero() },
            |a, b, _| if a <= b { T::zero() } else { T::one() },
        )
    }

    /// `f` computes the value, `df(x, y)` the derivative from input and output.
    pub(crate) fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.output))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn recip(&self) -> Tensor<T> {
        self.unary(|x| x.recip(), |_, y| -y * y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// ELU with unit scale.
    pub fn elu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside or on the bounds.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// Dispatches a named pointwise operator over one or two arguments.
    pub fn elementwise(op: Elementwise, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
        use Elementwise::*;
        let arity = match op {
            Add | Sub | Mul | Div | Max | Min => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::invalid(format!("{op:?} takes {arity} argument(s), got {}", args.len())));
        }
        let a = args[0];
        Ok(match op {
            Add => a.add(args[1])?,
            Sub => a.sub(args[1])?,
            Mul => a.mul(args[1])?,
            Div => a.div(args[1])?,
            Max => a.maximum(args[1])?,
            Min => a.minimum(args[1])?,
            Abs => a.abs(),
            Exp => a.exp(),
            Log => a.log(),
            Sigmoid => a.sigmoid(),
            Relu => a.relu(),
            Elu => a.elu(),
            Clamp { lo, hi } => a.clamp(T::of(lo), T::of(hi)),
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum().mul_scalar(n.recip())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let extent = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                g[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for t in inputs {
            let ok = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} incompatible with {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let extents: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = inputs.iter().map(|t| t.data()).collect();
            for o in 0..outer {
                for (d, &e) in datas.iter().zip(&extents) {
                    out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, out, inputs.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<T>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    g.extend_from_slice(&ctx.grad[offset..offset + e * inner]);
                    offset += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(t(&[1], &[0.0]).sigmoid().item(), 0.5);
    }

    #[test]
    fn broadcasting_follows_trailing_dims() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11., 22., 33., 14., 25., 36.]);
        let c = t(&[2, 1], &[1., 2.]);
        assert_eq!(a.mul(&c).unwrap().to_vec(), vec![1., 2., 3., 8., 10., 12.]);
        assert!(a.add(&t(&[2], &[1., 2.])).is_err());
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let a = Tensor::<f64>::parameter(&[2, 3], vec![1.0; 6]).unwrap();
        let b = Tensor::<f64>::parameter(&[1, 3], vec![1., 2., 3.]).unwrap();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2., 2., 2.]);
        assert_eq!(a.grad().unwrap(), vec![1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn max_tie_routes_to_first_argument() {
        let a = Tensor::<f64>::parameter(&[2], vec![1., 2.]).unwrap();
        let m = a.maximum(&a).unwrap();
        m.sum().backward().unwrap();
        // both operands are the same leaf; the tie sends everything through the first slot
        assert_eq!(a.grad().unwrap(), vec![1., 1.]);

        let x = Tensor::<f64>::parameter(&[1], vec![3.]).unwrap();
        let y = Tensor::<f64>::parameter(&[1], vec![3.]).unwrap();
        x.maximum(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.]);
        assert_eq!(y.grad().unwrap(), vec![0.]);
        let x = Tensor::<f64>::parameter(&[1], vec![3.]).unwrap();
        let y = Tensor::<f64>::parameter(&[1], vec![3.]).unwrap();
        x.minimum(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.]);
        assert_eq!(y.grad().unwrap(), vec![0.]);
    }

    #[test]
    fn concat_channel_arithmetic() {
        let parts: Vec<_> = (0..4).map(|_| Tensor::<f32>::zeros(&[1, 18, 4, 4])).collect();
        let c = Tensor::concat(&parts, 1).unwrap();
        assert_eq!(c.shape(), &[1, 72, 4, 4]);
        let single = Tensor::concat(&parts[..1], 1).unwrap();
        assert_eq!(single.to_vec(), parts[0].to_vec());
        let bad = Tensor::<f32>::zeros(&[1, 2, 3, 4]);
        assert!(Tensor::concat(&[parts[0].clone(), bad], 1).is_err());
    }

    #[test]
    fn concat_gradient_is_ones_into_each_input() {
        let a = Tensor::<f64>::parameter(&[1, 2, 2, 2], vec![0.5; 8]).unwrap();
        let b = Tensor::<f64>::parameter(&[1, 3, 2, 2], vec![0.1; 12]).unwrap();
        Tensor::concat(&[a.clone(), b.clone()], 1).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 8]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 12]);
    }

    #[test]
    fn narrow_picks_a_slab() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.narrow(1, 1, 2).unwrap().to_vec(), vec![2., 3., 5., 6.]);
        assert!(a.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let a = t(&[2], &[-1.0, 2.0]);
        let r = Tensor::elementwise(Elementwise::Clamp { lo: 0.0, hi: 1.0 }, &[&a]).unwrap();
        assert_eq!(r.to_vec(), vec![0.0, 1.0]);
        assert!(Tensor::elementwise(Elementwise::Add, &[&a]).is_err());
    }

    #[test]
    fn elu_is_continuous_at_zero() {
        let a = t(&[3], &[-1e-12, 0.0, 1e-12]);
        let y = a.elu().to_vec();
        assert!(y.iter().all(|v| v.abs() < 1e-11));
    }
}
