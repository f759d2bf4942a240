//! Pooling, axis reductions and resampling.

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Mean over H and W, giving `[N, C, 1, 1]`.
    MeanGlobal,
    /// Max over H and W, giving `[N, C, 1, 1]`.
    MaxGlobal,
    /// Same-size k×k box mean with reflection padding (odd `k`).
    MeanWindow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Ties resolve to the lowest index.
    Max,
}

/// Reflect `i` into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut r = i;
    if r < 0 {
        r = -r;
    }
    if r >= n {
        r = 2 * (n - 1) - r;
    }
    r.clamp(0, n - 1) as usize
}

impl<T: Real> Tensor<T> {
    /// Reduces one axis, keeping it with extent 1.
    pub fn reduce_axis(&self, axis: usize, kind: Reduce) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = if kind == Reduce::Max { vec![0usize; outer * inner] } else { Vec::new() };
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| d[(o * extent + e) * inner + i];
                    let slot = o * inner + i;
                    out[slot] = match kind {
                        Reduce::Sum | Reduce::Mean => {
                            let s = (0..extent).fold(T::zero(), |a, e| a + at(e));
                            if kind == Reduce::Mean {
                                s / T::of(extent as f64)
                            } else {
                                s
                            }
                        }
                        Reduce::Max => {
                            let mut best = 0;
                            for e in 1..extent {
                                if at(e) > at(best) {
                                    best = e;
                                }
                            }
                            argmax[slot] = best;
                            at(best)
                        }
                    };
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let total = self.numel();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); total];
            let scale = match kind {
                Reduce::Mean => T::of(extent as f64).recip(),
                _ => T::one(),
            };
            for o in 0..outer {
                for i in 0..inner {
                    let go = ctx.grad[o * inner + i];
                    if kind == Reduce::Max {
                        let e = argmax[o * inner + i];
                        g[(o * extent + e) * inner + i] = go;
                    } else {
                        for e in 0..extent {
                            g[(o * extent + e) * inner + i] = go * scale;
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn pool(&self, kind: Pool) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        match kind {
            Pool::MeanGlobal | Pool::MaxGlobal => {
                let r = if kind == Pool::MeanGlobal { Reduce::Mean } else { Reduce::Max };
                self.reshape(&[n, c, h * w])?.reduce_axis(2, r)?.reshape(&[n, c, 1, 1])
            }
            Pool::MeanWindow(k) => self.mean_window(k),
        }
    }

    fn mean_window(&self, k: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if k % 2 == 0 {
            return Err(Error::invalid(format!("window size must be odd, got {k}")));
        }
        if k > h && k > w {
            return Err(Error::shape(format!("window {k} larger than both extents of {h}x{w}")));
        }
        let r = (k / 2) as isize;
        let norm = T::of((k * k) as f64).recip();
        // Reflected source index for every (output position, window offset).
        let rows: Vec<usize> = (0..h as isize)
            .flat_map(|y| (-r..=r).map(move |dy| reflect(y + dy, h)))
            .collect();
        let cols: Vec<usize> = (0..w as isize)
            .flat_map(|x| (-r..=r).map(move |dx| reflect(x + dx, w)))
            .collect();
        let mut out = vec![T::zero(); n * c * h * w];
        {
            let d = self.data();
            for p in 0..n * c {
                let plane = &d[p * h * w..(p + 1) * h * w];
                // separable: horizontal pass then vertical
                let mut tmp = vec![T::zero(); h * w];
                for y in 0..h {
                    for x in 0..w {
                        let s = cols[x * k..(x + 1) * k]
                            .iter()
                            .fold(T::zero(), |a, &sx| a + plane[y * w + sx]);
                        tmp[y * w + x] = s;
                    }
                }
                let o = &mut out[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let s = rows[y * k..(y + 1) * k]
                            .iter()
                            .fold(T::zero(), |a, &sy| a + tmp[sy * w + x]);
                        o[y * w + x] = s * norm;
                    }
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let go = &ctx.grad[p * h * w..(p + 1) * h * w];
                let mut tmp = vec![T::zero(); h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = go[y * w + x] * norm;
                        for &sy in &rows[y * k..(y + 1) * k] {
                            tmp[sy * w + x] = tmp[sy * w + x] + v;
                        }
                    }
                }
                let gp = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = tmp[y * w + x];
                        for &sx in &cols[x * k..(x + 1) * k] {
                            gp[y * w + sx] = gp[y * w + sx] + v;
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Bilinear upsampling by an integer factor, half-pixel centred
    /// (source coordinate `(i + 0.5) / f - 0.5`, clamped at the edges).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 {
            return Err(Error::invalid("upsampling factor must be at least 1"));
        }
        if factor == 1 {
            return self.reshape(&[n, c, h, w]);
        }
        let taps = |len: usize, out_len: usize| -> Vec<(usize, usize, T)> {
            (0..out_len)
                .map(|i| {
                    let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(len - 1);
                    let i1 = (i0 + 1).min(len - 1);
                    (i0, i1, T::of(src - i0 as f64))
                })
                .collect()
        };
        let (ho, wo) = (h * factor, w * factor);
        let ty = taps(h, ho);
        let tx = taps(w, wo);
        let mut out = vec![T::zero(); n * c * ho * wo];
        {
            let d = self.data();
            for p in 0..n * c {
                let src = &d[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                        dst[y * wo + x] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, ho, wo], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let go = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                let gp = &mut g[p * h * w..(p + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = go[y * wo + x];
                        let (a, b) = (v * (T::one() - fy), v * fy);
                        gp[y0 * w + x0] = gp[y0 * w + x0] + a * (T::one() - fx);
                        gp[y0 * w + x1] = gp[y0 * w + x1] + a * fx;
                        gp[y1 * w + x0] = gp[y1 * w + x0] + b * (T::one() - fx);
                        gp[y1 * w + x1] = gp[y1 * w + x1] + b * fx;
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Averages non-overlapping `factor × factor` blocks.
    pub fn downsample_mean(&self, factor: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!("cannot downsample {h}x{w} by {factor}")));
        }
        if factor == 1 {
            return self.reshape(&[n, c, h, w]);
        }
        let (ho, wo) = (h / factor, w / factor);
        let norm = T::of((factor * factor) as f64).recip();
        let mut out = vec![T::zero(); n * c * ho * wo];
        {
            let d = self.data();
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        let o = p * ho * wo + (y / factor) * wo + x / factor;
                        out[o] = out[o] + d[p * h * w + y * w + x] * norm;
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, ho, wo], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        g[p * h * w + y * w + x] = ctx.grad[p * ho * wo + (y / factor) * wo + x / factor] * norm;
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}
