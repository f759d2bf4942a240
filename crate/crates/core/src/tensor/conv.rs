use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: Geom, cols: &mut [T]) {
    let (hw_out, k) = (g.cols(), g.k);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: Geom, dx: &mut [T]) {
    let (hw_out, k) = (g.cols(), g.k);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input: [N, Cin, H, W]`, `weight: [Cout, Cin, k, k]`,
/// `bias: [Cout]`. Output extents are `floor((H + 2p - k) / stride) + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if kh != kw {
        return Err(Error::invalid(format!("conv2d: kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("conv2d: bias shape {:?}, expected [{cout}]", b.shape())));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!("conv2d: {h}x{w} input too small for kernel {kh}")));
    }
    let g = Geom {
        cin,
        h,
        w,
        k: kh,
        stride,
        pad: padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    };
    let (rows, cols_n) = (g.rows(), g.cols());
    let direct = kh == 1 && stride == 1 && padding == 0;
    let mut out = vec![T::zero(); n * cout * cols_n];
    {
        let x = input.data();
        let wt = weight.data();
        let mut cols = vec![T::zero(); if direct { 0 } else { rows * cols_n }];
        for b in 0..n {
            let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
            let ob = &mut out[b * cout * cols_n..(b + 1) * cout * cols_n];
            if let Some(bias) = bias {
                let bias = bias.data();
                for (co, chunk) in ob.chunks_mut(cols_n).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            let src = if direct {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols[..]
            };
            T::gemm(cout, rows, cols_n, &wt, false, src, false, T::one(), ob);
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(vec![n, cout, g.ho, g.wo], out, inputs, move |ctx| {
        let x = ctx.inputs[0].data();
        let wt = ctx.inputs[1].data();
        let gout = ctx.grad;
        let mut dx = ctx.needs(0).then(|| vec![T::zero(); x.len()]);
        let mut dw = ctx.needs(1).then(|| vec![T::zero(); wt.len()]);
        let has_bias = ctx.inputs.len() == 3;
        let mut db = (has_bias && ctx.needs(2)).then(|| vec![T::zero(); cout]);
        let mut cols = vec![T::zero(); if direct { 0 } else { rows * cols_n }];
        let mut dcols = vec![T::zero(); rows * cols_n];
        for b in 0..n {
            let gb = &gout[b * cout * cols_n..(b + 1) * cout * cols_n];
            let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
            if let Some(db) = db.as_mut() {
                for (co, chunk) in gb.chunks(cols_n).enumerate() {
                    db[co] = db[co] + chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            if let Some(dw) = dw.as_mut() {
                let src = if direct {
                    xb
                } else {
                    im2col(xb, g, &mut cols);
                    &cols[..]
                };
                T::gemm(cout, cols_n, rows, gb, false, src, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
                if direct {
                    T::gemm(rows, cout, cols_n, &wt, true, gb, false, T::zero(), dxb);
                } else {
                    T::gemm(rows, cout, cols_n, &wt, true, gb, false, T::zero(), &mut dcols);
                    col2im(&dcols, g, dxb);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(db);
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[2, 3, 8, 10]);
        let w = Tensor::<f32>::zeros(&[5, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 5]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[2, 5, 6, 8]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::Shape(_))));
    }
}
