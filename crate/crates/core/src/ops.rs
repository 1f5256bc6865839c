//! Forward and backward kernels for the primitive operations of a cell
//! network. All spatial ops are stride 1 with zero same-padding unless
//! noted, so they preserve (C, H, W).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// k×k convolution with bias, optional dilation.
    Conv { kernel: usize, dilation: usize },
    /// 3×3 average pool; padded positions are excluded from the count.
    AvgPool3,
    /// 3×3 max pool; padded positions never win.
    MaxPool3,
    /// 2×2 average pool with stride 2.
    AvgPool2,
    Skip,
    Zero,
    Relu,
    GlobalAvgPool,
    /// Affine map on flattened features; weight is (out, in).
    Linear,
}

impl Primitive {
    pub fn has_params(self) -> bool {
        matches!(self, Primitive::Conv { .. } | Primitive::Linear)
    }
}

pub fn apply_primitive(
    prim: Primitive,
    input: &Tensor,
    params: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    if prim.has_params() != params.is_some() {
        return Err(Error::Shape(format!(
            "{prim:?} {} parameters",
            if prim.has_params() { "requires" } else { "takes no" }
        )));
    }
    match prim {
        Primitive::Conv { dilation, kernel } => {
            let (w, b) = params.unwrap();
            if w.shape().len() != 4 || w.shape()[2] != kernel || w.shape()[3] != kernel {
                return Err(Error::Shape(format!(
                    "conv{kernel}x{kernel} weight has shape {:?}",
                    w.shape()
                )));
            }
            conv2d_forward(input, w, b, dilation)
        }
        Primitive::AvgPool3 => avg_pool3_forward(input),
        Primitive::MaxPool3 => Ok(max_pool3_forward(input)?.0),
        Primitive::AvgPool2 => avg_pool2_forward(input),
        Primitive::Skip => Ok(input.clone()),
        Primitive::Zero => Ok(Tensor::zeros(input.shape())),
        Primitive::Relu => Ok(relu_forward(input)),
        Primitive::GlobalAvgPool => global_avg_pool_forward(input),
        Primitive::Linear => {
            let (w, b) = params.unwrap();
            linear_forward(input, w, b)
        }
    }
}

pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("expected (N, C, H, W), got {s:?}"))),
    }
}

/// Output positions `y` in `[lo, hi)` for which `y + offset` lies in `[0, len)`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    dilation: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = dims4(input)?;
    let (cout, wcin, k) = match *weight.shape() {
        [co, ci, k, k2] if k == k2 && k % 2 == 1 => (co, ci, k),
        ref s => return Err(Error::Shape(format!("bad conv weight shape {s:?}"))),
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv expects {wcin} input channels, got {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    let hw = h * w;
    let pad = (dilation * (k - 1) / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * cout * hw];
    for b in 0..n {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            o.fill(bias.data()[co]);
            for ci in 0..cin {
                let inp = &x[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for ky in 0..k {
                    let dy = (ky * dilation) as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = (kx * dilation) as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                        let sx = (x0 as isize + dx) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let irow = &inp[iy * w + sx..iy * w + sx + (x1 - x0)];
                            for (a, v) in orow.iter_mut().zip(irow) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, h, w], out))
}

/// Returns (d input, d weight, d bias).
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dilation: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, cin, h, w] = *input.shape() else {
        unreachable!("checked in forward")
    };
    let [cout, _, k, _] = *weight.shape() else {
        unreachable!("checked in forward")
    };
    let hw = h * w;
    let pad = (dilation * (k - 1) / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let g = dout.data();
    let mut dx_buf = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; cout];
    for b in 0..n {
        for co in 0..cout {
            let go = &g[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            db[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (b * cin + ci) * hw;
                for ky in 0..k {
                    let dy = (ky * dilation) as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dxo = (kx * dilation) as isize - pad;
                        let (x0, x1) = valid_range(w, dxo);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let sx = (x0 as isize + dxo) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let irange = base + iy * w + sx..base + iy * w + sx + (x1 - x0);
                            for (gv, iv) in grow.iter().zip(&x[irange.clone()]) {
                                acc += gv * iv;
                            }
                            for (gv, dv) in grow.iter().zip(&mut dx_buf[irange]) {
                                *dv += wv * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx_buf),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![cout], db),
    )
}

pub(crate) fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through a ReLU given its output; the derivative at 0 is 0.
pub(crate) fn relu_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(output.shape().to_vec(), data)
}

pub(crate) fn avg_pool3_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
                let (xa, xb) = (xx.saturating_sub(1), (xx + 2).min(w));
                let mut s = 0.0;
                for yy in ya..yb {
                    for xk in xa..xb {
                        s += plane[yy * w + xk];
                    }
                }
                out[p * h * w + y * w + xx] = s / ((yb - ya) * (xb - xa)) as f64;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub(crate) fn avg_pool3_backward(shape: &[usize], dout: &Tensor) -> Tensor {
    let [n, c, h, w] = *shape else { unreachable!() };
    let g = dout.data();
    let mut dx = vec![0.0; g.len()];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
                let (xa, xb) = (xx.saturating_sub(1), (xx + 2).min(w));
                let share = g[p * h * w + y * w + xx] / ((yb - ya) * (xb - xa)) as f64;
                for yy in ya..yb {
                    for xk in xa..xb {
                        dx[p * h * w + yy * w + xk] += share;
                    }
                }
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), dx)
}

/// Returns the pooled tensor and, per output element, the flat index of the
/// winning input element (first maximum in row-major window order).
pub(crate) fn max_pool3_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(input)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut arg = vec![0usize; x.len()];
    for p in 0..n * c {
        let off = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xk in xx.saturating_sub(1)..(xx + 2).min(w) {
                        let v = x[off + yy * w + xk];
                        if v > best {
                            best = v;
                            best_i = off + yy * w + xk;
                        }
                    }
                }
                out[off + y * w + xx] = best;
                arg[off + y * w + xx] = best_i;
            }
        }
    }
    Ok((Tensor::from_parts(input.shape().to_vec(), out), arg))
}

pub(crate) fn max_pool3_backward(shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = vec![0.0; dout.len()];
    for (g, &i) in dout.data().iter().zip(argmax) {
        dx[i] += g;
    }
    Tensor::from_parts(shape.to_vec(), dx)
}

pub(crate) fn avg_pool2_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 stride-2 pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = p * h * w + 2 * y * w + 2 * xx;
                out[p * oh * ow + y * ow + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn avg_pool2_backward(shape: &[usize], dout: &Tensor) -> Tensor {
    let [n, c, h, w] = *shape else { unreachable!() };
    let (oh, ow) = (h / 2, w / 2);
    let g = dout.data();
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[p * oh * ow + y * ow + xx];
                let i = p * h * w + 2 * y * w + 2 * xx;
                dx[i] += v;
                dx[i + 1] += v;
                dx[i + w] += v;
                dx[i + w + 1] += v;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), dx)
}

pub(crate) fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input)?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_avg_pool_backward(shape: &[usize], dout: &Tensor) -> Tensor {
    let [_, _, h, w] = *shape else { unreachable!() };
    let hw = h * w;
    let data = dout
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.batch_size();
    let f = input.sample_len();
    let (o, wf) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::Shape(format!("bad linear weight shape {s:?}"))),
    };
    if wf != f || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "linear {wf}->{o} applied to {f} features"
        )));
    }
    let mut out = vec![0.0; n * o];
    for b in 0..n {
        let xs = input.sample(b);
        for r in 0..o {
            let row = &weight.data()[r * f..(r + 1) * f];
            out[b * o + r] = bias.data()[r] + crate::tensor::dot(row, xs);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub(crate) fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = input.batch_size();
    let f = input.sample_len();
    let o = weight.shape()[0];
    let g = dout.data();
    let mut dx = vec![0.0; n * f];
    let mut dw = vec![0.0; o * f];
    let mut db = vec![0.0; o];
    for b in 0..n {
        let xs = input.sample(b);
        for r in 0..o {
            let gv = g[b * o + r];
            db[r] += gv;
            let row = &weight.data()[r * f..(r + 1) * f];
            for j in 0..f {
                dw[r * f + j] += gv * xs[j];
                dx[b * f + j] += gv * row[j];
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len).map(|i| ((i * 7 % 11) as f64) - 5.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_and_skip() {
        let x = ramp(&[2, 3, 4, 4]);
        let z = apply_primitive(Primitive::Zero, &x, None).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(apply_primitive(Primitive::Skip, &x, None).unwrap(), x);
    }

    #[test]
    fn avg_pool_preserves_constant() {
        let x = Tensor::full(&[1, 2, 5, 3], 2.5);
        let y = apply_primitive(Primitive::AvgPool3, &x, None).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn conv_without_bias_maps_zero_to_zero() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = ramp(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let y = apply_primitive(Primitive::Conv { kernel: 3, dilation: 2 }, &x, Some((&w, &b)))
            .unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = ramp(&[2, 2, 5, 4]);
        let w = ramp(&[3, 2, 3, 3]).map(|v| v * 0.1);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 0.0]).unwrap();
        for dil in [1usize, 2] {
            let y = conv2d_forward(&x, &w, &b, dil).unwrap();
            let pad = dil as isize;
            for n in 0..2 {
                for co in 0..3 {
                    for yy in 0..5isize {
                        for xx in 0..4isize {
                            let mut s = b.data()[co];
                            for ci in 0..2 {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let iy = yy + ky * dil as isize - pad;
                                        let ix = xx + kx * dil as isize - pad;
                                        if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                            s += w.data()[((co * 2 + ci) * 3 + ky as usize) * 3
                                                + kx as usize]
                                                * x.data()[((n * 2 + ci) * 5 + iy as usize) * 4
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((n * 3 + co) * 5 + yy as usize) * 4 + xx as usize];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool3_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0; 4]);
        assert!(arg.iter().all(|&i| i == 1));
    }

    #[test]
    fn global_pool_and_linear() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        let p = apply_primitive(Primitive::GlobalAvgPool, &x, None).unwrap();
        assert_eq!(p.data(), &[2.0, -1.0]);
        let w = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = apply_primitive(Primitive::Linear, &p, Some((&w, &b))).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn params_required_exactly_for_parameterized_kinds() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(apply_primitive(Primitive::Linear, &x, None).is_err());
        let w = Tensor::zeros(&[1, 1]);
        assert!(apply_primitive(Primitive::Relu, &x, Some((&w, &w))).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 1).is_err());
    }
}
