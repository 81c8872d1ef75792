//! 2-D convolution and 2×2/stride-2 transposed convolution over NCHW data.
//!
//! Both lower to im2col plus a GEMM; the backward passes recompute the
//! column buffer instead of keeping it alive on the tape.

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{matmul, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err!(
                "conv2d expects NCHW input and KCkhkw weight, got {:?} and {:?}",
                input,
                weight
            ));
        }
        if input[1] != weight[1] {
            return Err(shape_err!(
                "conv2d channel mismatch: input {:?}, weight {:?}",
                input,
                weight
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(shape_err!(
                "conv2d kernel {}x{} does not fit padded input {}x{}",
                kh,
                kw,
                ph,
                pw
            ));
        }
        let out_h = (ph - kh) / stride + 1;
        let out_w = (pw - kw) / stride + 1;
        Ok(Conv2dGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.col_rows() * self.col_cols()) as u64
    }
}

fn im2col<T: Element>(geo: &Conv2dGeometry, image: &[T], col: &mut [T]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (oh, ow) = (geo.out_h, geo.out_w);
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h as isize {
            for kj in 0..geo.kernel_w as isize {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = oy as isize * s - p + ki;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(y * w) as usize..((y + 1) * w) as usize];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = ox as isize * s - p + kj;
                        *v = if x < 0 || x >= w {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(geo: &Conv2dGeometry, col: &[T], image: &mut [T]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (oh, ow) = (geo.out_h, geo.out_w);
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &mut image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h as isize {
            for kj in 0..geo.kernel_w as isize {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = oy as isize * s - p + ki;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = ox as isize * s - p + kj;
                        if x >= 0 && x < w {
                            plane[(y * w + x) as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution on raw buffers.
pub fn conv2d_forward<T: Element>(
    geo: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ckk, ohw, k) = (geo.col_rows(), geo.col_cols(), geo.out_channels);
    let in_stride = geo.in_channels * geo.height * geo.width;
    let mut out = vec![T::zero(); geo.batch * k * ohw];
    let mut col = vec![T::zero(); ckk * ohw];
    for n in 0..geo.batch {
        im2col(geo, &input[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * k * ohw..(n + 1) * k * ohw];
        matmul(k, ckk, ohw, weight, false, &col, false, dst, false);
        if let Some(b) = bias {
            for (kk, &bv) in b.iter().enumerate() {
                dst[kk * ohw..(kk + 1) * ohw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(
    geo: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    needs: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let (ckk, ohw, k) = (geo.col_rows(), geo.col_cols(), geo.out_channels);
    let in_stride = geo.in_channels * geo.height * geo.width;
    let mut g_in = needs[0].then(|| vec![T::zero(); input.len()]);
    let mut g_w = needs[1].then(|| vec![T::zero(); weight.len()]);
    let mut g_b = needs[2].then(|| vec![T::zero(); k]);
    let mut col = vec![T::zero(); ckk * ohw];
    let mut g_col = vec![T::zero(); ckk * ohw];
    for n in 0..geo.batch {
        let go = &grad_out[n * k * ohw..(n + 1) * k * ohw];
        if let Some(gw) = &mut g_w {
            im2col(geo, &input[n * in_stride..(n + 1) * in_stride], &mut col);
            matmul(k, ohw, ckk, go, false, &col, true, gw, true);
        }
        if let Some(gi) = &mut g_in {
            matmul(ckk, k, ohw, weight, true, go, false, &mut g_col, false);
            col2im(geo, &g_col, &mut gi[n * in_stride..(n + 1) * in_stride]);
        }
        if let Some(gb) = &mut g_b {
            for (kk, acc) in gb.iter_mut().enumerate() {
                *acc += go[kk * ohw..(kk + 1) * ohw].iter().copied().sum::<T>();
            }
        }
    }
    [g_in, g_w, g_b]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
}

impl ConvTransposeGeometry {
    /// `input` is `[N, C, H, W]`, `weight` is `[C, K, 2, 2]`.
    pub fn new(input: &[usize], weight: &[usize]) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || weight[2] != 2 || weight[3] != 2 {
            return Err(shape_err!(
                "transposed conv expects NCHW input and [C, K, 2, 2] weight, got {:?} and {:?}",
                input,
                weight
            ));
        }
        if input[1] != weight[0] {
            return Err(shape_err!(
                "transposed conv channel mismatch: input {:?}, weight {:?}",
                input,
                weight
            ));
        }
        Ok(ConvTransposeGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[1],
        })
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.in_channels * self.out_channels * 4 * self.height * self.width) as u64
    }
}

pub fn conv_transpose2x2_forward<T: Element>(
    geo: &ConvTransposeGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (c, k, h, w) = (geo.in_channels, geo.out_channels, geo.height, geo.width);
    let (hw, k4) = (h * w, k * 4);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); geo.batch * k * oh * ow];
    let mut taps = vec![T::zero(); k4 * hw];
    for n in 0..geo.batch {
        let src = &input[n * c * hw..(n + 1) * c * hw];
        matmul(k4, c, hw, weight, true, src, false, &mut taps, false);
        let dst = &mut out[n * k * oh * ow..(n + 1) * k * oh * ow];
        for kk in 0..k {
            let b = bias.map_or(T::zero(), |b| b[kk]);
            for tap in 0..4 {
                let (a, bb) = (tap / 2, tap % 2);
                let row = &taps[(kk * 4 + tap) * hw..(kk * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        dst[(kk * oh + 2 * i + a) * ow + 2 * j + bb] = row[i * w + j] + b;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2x2_backward<T: Element>(
    geo: &ConvTransposeGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    needs: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let (c, k, h, w) = (geo.in_channels, geo.out_channels, geo.height, geo.width);
    let (hw, k4) = (h * w, k * 4);
    let (oh, ow) = (2 * h, 2 * w);
    let mut g_in = needs[0].then(|| vec![T::zero(); input.len()]);
    let mut g_w = needs[1].then(|| vec![T::zero(); weight.len()]);
    let mut g_b = needs[2].then(|| vec![T::zero(); k]);
    let mut g_taps = vec![T::zero(); k4 * hw];
    for n in 0..geo.batch {
        let go = &grad_out[n * k * oh * ow..(n + 1) * k * oh * ow];
        for kk in 0..k {
            for tap in 0..4 {
                let (a, bb) = (tap / 2, tap % 2);
                let row = &mut g_taps[(kk * 4 + tap) * hw..(kk * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        row[i * w + j] = go[(kk * oh + 2 * i + a) * ow + 2 * j + bb];
                    }
                }
            }
        }
        let src = &input[n * c * hw..(n + 1) * c * hw];
        if let Some(gi) = &mut g_in {
            matmul(c, k4, hw, weight, false, &g_taps, false, &mut gi[n * c * hw..(n + 1) * c * hw], false);
        }
        if let Some(gw) = &mut g_w {
            matmul(c, hw, k4, src, false, &g_taps, true, gw, true);
        }
        if let Some(gb) = &mut g_b {
            for (kk, acc) in gb.iter_mut().enumerate() {
                *acc += go[kk * oh * ow..(kk + 1) * oh * ow].iter().copied().sum::<T>();
            }
        }
    }
    [g_in, g_w, g_b]
}

impl<T: Element> Graph<T> {
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = Conv2dGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_channels] {
                return Err(shape_err!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geo.out_channels
                ));
            }
        }
        let out = conv2d_forward(
            &geo,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        self.count_ops(geo.macs());
        let shape = vec![geo.batch, geo.out_channels, geo.out_h, geo.out_w];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record(
            &inputs,
            shape,
            out,
            move |inp: &[&[T]], _: &[T], g: &[T], needs: &[bool]| {
                let [gi, gw, gb] = conv2d_backward(
                    &geo,
                    inp[0],
                    inp[1],
                    g,
                    [needs[0], needs[1], has_bias && needs[2]],
                );
                let mut out = vec![gi, gw];
                if has_bias {
                    out.push(gb);
                }
                out
            },
        )
    }

    /// Transposed convolution with a 2×2 kernel and stride 2; spatial
    /// extents double. Weight layout is `[C_in, C_out, 2, 2]`.
    pub fn conv_transpose2d_2x2(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let geo = ConvTransposeGeometry::new(self.shape(input), self.shape(weight))?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_channels] {
                return Err(shape_err!(
                    "transposed conv bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geo.out_channels
                ));
            }
        }
        let out = conv_transpose2x2_forward(
            &geo,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        self.count_ops(geo.macs());
        let shape = vec![geo.batch, geo.out_channels, 2 * geo.height, 2 * geo.width];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record(
            &inputs,
            shape,
            out,
            move |inp: &[&[T]], _: &[T], g: &[T], needs: &[bool]| {
                let [gi, gw, gb] = conv_transpose2x2_backward(
                    &geo,
                    inp[0],
                    inp[1],
                    g,
                    [needs[0], needs[1], has_bias && needs[2]],
                );
                let mut out = vec![gi, gw];
                if has_bias {
                    out.push(gb);
                }
                out
            },
        )
    }
}
