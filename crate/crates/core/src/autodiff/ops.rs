//! Elementwise arithmetic, reductions and layout operations.

use super::graph::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Log,
    Exp,
    /// Power with a constant exponent.
    Pow(f64),
    MaxWithConst(f64),
    Abs,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Shape produced by broadcasting `b` against `a`: equal shapes, or one
/// shape is a suffix of the other and is repeated along the leading axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_err!("shapes {:?} and {:?} are not broadcastable", a, b))
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary<T: Element>(kind: ElementwiseKind, x: T) -> T {
    match kind {
        ElementwiseKind::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        ElementwiseKind::Sigmoid => sigmoid(x),
        ElementwiseKind::Log => x.ln(),
        ElementwiseKind::Exp => x.exp(),
        ElementwiseKind::Pow(p) => x.powf(T::from_f64_lossy(p)),
        ElementwiseKind::MaxWithConst(c) => x.max(T::from_f64_lossy(c)),
        ElementwiseKind::Abs => x.abs(),
        _ => unreachable!("binary kind in unary path"),
    }
}

fn unary_grad<T: Element>(kind: ElementwiseKind, x: T, y: T) -> T {
    match kind {
        ElementwiseKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ElementwiseKind::Sigmoid => y * (T::one() - y),
        ElementwiseKind::Log => T::one() / x,
        ElementwiseKind::Exp => y,
        ElementwiseKind::Pow(p) => {
            let p = T::from_f64_lossy(p);
            p * x.powf(p - T::one())
        }
        ElementwiseKind::MaxWithConst(c) => {
            if x > T::from_f64_lossy(c) {
                T::one()
            } else {
                T::zero()
            }
        }
        ElementwiseKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        _ => unreachable!("binary kind in unary path"),
    }
}

/// Sums a full-size gradient down to an operand repeated along leading axes.
fn reduce_broadcast<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(invalid!("{:?} needs two operands", kind)),
            (false, Some(_)) => Err(invalid!("{:?} takes a single operand", kind)),
        }
    }

    fn unary(&mut self, kind: ElementwiseKind, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = self.value(a).iter().map(|&x| unary(kind, x)).collect();
        self.count_ops(out.len() as u64);
        self.record(
            &[a],
            shape,
            out,
            move |inp: &[&[T]], y: &[T], g: &[T], _: &[bool]| {
                let gx = inp[0]
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&x, &y), &g)| g * unary_grad(kind, x, y))
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let f = |x: T, y: T| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Sub => x - y,
            ElementwiseKind::Mul => x * y,
            ElementwiseKind::Div => x / y,
            _ => unreachable!(),
        };
        let out: Vec<T> = (0..n).map(|i| f(va[i % na], vb[i % nb])).collect();
        self.count_ops(n as u64);
        self.record(
            &[a, b],
            shape,
            out,
            move |inp: &[&[T]], _: &[T], g: &[T], needs: &[bool]| {
                let (va, vb) = (inp[0], inp[1]);
                let (na, nb) = (va.len(), vb.len());
                let n = g.len();
                let mut ga = needs[0].then(|| vec![T::zero(); n]);
                let mut gb = needs[1].then(|| vec![T::zero(); n]);
                for i in 0..n {
                    let (x, y) = (va[i % na], vb[i % nb]);
                    let (dx, dy) = match kind {
                        ElementwiseKind::Add => (T::one(), T::one()),
                        ElementwiseKind::Sub => (T::one(), -T::one()),
                        ElementwiseKind::Mul => (y, x),
                        ElementwiseKind::Div => (T::one() / y, -x / (y * y)),
                        _ => unreachable!(),
                    };
                    if let Some(ga) = &mut ga {
                        ga[i] = g[i] * dx;
                    }
                    if let Some(gb) = &mut gb {
                        gb[i] = g[i] * dy;
                    }
                }
                vec![
                    ga.map(|v| reduce_broadcast(&v, na)),
                    gb.map(|v| reduce_broadcast(&v, nb)),
                ]
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Sigmoid, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Exp, a)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.unary(ElementwiseKind::Pow(exponent), a)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(ElementwiseKind::MaxWithConst(c), a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Abs, a)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        self.count_ops(out.len() as u64);
        self.record(
            &[a],
            shape,
            out,
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| {
                vec![Some(g.iter().map(|&v| v * c).collect())]
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().copied().sum::<T>();
        let n = self.numel(a);
        self.count_ops(n as u64);
        self.record(
            &[a],
            Vec::new(),
            vec![total],
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| vec![Some(vec![g[0]; n])],
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.numel(a).max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.record(
            &[a],
            shape,
            out,
            |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| vec![Some(g.to_vec())],
        )
    }

    /// Concatenates along the first axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid!("concat of zero tensors"));
        };
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(shape_err!("cannot concatenate scalars along axis 0"));
        }
        let mut rows = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err!("concat0 shape mismatch: {:?} vs [_, {:?}]", s, tail));
            }
            rows += s[0];
            lens.push(self.numel(p));
        }
        let mut out = Vec::with_capacity(lens.iter().sum());
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.record(
            parts,
            shape,
            out,
            move |_: &[&[T]], _: &[T], g: &[T], needs: &[bool]| {
                let mut offset = 0;
                lens.iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let part = need.then(|| g[offset..offset + len].to_vec());
                        offset += len;
                        part
                    })
                    .collect()
            },
        )
    }

    /// Selects rows (first-axis slices) by index; repeated indices are allowed.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(shape_err!("index_rows on a scalar"));
        }
        let n_rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(invalid!("row {} out of range for {} rows", bad, n_rows));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let rows = rows.to_vec();
        let total = n_rows * width;
        self.record(
            &[a],
            out_shape,
            out,
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| {
                let mut ga = vec![T::zero(); total];
                for (i, &r) in rows.iter().enumerate() {
                    ga[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[i * width..(i + 1) * width])
                        .for_each(|(a, &b)| *a += b);
                }
                vec![Some(ga)]
            },
        )
    }

    /// Rearranges a dense head output `[N, A·D, H, W]` into per-anchor rows
    /// `[N·H·W·A, D]`, ordered by image, then row, column, anchor.
    pub fn nchw_to_rows(&mut self, a: Var, row_width: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || row_width == 0 || !s[1].is_multiple_of(row_width) {
            return Err(shape_err!(
                "nchw_to_rows expects [N, A*{}, H, W], got {:?}",
                row_width,
                s
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let anchors = c / row_width;
        let hw = h * w;
        let src = self.value(a);
        let mut out = vec![T::zero(); src.len()];
        let map = move |b: usize, ch: usize, p: usize| {
            let (anchor, j) = (ch / row_width, ch % row_width);
            (((b * hw + p) * anchors + anchor) * row_width) + j
        };
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[map(b, ch, p)] = src[(b * c + ch) * hw + p];
                }
            }
        }
        self.record(
            &[a],
            vec![n * hw * anchors, row_width],
            out,
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| {
                let mut ga = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            ga[(b * c + ch) * hw + p] = g[map(b, ch, p)];
                        }
                    }
                }
                vec![Some(ga)]
            },
        )
    }

    /// Nearest-neighbour 2× spatial upsampling of `[N, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (oh, ow) = (2 * s.get(2).copied().unwrap_or(0), 2 * s.get(3).copied().unwrap_or(0));
        self.upsample_nearest2x_to(a, oh, ow)
    }

    /// 2× nearest upsampling cropped to `oh × ow` (each at most twice the
    /// input extent), used when a finer level has an odd extent.
    pub fn upsample_nearest2x_to(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("upsample expects NCHW, got {:?}", s));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if oh > 2 * h || ow > 2 * w {
            return Err(shape_err!("cannot upsample {}x{} to {}x{}", h, w, oh, ow));
        }
        let src = self.value(a);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        self.count_ops(out.len() as u64);
        self.record(
            &[a],
            vec![s[0], s[1], oh, ow],
            out,
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| {
                let mut ga = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            ga[(p * h + y / 2) * w + x / 2] += g[(p * oh + y) * ow + x];
                        }
                    }
                }
                vec![Some(ga)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[3], vec![-1.0, 0.0, 2.0]);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = leaf(&mut g, &[1], vec![0.0]);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let z = leaf(&mut g, &[1], vec![0.0]);
        let s = g.sigmoid(z).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(z).unwrap()[0];
        let h = 1e-3;
        let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!((analytic - 0.25).abs() < 1e-12);
        assert!((analytic - fd).abs() / fd < 1e-4);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        // a second sweep accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn broadcasting_along_leading_axes() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut g, &[3], vec![10.0, 20.0, 30.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);

        let d = leaf(&mut g, &[2], vec![1.0, 1.0]);
        assert!(g.add(a, d).is_err());
        assert!(g.elementwise(ElementwiseKind::Add, a, None).is_err());
        assert!(g.elementwise(ElementwiseKind::Relu, a, Some(b)).is_err());
    }

    #[test]
    fn domain_violations_propagate_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([2], vec![-1.0, 0.0]).unwrap();
        let l = g.log(x).unwrap();
        assert!(g.value(l)[0].is_nan());
        assert!(g.value(l)[1].is_infinite());
    }

    #[test]
    fn layout_ops_route_gradients() {
        let mut g = Graph::<f64>::new();
        // N=1, A=2, D=2, H=1, W=2
        let x = leaf(&mut g, &[1, 4, 1, 2], (0..8).map(f64::from).collect());
        let rows = g.nchw_to_rows(x, 2).unwrap();
        assert_eq!(g.shape(rows), &[4, 2]);
        // position 0: anchor 0 -> channels 0,1 ; anchor 1 -> channels 2,3
        assert_eq!(g.value(rows), &[0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
        let picked = g.index_rows(rows, &[1, 1, 3]).unwrap();
        let s = g.sum(picked).unwrap();
        g.backward(s).unwrap();
        // row 1 = channels 4,6 at position 0 (counted twice), row 3 = channels 5,7 at pos 1
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 2.0, 1.0]
        );
    }

    #[test]
    fn upsample_and_concat() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 1, 1, 2], vec![1.0, 2.0]);
        let u = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(u), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let y = leaf(&mut g, &[2, 1, 1, 2], vec![0.0; 4]);
        let c = g.concat0(&[x, y]).unwrap();
        assert_eq!(g.shape(c), &[3, 1, 1, 2]);
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }
}
