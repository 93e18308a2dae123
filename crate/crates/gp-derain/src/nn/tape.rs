//! Reverse-mode autodiff over a flat tape.
//!
//! Forward calls append nodes; [`Tape::backward`] seeds one or more nodes
//! with output-side gradients and walks the tape once in reverse,
//! accumulating into named parameters. The op set is fixed: 3x3 same
//! convolution, dense, 2x2 mean downsampling, nearest upsampling, channel
//! concatenation, rectifier, elementwise subtraction, and a data-free
//! reshape. A tape is built per optimization step and dropped afterwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Downsample2 { x: NodeId },
    Upsample2 { x: NodeId },
    ConcatC { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient of its own.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Named parameter leaf; `backward` reports its gradient under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Param(name.into()), value)
    }

    fn chw(&self, id: NodeId, context: &str) -> Result<(usize, usize, usize)> {
        match self.nodes[id.0].value.shape() {
            Shape::Chw(c, h, w) => Ok((c, h, w)),
            s => Err(Error::ShapeMismatch {
                context: context.into(),
                expected: "channels-first image".into(),
                got: s.to_string(),
            }),
        }
    }

    /// Same-size 3x3 convolution with zero padding. Weights are flat
    /// `[c_out, c_in, 3, 3]` row-major, bias has one value per output
    /// channel.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (ci, h, wd) = self.chw(x, "conv3x3 input")?;
        let wlen = self.nodes[w.0].value.len();
        let co = self.nodes[b.0].value.len();
        if wlen != co * ci * 9 {
            return Err(Error::ShapeMismatch {
                context: "conv3x3 weights".into(),
                expected: format!("{co}*{ci}*9 = {} values", co * ci * 9),
                got: format!("{wlen} values"),
            });
        }
        let mut out = vec![0.0; co * h * wd];
        conv3x3_forward(
            self.nodes[x.0].value.values(),
            self.nodes[w.0].value.values(),
            self.nodes[b.0].value.values(),
            ci,
            co,
            h,
            wd,
            &mut out,
        );
        Ok(self.push(
            Op::Conv3x3 { x, w, b },
            Tensor::new(Shape::Chw(co, h, wd), out)?,
        ))
    }

    /// Fully connected layer over the flattened input. Weights are flat
    /// `[m, n]` row-major for n input and m output values.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len();
        let m = self.nodes[b.0].value.len();
        let wlen = self.nodes[w.0].value.len();
        if wlen != m * n {
            return Err(Error::ShapeMismatch {
                context: "dense weights".into(),
                expected: format!("{m}*{n} = {} values", m * n),
                got: format!("{wlen} values"),
            });
        }
        let xv = self.nodes[x.0].value.values();
        let wv = self.nodes[w.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o = bv[i] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(Op::Dense { x, w, b }, Tensor::flat(out)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.values().iter().map(|&a| a.max(0.0)).collect();
        let shape = v.shape();
        self.push(Op::Relu { x }, Tensor::new(shape, out).unwrap())
    }

    /// 2x2 mean pooling with stride 2; spatial dims must be even.
    pub fn downsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "downsample input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "downsample input".into(),
                expected: "even spatial dims".into(),
                got: format!("{h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.nodes[x.0].value.values();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * oh * ow + y * ow + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        Ok(self.push(
            Op::Downsample2 { x },
            Tensor::new(Shape::Chw(c, oh, ow), out)?,
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "upsample input")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.nodes[x.0].value.values();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let src = ch * h * w + (y / 2) * w;
                let dst = ch * oh * ow + y * ow;
                for xx in 0..ow {
                    out[dst + xx] = xv[src + xx / 2];
                }
            }
        }
        Ok(self.push(
            Op::Upsample2 { x },
            Tensor::new(Shape::Chw(c, oh, ow), out)?,
        ))
    }

    /// Channel concatenation `[a; b]`; spatial dims must agree.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.chw(a, "concat lhs")?;
        let (cb, hb, wb) = self.chw(b, "concat rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                context: "concat".into(),
                expected: format!("{ha}x{wa}"),
                got: format!("{hb}x{wb}"),
            });
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(self.nodes[a.0].value.values());
        out.extend_from_slice(self.nodes[b.0].value.values());
        Ok(self.push(
            Op::ConcatC { a, b },
            Tensor::new(Shape::Chw(ca + cb, ha, wa), out)?,
        ))
    }

    /// Elementwise `a - b`; shapes must match exactly.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: "sub".into(),
                expected: sa.to_string(),
                got: sb.to_string(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub { a, b }, Tensor::new(sa, out)?))
    }

    /// Reinterprets the values under a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    /// Accumulates d(seeded outputs)/d(parameter) for every parameter the
    /// seeded values depend on. Seeds may target any node, including
    /// interior ones, and add up when they overlap.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let want = self.nodes[id.0].value.shape();
            if seed.shape() != want {
                return Err(Error::ShapeMismatch {
                    context: "backward seed".into(),
                    expected: want.to_string(),
                    got: seed.shape().to_string(),
                });
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (g, s) in slot.iter_mut().zip(seed.values()) {
                *g += s;
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(gout); // leaves keep their gradient
                    continue;
                }
                Op::Conv3x3 { x, w, b } => {
                    let (ci, h, wd) = match self.nodes[x.0].value.shape() {
                        Shape::Chw(c, h, w) => (c, h, w),
                        _ => unreachable!("checked at record time"),
                    };
                    let co = self.nodes[b.0].value.len();
                    let xv = self.nodes[x.0].value.values().to_vec();
                    let wv = self.nodes[w.0].value.values().to_vec();
                    {
                        let gx = grad_slot(&mut grads, *x, ci * h * wd);
                        conv3x3_backward_input(&gout, &wv, ci, co, h, wd, gx);
                    }
                    {
                        let gw = grad_slot(&mut grads, *w, co * ci * 9);
                        conv3x3_backward_weights(&gout, &xv, ci, co, h, wd, gw);
                    }
                    let gb = grad_slot(&mut grads, *b, co);
                    for c in 0..co {
                        gb[c] += gout[c * h * wd..(c + 1) * h * wd].iter().sum::<f64>();
                    }
                }
                Op::Dense { x, w, b } => {
                    let n = self.nodes[x.0].value.len();
                    let m = self.nodes[b.0].value.len();
                    let xv = self.nodes[x.0].value.values().to_vec();
                    let wv = self.nodes[w.0].value.values().to_vec();
                    {
                        let gx = grad_slot(&mut grads, *x, n);
                        for i in 0..m {
                            let gi = gout[i];
                            if gi != 0.0 {
                                let row = &wv[i * n..(i + 1) * n];
                                for (g, wk) in gx.iter_mut().zip(row) {
                                    *g += gi * wk;
                                }
                            }
                        }
                    }
                    {
                        let gw = grad_slot(&mut grads, *w, m * n);
                        for i in 0..m {
                            let gi = gout[i];
                            if gi != 0.0 {
                                let row = &mut gw[i * n..(i + 1) * n];
                                for (g, xk) in row.iter_mut().zip(&xv) {
                                    *g += gi * xk;
                                }
                            }
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, m);
                    for (g, go) in gb.iter_mut().zip(&gout) {
                        *g += go;
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.values().to_vec();
                    let gx = grad_slot(&mut grads, *x, xv.len());
                    for ((g, go), xi) in gx.iter_mut().zip(&gout).zip(&xv) {
                        if *xi > 0.0 {
                            *g += go;
                        }
                    }
                }
                Op::Downsample2 { x } => {
                    let (c, h, w) = match self.nodes[x.0].value.shape() {
                        Shape::Chw(c, h, w) => (c, h, w),
                        _ => unreachable!(),
                    };
                    let (oh, ow) = (h / 2, w / 2);
                    let gx = grad_slot(&mut grads, *x, c * h * w);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let g = 0.25 * gout[ch * oh * ow + y * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                gx[base] += g;
                                gx[base + 1] += g;
                                gx[base + w] += g;
                                gx[base + w + 1] += g;
                            }
                        }
                    }
                }
                Op::Upsample2 { x } => {
                    let (c, h, w) = match self.nodes[x.0].value.shape() {
                        Shape::Chw(c, h, w) => (c, h, w),
                        _ => unreachable!(),
                    };
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = grad_slot(&mut grads, *x, c * h * w);
                    for ch in 0..c {
                        for y in 0..oh {
                            let src = ch * h * w + (y / 2) * w;
                            let dst = ch * oh * ow + y * ow;
                            for xx in 0..ow {
                                gx[src + xx / 2] += gout[dst + xx];
                            }
                        }
                    }
                }
                Op::ConcatC { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    let nb = self.nodes[b.0].value.len();
                    {
                        let ga = grad_slot(&mut grads, *a, na);
                        for (g, go) in ga.iter_mut().zip(&gout[..na]) {
                            *g += go;
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, nb);
                    for (g, go) in gb.iter_mut().zip(&gout[na..]) {
                        *g += go;
                    }
                }
                Op::Sub { a, b } => {
                    {
                        let ga = grad_slot(&mut grads, *a, gout.len());
                        for (g, go) in ga.iter_mut().zip(&gout) {
                            *g += go;
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, gout.len());
                    for (g, go) in gb.iter_mut().zip(&gout) {
                        *g -= go;
                    }
                }
                Op::Reshape { x } => {
                    let gx = grad_slot(&mut grads, *x, gout.len());
                    for (g, go) in gx.iter_mut().zip(&gout) {
                        *g += go;
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = grads[idx].take() {
                    let t = Tensor::new(node.value.shape(), g)?;
                    // A parameter bound twice under one name accumulates.
                    match out.remove(name) {
                        None => {
                            out.insert(name.clone(), t);
                        }
                        Some(prev) => {
                            let sum: Vec<f64> = prev
                                .values()
                                .iter()
                                .zip(t.values())
                                .map(|(a, b)| a + b)
                                .collect();
                            out.insert(name.clone(), Tensor::new(prev.shape(), sum)?);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    out: &mut [f64],
) {
    let hw = h * wd;
    for c_out in 0..co {
        let out_plane = &mut out[c_out * hw..(c_out + 1) * hw];
        out_plane.fill(b[c_out]);
        for c_in in 0..ci {
            let x_plane = &x[c_in * hw..(c_in + 1) * hw];
            let wbase = (c_out * ci + c_in) * 9;
            for k in 0..9 {
                let wk = w[wbase + k];
                if wk == 0.0 {
                    continue;
                }
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                shifted_axpy(out_plane, x_plane, wk, dy, dx, h, wd);
            }
        }
    }
}

/// `dst[y][x] += a * src[y+dy][x+dx]` over the valid range.
fn shifted_axpy(dst: &mut [f64], src: &[f64], a: f64, dy: isize, dx: isize, h: usize, w: usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + sx..sy * w + sx + (x1 - x0)];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// Dot of `a[y][x]` with `b[y+dy][x+dx]` over the valid range.
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, h: usize, w: usize) -> f64 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let pa = &a[y * w + x0..y * w + x1];
        let pb = &b[sy * w + sx..sy * w + sx + (x1 - x0)];
        acc += pa.iter().zip(pb).map(|(x, y)| x * y).sum::<f64>();
    }
    acc
}

fn conv3x3_backward_input(
    gout: &[f64],
    w: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    gx: &mut [f64],
) {
    let hw = h * wd;
    for c_out in 0..co {
        let g_plane = &gout[c_out * hw..(c_out + 1) * hw];
        for c_in in 0..ci {
            let gx_plane = &mut gx[c_in * hw..(c_in + 1) * hw];
            let wbase = (c_out * ci + c_in) * 9;
            for k in 0..9 {
                let wk = w[wbase + k];
                if wk == 0.0 {
                    continue;
                }
                // out[y][x] reads in[y+dy][x+dx], so grads flow back with
                // the opposite shift.
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                shifted_axpy(gx_plane, g_plane, wk, -dy, -dx, h, wd);
            }
        }
    }
}

fn conv3x3_backward_weights(
    gout: &[f64],
    x: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    gw: &mut [f64],
) {
    let hw = h * wd;
    for c_out in 0..co {
        let g_plane = &gout[c_out * hw..(c_out + 1) * hw];
        for c_in in 0..ci {
            let x_plane = &x[c_in * hw..(c_in + 1) * hw];
            let wbase = (c_out * ci + c_in) * 9;
            for k in 0..9 {
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                gw[wbase + k] += shifted_dot(g_plane, x_plane, dy, dx, h, wd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite difference of `f` at parameter `name[idx]`.
    fn numeric_grad(
        f: &dyn Fn(&BTreeMap<String, Tensor>) -> f64,
        params: &BTreeMap<String, Tensor>,
        name: &str,
        idx: usize,
        h: f64,
    ) -> f64 {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().values_mut()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().values_mut()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn check_close(ad: f64, fd: f64, what: &str) {
        let denom = ad.abs().max(fd.abs());
        if denom < 1e-8 {
            assert!((ad - fd).abs() < 1e-8, "{what}: {ad} vs {fd}");
        } else {
            assert!(
                (ad - fd).abs() / denom < 1e-4,
                "{what}: {ad} vs {fd} (rel {})",
                (ad - fd).abs() / denom
            );
        }
    }

    /// Runs a single-op graph, reduces the output with fixed random
    /// coefficients, and compares every analytic gradient against central
    /// differences.
    fn check_op_gradients(
        build: &dyn Fn(&mut Tape, &BTreeMap<String, Tensor>) -> NodeId,
        params: &BTreeMap<String, Tensor>,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_coeffs = {
            let mut t = Tape::new();
            let out = build(&mut t, params);
            rand_vec(&mut rng, t.value(out).len())
        };
        let scalar = |p: &BTreeMap<String, Tensor>| -> f64 {
            let mut t = Tape::new();
            let out = build(&mut t, p);
            t.value(out)
                .values()
                .iter()
                .zip(&probe_coeffs)
                .map(|(v, c)| v * c)
                .sum()
        };
        let mut t = Tape::new();
        let out = build(&mut t, params);
        let shape = t.value(out).shape();
        let seed_t = Tensor::new(shape, probe_coeffs.clone()).unwrap();
        let grads = t.backward(&[(out, seed_t)]).unwrap();
        for (name, p) in params {
            let g = grads
                .get(name)
                .unwrap_or_else(|| panic!("no grad for {name}"));
            for idx in 0..p.len().min(40) {
                let fd = numeric_grad(&scalar, params, name, idx, 1e-5);
                check_close(g.values()[idx], fd, &format!("{name}[{idx}]"));
            }
        }
    }

    fn params_from(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
        pairs.into_iter().map(|(k, v)| (k.into(), v)).collect()
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let x = Tensor::new(Shape::Chw(2, 6, 6), rand_vec(&mut rng, 72)).unwrap();
        let w = Tensor::flat(rand_vec(&mut rng, 3 * 2 * 9));
        let b = Tensor::flat(rand_vec(&mut rng, 3));
        let params = params_from(vec![("x", x), ("w", w), ("b", b)]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                let w = t.param("w", p["w"].clone());
                let b = t.param("b", p["b"].clone());
                t.conv3x3(x, w, b).unwrap()
            },
            &params,
            101,
        );
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let params = params_from(vec![
            ("x", Tensor::flat(rand_vec(&mut rng, 10))),
            ("w", Tensor::flat(rand_vec(&mut rng, 7 * 10))),
            ("b", Tensor::flat(rand_vec(&mut rng, 7))),
        ]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                let w = t.param("w", p["w"].clone());
                let b = t.param("b", p["b"].clone());
                t.dense(x, w, b).unwrap()
            },
            &params,
            103,
        );
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        // Keep inputs away from the kink at 0.
        let vals: Vec<f64> = rand_vec(&mut rng, 24)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let params = params_from(vec![(
            "x",
            Tensor::new(Shape::Chw(1, 4, 6), vals).unwrap(),
        )]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                t.relu(x)
            },
            &params,
            105,
        );
    }

    #[test]
    fn downsample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let params = params_from(vec![(
            "x",
            Tensor::new(Shape::Chw(2, 4, 4), rand_vec(&mut rng, 32)).unwrap(),
        )]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                t.downsample2(x).unwrap()
            },
            &params,
            107,
        );
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let params = params_from(vec![(
            "x",
            Tensor::new(Shape::Chw(2, 3, 3), rand_vec(&mut rng, 18)).unwrap(),
        )]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                t.upsample2(x).unwrap()
            },
            &params,
            109,
        );
    }

    #[test]
    fn concat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let params = params_from(vec![
            ("a", Tensor::new(Shape::Chw(1, 3, 4), rand_vec(&mut rng, 12)).unwrap()),
            ("b", Tensor::new(Shape::Chw(2, 3, 4), rand_vec(&mut rng, 24)).unwrap()),
        ]);
        check_op_gradients(
            &|t, p| {
                let a = t.param("a", p["a"].clone());
                let b = t.param("b", p["b"].clone());
                t.concat_c(a, b).unwrap()
            },
            &params,
            111,
        );
    }

    #[test]
    fn sub_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let params = params_from(vec![
            ("a", Tensor::flat(rand_vec(&mut rng, 15))),
            ("b", Tensor::flat(rand_vec(&mut rng, 15))),
        ]);
        check_op_gradients(
            &|t, p| {
                let a = t.param("a", p["a"].clone());
                let b = t.param("b", p["b"].clone());
                t.sub(a, b).unwrap()
            },
            &params,
            113,
        );
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        // conv -> relu -> down -> up -> concat(skip) -> conv -> sub covers
        // interacting paths and reuse of an intermediate by two consumers.
        let mut rng = ChaCha8Rng::seed_from_u64(114);
        let params = params_from(vec![
            ("x", Tensor::new(Shape::Chw(1, 4, 4), rand_vec(&mut rng, 16)).unwrap()),
            ("w1", Tensor::flat(rand_vec(&mut rng, 2 * 1 * 9))),
            ("b1", Tensor::flat(rand_vec(&mut rng, 2))),
            ("w2", Tensor::flat(rand_vec(&mut rng, 1 * 4 * 9))),
            ("b2", Tensor::flat(rand_vec(&mut rng, 1))),
        ]);
        check_op_gradients(
            &|t, p| {
                let x = t.param("x", p["x"].clone());
                let w1 = t.param("w1", p["w1"].clone());
                let b1 = t.param("b1", p["b1"].clone());
                let w2 = t.param("w2", p["w2"].clone());
                let b2 = t.param("b2", p["b2"].clone());
                let c1 = t.conv3x3(x, w1, b1).unwrap();
                let r1 = t.relu(c1);
                let d = t.downsample2(r1).unwrap();
                let u = t.upsample2(d).unwrap();
                let cat = t.concat_c(u, r1).unwrap();
                let c2 = t.conv3x3(cat, w2, b2).unwrap();
                t.sub(c2, x).unwrap()
            },
            &params,
            115,
        );
    }

    #[test]
    fn zero_seed_yields_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(116);
        let mut t = Tape::new();
        let x = t.param("x", Tensor::flat(rand_vec(&mut rng, 6)));
        let w = t.param("w", Tensor::flat(rand_vec(&mut rng, 12)));
        let b = t.param("b", Tensor::flat(rand_vec(&mut rng, 2)));
        let out = t.dense(x, w, b).unwrap();
        let grads = t
            .backward(&[(out, Tensor::zeros(Shape::Flat(2)))])
            .unwrap();
        for (_, g) in grads {
            assert!(g.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn interior_seed_reaches_only_upstream_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(117);
        let mut t = Tape::new();
        let x = t.input(Tensor::flat(rand_vec(&mut rng, 4)));
        let w1 = t.param("w1", Tensor::flat(rand_vec(&mut rng, 12)));
        let b1 = t.param("b1", Tensor::flat(rand_vec(&mut rng, 3)));
        let mid = t.dense(x, w1, b1).unwrap();
        let w2 = t.param("w2", Tensor::flat(rand_vec(&mut rng, 6)));
        let b2 = t.param("b2", Tensor::flat(rand_vec(&mut rng, 2)));
        let _tail = t.dense(mid, w2, b2).unwrap();
        let grads = t
            .backward(&[(mid, Tensor::flat(vec![1.0, -0.5, 2.0]))])
            .unwrap();
        assert!(grads.contains_key("w1"));
        assert!(grads.contains_key("b1"));
        assert!(!grads.contains_key("w2"), "downstream params untouched");
        assert!(!grads.contains_key("b2"));
    }

    #[test]
    fn mismatched_seed_shape_is_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::flat(vec![1.0, 2.0]));
        let e = t
            .backward(&[(x, Tensor::flat(vec![1.0, 2.0, 3.0]))])
            .unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn forward_determinism_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(118);
        let x = Tensor::new(Shape::Chw(2, 8, 8), rand_vec(&mut rng, 128)).unwrap();
        let w = Tensor::flat(rand_vec(&mut rng, 4 * 2 * 9));
        let b = Tensor::flat(rand_vec(&mut rng, 4));
        let run = || {
            let mut t = Tape::new();
            let xi = t.input(x.clone());
            let wi = t.input(w.clone());
            let bi = t.input(b.clone());
            let c = t.conv3x3(xi, wi, bi).unwrap();
            let r = t.relu(c);
            let d = t.downsample2(r).unwrap();
            t.value(d).values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
