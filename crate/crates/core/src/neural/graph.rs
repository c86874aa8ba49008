//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//! Forward values are computed eagerly as nodes are added; `backward`
//! walks the tape once in reverse.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::neural::tensor::{conv2d, PadMode, Real, Tensor4};

pub type NodeId = usize;

#[derive(Clone)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    UpsampleNearest2 {
        x: NodeId,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    FftL1Mean {
        a: NodeId,
        b: NodeId,
    },
    ScaledSum {
        terms: Vec<(NodeId, T)>,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor4<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    planner: FftPlanner<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            planner: FftPlanner::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].value.numel(), 1);
        self.nodes[id].value.data[0]
    }

    /// Gradient of the last `backward` target with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor4<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let bias = &self.nodes[b].value;
        if bias.n != 1 || bias.h != 1 || bias.w != 1 {
            return Err(Error::dims("bias node must be shaped 1xCx1x1".to_string()));
        }
        let value = conv2d(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value.data.clone(),
            stride,
            pad,
            mode,
        )?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let value = Tensor4 {
            n: v.n,
            c: v.c,
            h: v.h,
            w: v.w,
            data: v
                .data
                .iter()
                .map(|&t| if t > T::zero() { t } else { T::zero() })
                .collect(),
        };
        let rg = self.requires(x);
        self.push(Op::Relu { x }, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::dims(format!(
                "add shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = Tensor4 {
            n: va.n,
            c: va.c,
            h: va.h,
            w: va.w,
            data: va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let mut out = Tensor4::zeros(v.n, v.c, v.h * 2, v.w * 2);
        for n in 0..v.n {
            for c in 0..v.c {
                for y in 0..v.h {
                    for xx in 0..v.w {
                        let s = v.at(n, c, y, xx);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = out.idx(n, c, 2 * y + dy, 2 * xx + dx);
                                out.data[i] = s;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x);
        self.push(Op::UpsampleNearest2 { x }, out, rg)
    }

    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::dims("l1 operands differ in shape".to_string()));
        }
        let total: T = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let mean = total / T::real(va.numel() as f64);
        let value = Tensor4::from_vec(1, 1, 1, 1, vec![mean])?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::L1Mean { a, b }, value, rg))
    }

    pub fn fft_l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::dims("fft l1 operands differ in shape".to_string()));
        }
        let (n, c, h, w) = (va.n, va.c, va.h, va.w);
        let mut total = T::zero();
        for s in 0..n {
            for ch in 0..c {
                let base = va.idx(s, ch, 0, 0);
                let mut plane: Vec<Complex<T>> = (0..h * w)
                    .map(|k| Complex::new(va.data[base + k] - vb.data[base + k], T::zero()))
                    .collect();
                fft2_in_place(&mut self.planner, &mut plane, h, w);
                total = total + plane.iter().map(|z| z.norm()).sum::<T>();
            }
        }
        let mean = total / T::real(va.numel() as f64);
        let value = Tensor4::from_vec(1, 1, 1, 1, vec![mean])?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::FftL1Mean { a, b }, value, rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn scaled_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::param("scaled sum of nothing"));
        }
        let mut acc = T::zero();
        let mut rg = false;
        for &(id, weight) in terms {
            if self.nodes[id].value.numel() != 1 {
                return Err(Error::dims("scaled sum expects scalar nodes".to_string()));
            }
            acc = acc + self.nodes[id].value.data[0] * weight;
            rg |= self.requires(id);
        }
        let value = Tensor4::from_vec(1, 1, 1, 1, vec![acc])?;
        Ok(self.push(
            Op::ScaledSum {
                terms: terms.to_vec(),
            },
            value,
            rg,
        ))
    }

    fn add_grad(&mut self, id: NodeId, contribution: Vec<T>) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Propagate d(root)/d(node) into every tape node that requires a
    /// gradient. The root must be scalar.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::param("backward root must be scalar"));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::param(
                "backward root does not depend on any trainable leaf",
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root].grad = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    mode,
                } => self.backward_conv2d(i, x, w, b, stride, pad, mode, &g),
                Op::Relu { x } => {
                    if self.requires(x) {
                        let mask: Vec<T> = self.nodes[i]
                            .value
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                            .collect();
                        self.add_grad(x, mask);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        self.add_grad(a, g.clone());
                    }
                    if self.requires(b) {
                        self.add_grad(b, g.clone());
                    }
                }
                Op::UpsampleNearest2 { x } => {
                    if self.requires(x) {
                        let v = &self.nodes[x].value;
                        let out = &self.nodes[i].value;
                        let mut gx = vec![T::zero(); v.numel()];
                        for n in 0..v.n {
                            for c in 0..v.c {
                                for y in 0..v.h {
                                    for xx in 0..v.w {
                                        let mut acc = T::zero();
                                        for dy in 0..2 {
                                            for dx in 0..2 {
                                                acc = acc
                                                    + g[out.idx(n, c, 2 * y + dy, 2 * xx + dx)];
                                            }
                                        }
                                        gx[v.idx(n, c, y, xx)] = acc;
                                    }
                                }
                            }
                        }
                        self.add_grad(x, gx);
                    }
                }
                Op::L1Mean { a, b } => {
                    let scale = g[0] / T::real(self.nodes[a].value.numel() as f64);
                    let signs: Vec<T> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .zip(&self.nodes[b].value.data)
                        .map(|(&x, &y)| {
                            if x > y {
                                scale
                            } else if x < y {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if self.requires(a) {
                        self.add_grad(a, signs.clone());
                    }
                    if self.requires(b) {
                        self.add_grad(b, signs.iter().map(|&s| -s).collect());
                    }
                }
                Op::FftL1Mean { a, b } => self.backward_fft_l1(a, b, &g),
                Op::ScaledSum { terms } => {
                    for (id, weight) in terms {
                        if self.requires(id) {
                            self.add_grad(id, vec![g[0] * weight]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        out: NodeId,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
        g: &[T],
    ) {
        let (need_x, need_w, need_b) = (self.requires(x), self.requires(w), self.requires(b));
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let ov = &self.nodes[out].value;
        let mut gx = if need_x {
            vec![T::zero(); xv.numel()]
        } else {
            Vec::new()
        };
        let mut gw = if need_w {
            vec![T::zero(); wv.numel()]
        } else {
            Vec::new()
        };
        let mut gb = if need_b {
            vec![T::zero(); wv.n]
        } else {
            Vec::new()
        };
        // Same padded-sample layout as the forward pass: weight gradients
        // become row dot products and input gradients become row updates
        // into a padded buffer that is folded back through the border map.
        let (ph, pw) = (xv.h + 2 * pad, xv.w + 2 * pad);
        let mut padded = vec![T::zero(); xv.c * ph * pw];
        let mut gpad = vec![T::zero(); xv.c * ph * pw];
        for n in 0..ov.n {
            if need_w {
                crate::neural::tensor::fill_padded(&mut padded, xv, n, pad, mode);
            }
            if need_x {
                gpad.fill(T::zero());
            }
            for oc in 0..ov.c {
                let go_base = ov.idx(n, oc, 0, 0);
                if need_b {
                    let mut sum = T::zero();
                    for &go in &g[go_base..go_base + ov.h * ov.w] {
                        sum = sum + go;
                    }
                    gb[oc] = gb[oc] + sum;
                }
                for ic in 0..xv.c {
                    let pbase = ic * ph * pw;
                    for ky in 0..wv.h {
                        for kx in 0..wv.w {
                            let widx = wv.idx(oc, ic, ky, kx);
                            let wval = wv.data[widx];
                            let mut acc = T::zero();
                            for oy in 0..ov.h {
                                let grow = &g[go_base + oy * ov.w..go_base + (oy + 1) * ov.w];
                                let src = pbase + (oy * stride + ky) * pw + kx;
                                if need_w {
                                    if stride == 1 {
                                        let prow = &padded[src..src + ov.w];
                                        for (&go, &v) in grow.iter().zip(prow) {
                                            acc = acc + go * v;
                                        }
                                    } else {
                                        for (i, &go) in grow.iter().enumerate() {
                                            acc = acc + go * padded[src + i * stride];
                                        }
                                    }
                                }
                                if need_x {
                                    if stride == 1 {
                                        let gprow = &mut gpad[src..src + ov.w];
                                        for (gp, &go) in gprow.iter_mut().zip(grow) {
                                            *gp = *gp + wval * go;
                                        }
                                    } else {
                                        for (i, &go) in grow.iter().enumerate() {
                                            let at = src + i * stride;
                                            gpad[at] = gpad[at] + wval * go;
                                        }
                                    }
                                }
                            }
                            if need_w {
                                gw[widx] = gw[widx] + acc;
                            }
                        }
                    }
                }
            }
            if need_x {
                for ic in 0..xv.c {
                    let pbase = ic * ph * pw;
                    for py in 0..ph {
                        let sy = py as isize - pad as isize;
                        let my = match mode {
                            PadMode::Reflect => crate::raster::reflect_index(sy, xv.h),
                            PadMode::Zero => {
                                if sy < 0 || sy >= xv.h as isize {
                                    continue;
                                }
                                sy as usize
                            }
                        };
                        for px in 0..pw {
                            let sx = px as isize - pad as isize;
                            let mx = match mode {
                                PadMode::Reflect => crate::raster::reflect_index(sx, xv.w),
                                PadMode::Zero => {
                                    if sx < 0 || sx >= xv.w as isize {
                                        continue;
                                    }
                                    sx as usize
                                }
                            };
                            gx[xv.idx(n, ic, my, mx)] =
                                gx[xv.idx(n, ic, my, mx)] + gpad[pbase + py * pw + px];
                        }
                    }
                }
            }
        }
        if need_x {
            self.add_grad(x, gx);
        }
        if need_w {
            self.add_grad(w, gw);
        }
        if need_b {
            self.add_grad(b, gb);
        }
    }

    /// d mean|FFT(a-b)| / d(a-b) = Re(DFT(conj(Z)/|Z|)) / numel, using the
    /// symmetry of the DFT matrix; zero wherever |Z| vanishes.
    fn backward_fft_l1(&mut self, a: NodeId, b: NodeId, g: &[T]) {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let (n, c, h, w) = (va.n, va.c, va.h, va.w);
        let scale = g[0] / T::real(va.numel() as f64);
        let mut gd = vec![T::zero(); va.numel()];
        for s in 0..n {
            for ch in 0..c {
                let base = va.idx(s, ch, 0, 0);
                let mut plane: Vec<Complex<T>> = (0..h * w)
                    .map(|k| Complex::new(va.data[base + k] - vb.data[base + k], T::zero()))
                    .collect();
                fft2_in_place(&mut self.planner, &mut plane, h, w);
                let mut unit: Vec<Complex<T>> = plane
                    .iter()
                    .map(|z| {
                        let m = z.norm();
                        if m > T::zero() {
                            z.conj() / m
                        } else {
                            Complex::new(T::zero(), T::zero())
                        }
                    })
                    .collect();
                fft2_in_place(&mut self.planner, &mut unit, h, w);
                for k in 0..h * w {
                    gd[base + k] = unit[k].re * scale;
                }
            }
        }
        if self.requires(a) {
            self.add_grad(a, gd.clone());
        }
        if self.requires(b) {
            self.add_grad(b, gd.iter().map(|&v| -v).collect());
        }
    }
}

/// Unnormalized forward 2-D FFT, rows then columns.
fn fft2_in_place<T: Real>(planner: &mut FftPlanner<T>, data: &mut [Complex<T>], h: usize, w: usize) {
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}
