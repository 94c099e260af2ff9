use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::{Element, NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    Tensor(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Tensor(v)
    }
}

impl From<f64> for Operand {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; output keeps the input's spatial size.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Nearest-neighbour 2x.
    Up,
    /// 2x2 mean pool.
    Down,
}

enum Op<T: Element> {
    Leaf,
    Binary(BinaryOp, usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Square(usize),
    Abs(usize),
    Act(Activation, usize),
    Sum(usize),
    Mean(usize),
    Matmul(usize, usize),
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    AddChannel(usize, usize),
    MulChannel(usize, usize),
    GroupNorm {
        input: usize,
        affine: Option<(usize, usize)>,
        per_group: usize,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    NormAct {
        input: usize,
        scale: usize,
        shift: usize,
        offset: Option<usize>,
        groups: usize,
        activation: Option<Activation>,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Resample(Resample, usize),
    Concat(usize, usize),
    Reshape(usize),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer record of primitive operations.
///
/// Forward values are computed eagerly. Gradients flow only through nodes
/// that depend on a leaf marked `requires_grad`; `backward` adds into the
/// leaf gradient buffers, so calling it twice without [`Tape::zero_grad`]
/// accumulates.
pub struct Tape<T: Element = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

/// (batch, channels, plane) for `[C,H,W]`/`[N,C,H,W]` images.
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(NumericsError::InvalidArgument(format!("{op}: expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(NumericsError::ForeignVar)
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value: value.with_requires_grad(false), op, needs_grad });
        self.leaf_grads.push(None);
        Var { tape: self.id, index }
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Records a leaf; it receives gradients iff the tensor `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Leaf that always receives gradients.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match b.into() {
            Operand::Tensor(b) => self.binary(op, a, b),
            Operand::Scalar(s) => {
                self.index(a)?;
                Ok(match op {
                    BinaryOp::Add => self.add_scalar(a, s),
                    BinaryOp::Sub => self.add_scalar(a, -s),
                    BinaryOp::Mul => self.scale(a, s),
                })
            }
        }
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (name, f): (&'static str, fn(T, T) -> T) = match op {
            BinaryOp::Add => ("add", |x, y| x + y),
            BinaryOp::Sub => ("sub", |x, y| x - y),
            BinaryOp::Mul => ("mul", |x, y| x * y),
        };
        let out = va.zip_map(vb, name, f)?;
        let needs = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Binary(op, ia, ib), needs))
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

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let s = T::of(s);
        let out = self.nodes[ia].value.map(|x| x + s);
        let needs = self.needs(&[ia]);
        self.push(out, Op::AddScalar(ia), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let s = T::of(s);
        let out = self.nodes[ia].value.map(|x| x * s);
        let needs = self.needs(&[ia]);
        self.push(out, Op::MulScalar(ia, s), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let out = self.nodes[ia].value.map(|x| x * x);
        let needs = self.needs(&[ia]);
        self.push(out, Op::Square(ia), needs)
    }

    /// `|x|`; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let out = self.nodes[ia].value.map(|x| x.abs());
        let needs = self.needs(&[ia]);
        self.push(out, Op::Abs(ia), needs)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let out = match kind {
            Activation::Relu => self.nodes[ia].value.map(|x| x.max(T::zero())),
            Activation::Silu => self.nodes[ia].value.map(|x| x * x.sigmoid()),
        };
        let needs = self.needs(&[ia]);
        self.push(out, Op::Act(kind, ia), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(Activation::Silu, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let needs = self.needs(&[ia]);
        self.push(out, Op::Sum(ia), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.index(a).expect("var from another tape");
        let out = Tensor::scalar(self.nodes[ia].value.mean());
        let needs = self.needs(&[ia]);
        self.push(out, Op::Mean(ia), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", va.shape(), vb.shape())),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), k as isize, 1, vb.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let out = Tensor::new(&[m, n], out)?;
        let needs = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Matmul(ia, ib), needs))
    }

    /// Stride-1 cross-correlation of `[C,H,W]` or `[N,C,H,W]` input with an
    /// `[O,C,kH,kW]` kernel and optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (ii, ik) = (self.index(input)?, self.index(kernel)?);
        let ib = bias.map(|b| self.index(b)).transpose()?;
        let vi = &self.nodes[ii].value;
        let vk = &self.nodes[ik].value;
        let (batch, c, h, w) = image_dims(vi.shape(), "conv2d")?;
        let [o, kc, kh, kw] = *vk.shape() else {
            return Err(mismatch("conv2d kernel", vk.shape(), &[0, c, 0, 0]));
        };
        if kc != c {
            return Err(mismatch("conv2d channels", vi.shape(), vk.shape()));
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(NumericsError::InvalidArgument(format!(
                        "same padding needs an odd square kernel, got {kh}x{kw}"
                    )));
                }
                (kh - 1) / 2
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(mismatch("conv2d valid", vi.shape(), vk.shape()));
                }
                0
            }
        };
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [o] {
                return Err(mismatch("conv2d bias", self.nodes[ib].value.shape(), &[o]));
            }
        }
        let geom = ConvGeometry { batch, in_channels: c, out_channels: o, height: h, width: w, kh, kw, pad };
        let out = kernels::conv2d_forward(&geom, vi.data(), vk.data(), ib.map(|b| self.nodes[b].value.data()));
        let shape = if vi.rank() == 3 {
            vec![o, geom.out_height(), geom.out_width()]
        } else {
            vec![batch, o, geom.out_height(), geom.out_width()]
        };
        let out = Tensor::new(&shape, out)?;
        let mut deps = vec![ii, ik];
        deps.extend(ib);
        let needs = self.needs(&deps);
        Ok(self.push(out, Op::Conv { input: ii, kernel: ik, bias: ib, geom }, needs))
    }

    fn channel_layout(&self, x: usize, v: usize, op: &'static str) -> Result<(usize, usize, usize, bool)> {
        let xs = self.nodes[x].value.shape();
        let vs = self.nodes[v].value.shape();
        let (n, c, plane) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            3 => (1, xs[0], xs[1] * xs[2]),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(mismatch(op, xs, vs)),
        };
        let per_item = match vs {
            [vc] if *vc == c => false,
            [vn, vc] if *vn == n && *vc == c && xs.len() != 3 => true,
            _ => return Err(mismatch(op, xs, vs)),
        };
        Ok((n, c, plane, per_item))
    }

    /// Adds a `[C]` (shared) or `[N,C]` (per item) vector along the channel axis.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (ix, iv) = (self.index(x)?, self.index(v)?);
        let (n, c, plane, per_item) = self.channel_layout(ix, iv, "add_channel")?;
        let vv = self.nodes[iv].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let add = vv[if per_item { b * c + ch } else { ch }];
                out[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter_mut().for_each(|o| *o = *o + add);
            }
        }
        let out = Tensor::new(self.nodes[ix].value.shape(), out)?;
        let needs = self.needs(&[ix, iv]);
        Ok(self.push(out, Op::AddChannel(ix, iv), needs))
    }

    /// Multiplies by a `[C]` (shared) or `[N,C]` (per item) vector along the channel axis.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (ix, iv) = (self.index(x)?, self.index(v)?);
        let (n, c, plane, per_item) = self.channel_layout(ix, iv, "mul_channel")?;
        let vv = self.nodes[iv].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let s = vv[if per_item { b * c + ch } else { ch }];
                out[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter_mut().for_each(|o| *o = *o * s);
            }
        }
        let out = Tensor::new(self.nodes[ix].value.shape(), out)?;
        let needs = self.needs(&[ix, iv]);
        Ok(self.push(out, Op::MulChannel(ix, iv), needs))
    }

    /// Group normalization over `(C/groups, H, W)` per item, with an optional
    /// per-channel `(scale, shift)` affine applied afterwards.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64, affine: Option<(Var, Var)>) -> Result<Var> {
        let ix = self.index(x)?;
        let affine = match affine {
            Some((s, b)) => Some((self.index(s)?, self.index(b)?)),
            None => None,
        };
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("group_norm eps must be positive, got {eps}")));
        }
        let vx = &self.nodes[ix].value;
        let (n, c, h, w) = image_dims(vx.shape(), "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let plane = h * w;
        let (normalized, _means, rstd) =
            kernels::group_norm_forward(vx.data(), n, c, plane, groups, T::of(eps));
        let mut out = normalized.clone();
        if let Some((is, ib)) = affine {
            let (s, b) = (self.nodes[is].value.data(), self.nodes[ib].value.data());
            if s.len() != c || b.len() != c {
                return Err(mismatch("group_norm affine", vx.shape(), self.nodes[is].value.shape()));
            }
            for item in 0..n {
                for ch in 0..c {
                    out[(item * c + ch) * plane..(item * c + ch + 1) * plane]
                        .iter_mut()
                        .for_each(|o| *o = *o * s[ch] + b[ch]);
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let mut deps = vec![ix];
        if let Some((s, b)) = affine {
            deps.extend([s, b]);
        }
        let needs = self.needs(&deps);
        let per_group = c / groups * plane;
        let (normalized, rstd) = if needs { (normalized, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::GroupNorm { input: ix, affine, per_group, normalized, rstd }, needs))
    }

    /// Fused `act(group_norm(x) * scale + shift + offset)` with `[C]` scale
    /// and shift and an optional per-item `[N, C]` offset.
    #[allow(clippy::too_many_arguments)]
    pub fn group_norm_act(
        &mut self,
        x: Var,
        groups: usize,
        eps: f64,
        scale: Var,
        shift: Var,
        offset: Option<Var>,
        activation: Option<Activation>,
    ) -> Result<Var> {
        let (ix, is, ib) = (self.index(x)?, self.index(scale)?, self.index(shift)?);
        let io = offset.map(|o| self.index(o)).transpose()?;
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("group_norm eps must be positive, got {eps}")));
        }
        let vx = &self.nodes[ix].value;
        let (n, c, h, w) = image_dims(vx.shape(), "group_norm_act")?;
        if groups == 0 || c % groups != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let (sv, bv) = (self.nodes[is].value.data(), self.nodes[ib].value.data());
        if sv.len() != c || bv.len() != c {
            return Err(mismatch("group_norm_act affine", vx.shape(), self.nodes[is].value.shape()));
        }
        let ov = match io {
            Some(io) => {
                let os = self.nodes[io].value.shape();
                if os != [n, c] {
                    return Err(mismatch("group_norm_act offset", vx.shape(), os));
                }
                Some(self.nodes[io].value.data())
            }
            None => None,
        };
        let mut deps = vec![ix, is, ib];
        deps.extend(io);
        let needs = self.needs(&deps);
        let plane = h * w;
        let per_group = c / groups * plane;
        let cpg = c / groups;
        let count = T::of(per_group as f64);
        let eps = T::of(eps);
        let xd = vx.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut normalized = if needs { vec![T::zero(); xd.len()] } else { Vec::new() };
        let mut rstds = Vec::with_capacity(n * groups);
        for bg in 0..n * groups {
            let (item, grp) = (bg / groups, bg % groups);
            let seg = &xd[bg * per_group..(bg + 1) * per_group];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for k in 0..cpg {
                let ch = grp * cpg + k;
                let s = sv[ch];
                let b = bv[ch] + ov.map_or(T::zero(), |o| o[item * c + ch]);
                let r = bg * per_group + k * plane..bg * per_group + (k + 1) * plane;
                let src = &xd[r.clone()];
                if needs {
                    normalized[r.clone()].iter_mut().zip(src).for_each(|(d, &v)| *d = (v - mean) * rstd);
                }
                let dst = &mut out[r];
                match activation {
                    Some(Activation::Silu) => dst.iter_mut().zip(src).for_each(|(d, &v)| {
                        let z = (v - mean) * rstd * s + b;
                        *d = z * z.sigmoid();
                    }),
                    Some(Activation::Relu) => dst
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d = ((v - mean) * rstd * s + b).max(T::zero())),
                    None => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = (v - mean) * rstd * s + b),
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rstd = if needs { rstds } else { Vec::new() };
        let op = Op::NormAct { input: ix, scale: is, shift: ib, offset: io, groups, activation, normalized, rstd };
        Ok(self.push(out, op, needs))
    }

    pub fn resample2x(&mut self, x: Var, direction: Resample) -> Result<Var> {
        let ix = self.index(x)?;
        let vx = &self.nodes[ix].value;
        let (n, c, h, w) = image_dims(vx.shape(), "resample2x")?;
        let planes = n * c;
        let (data, oh, ow) = match direction {
            Resample::Up => (kernels::upsample2x(vx.data(), planes, h, w), 2 * h, 2 * w),
            Resample::Down => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(NumericsError::InvalidArgument(format!(
                        "downsample needs even spatial extents, got {h}x{w}"
                    )));
                }
                (kernels::downsample2x(vx.data(), planes, h, w), h / 2, w / 2)
            }
        };
        let mut shape = vx.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        let needs = self.needs(&[ix]);
        Ok(self.push(out, Op::Resample(direction, ix), needs))
    }

    /// Concatenates two images along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, ca, h, w) = image_dims(va.shape(), "concat_channels")?;
        let (nb, cb, hb, wb) = image_dims(vb.shape(), "concat_channels")?;
        if n != nb || h != hb || w != wb || va.rank() != vb.rank() {
            return Err(mismatch("concat_channels", va.shape(), vb.shape()));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for item in 0..n {
            out.extend_from_slice(&va.data()[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&vb.data()[item * cb * plane..(item + 1) * cb * plane]);
        }
        let mut shape = va.shape().to_vec();
        let r = shape.len();
        shape[r - 3] = ca + cb;
        let out = Tensor::new(&shape, out)?;
        let needs = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Concat(ia, ib), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        let needs = self.needs(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), needs))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Accumulated gradient of a leaf, `None` when it received none.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor<T>>> {
        let i = self.index(v)?;
        match &self.leaf_grads[i] {
            Some(g) => Ok(Some(Tensor::new(self.nodes[i].value.shape(), g.clone())?)),
            None => Ok(None),
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.index(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(NumericsError::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backprop(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

/// Returns the gradient buffer of `idx`, allocating zeros on first touch.
fn slot<'a, T: Element>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], idx: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let n = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); n]))
}

fn acc_scaled<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, g: &[T], f: impl Fn(usize, T) -> T) {
    if let Some(buf) = slot(nodes, grads, idx) {
        buf.iter_mut().zip(g).enumerate().for_each(|(k, (b, &gv))| *b = *b + f(k, gv));
    }
}

fn backprop<T: Element>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary(op, a, b) => {
            let (a, b) = (*a, *b);
            match op {
                BinaryOp::Add => {
                    acc_scaled(nodes, grads, a, g, |_, gv| gv);
                    acc_scaled(nodes, grads, b, g, |_, gv| gv);
                }
                BinaryOp::Sub => {
                    acc_scaled(nodes, grads, a, g, |_, gv| gv);
                    acc_scaled(nodes, grads, b, g, |_, gv| -gv);
                }
                BinaryOp::Mul => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    acc_scaled(nodes, grads, a, g, |k, gv| gv * vb[k]);
                    acc_scaled(nodes, grads, b, g, |k, gv| gv * va[k]);
                }
            }
        }
        Op::AddScalar(a) => acc_scaled(nodes, grads, *a, g, |_, gv| gv),
        Op::MulScalar(a, s) => {
            let s = *s;
            acc_scaled(nodes, grads, *a, g, |_, gv| gv * s)
        }
        Op::Square(a) => {
            let va = nodes[*a].value.data();
            let two = T::of(2.0);
            acc_scaled(nodes, grads, *a, g, |k, gv| two * va[k] * gv)
        }
        Op::Abs(a) => {
            let va = nodes[*a].value.data();
            acc_scaled(nodes, grads, *a, g, |k, gv| {
                if va[k] > T::zero() {
                    gv
                } else if va[k] < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })
        }
        Op::Act(kind, a) => {
            let va = nodes[*a].value.data();
            match kind {
                Activation::Relu => {
                    acc_scaled(nodes, grads, *a, g, |k, gv| if va[k] > T::zero() { gv } else { T::zero() })
                }
                Activation::Silu => acc_scaled(nodes, grads, *a, g, |k, gv| {
                    let s = va[k].sigmoid();
                    gv * (s + va[k] * s * (T::one() - s))
                }),
            }
        }
        Op::Sum(a) => {
            let gv = g[0];
            if let Some(buf) = slot(nodes, grads, *a) {
                buf.iter_mut().for_each(|b| *b = *b + gv);
            }
        }
        Op::Mean(a) => {
            let gv = g[0] / T::of(nodes[*a].value.numel() as f64);
            if let Some(buf) = slot(nodes, grads, *a) {
                buf.iter_mut().for_each(|b| *b = *b + gv);
            }
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            let (da, db) = (va.data(), vb.data());
            if let Some(buf) = slot(nodes, grads, a) {
                // dA = G · B^T
                T::gemm(m, n, k, T::one(), g, n as isize, 1, db, 1, n as isize, T::one(), buf, k as isize, 1);
            }
            if let Some(buf) = slot(nodes, grads, b) {
                // dB = A^T · G
                T::gemm(k, m, n, T::one(), da, 1, k as isize, g, n as isize, 1, T::one(), buf, n as isize, 1);
            }
        }
        Op::Conv { input, kernel, bias, geom } => {
            let (input, kernel) = (*input, *kernel);
            let xi = nodes[input].value.data();
            let kk = nodes[kernel].value.data();
            let mut gi = nodes[input].needs_grad.then(|| grads[input].take().unwrap_or_else(|| vec![T::zero(); xi.len()]));
            let mut gk = nodes[kernel].needs_grad.then(|| grads[kernel].take().unwrap_or_else(|| vec![T::zero(); kk.len()]));
            let mut gb = bias.filter(|&b| nodes[b].needs_grad).map(|b| {
                grads[b].take().unwrap_or_else(|| vec![T::zero(); geom.out_channels])
            });
            kernels::conv2d_backward(geom, xi, kk, g, gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
            if let Some(v) = gi {
                grads[input] = Some(v);
            }
            if let Some(v) = gk {
                grads[kernel] = Some(v);
            }
            if let (Some(b), Some(v)) = (bias, gb) {
                grads[*b] = Some(v);
            }
        }
        Op::AddChannel(x, v) | Op::MulChannel(x, v) => {
            let is_mul = matches!(nodes[i].op, Op::MulChannel(..));
            let (x, v) = (*x, *v);
            let xs = nodes[x].value.shape();
            let (n, c, plane) = match xs.len() {
                2 => (xs[0], xs[1], 1),
                3 => (1, xs[0], xs[1] * xs[2]),
                _ => (xs[0], xs[1], xs[2] * xs[3]),
            };
            let per_item = nodes[v].value.rank() == 2;
            let vv = nodes[v].value.data();
            let vx = nodes[x].value.data();
            if let Some(buf) = slot(nodes, grads, x) {
                for b in 0..n {
                    for ch in 0..c {
                        let s = if is_mul { vv[if per_item { b * c + ch } else { ch }] } else { T::one() };
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        buf[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d = *d + gv * s);
                    }
                }
            }
            if let Some(buf) = slot(nodes, grads, v) {
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        let contrib: T = if is_mul {
                            g[r.clone()].iter().zip(&vx[r]).map(|(&gv, &xv)| gv * xv).sum()
                        } else {
                            g[r].iter().copied().sum()
                        };
                        let j = if per_item { b * c + ch } else { ch };
                        buf[j] = buf[j] + contrib;
                    }
                }
            }
        }
        Op::GroupNorm { input, affine, per_group, normalized, rstd } => {
            let shape = out.shape();
            let (n, c, h, w) = image_dims(shape, "group_norm").expect("validated at record time");
            let plane = h * w;
            let grad_norm: Vec<T> = match affine {
                Some((s, b)) => {
                    let sv = nodes[*s].value.data();
                    if let Some(buf) = slot(nodes, grads, *b) {
                        for item in 0..n {
                            for ch in 0..c {
                                let r = (item * c + ch) * plane..(item * c + ch + 1) * plane;
                                buf[ch] = buf[ch] + g[r].iter().copied().sum::<T>();
                            }
                        }
                    }
                    if let Some(buf) = slot(nodes, grads, *s) {
                        for item in 0..n {
                            for ch in 0..c {
                                let r = (item * c + ch) * plane..(item * c + ch + 1) * plane;
                                buf[ch] = buf[ch]
                                    + g[r.clone()].iter().zip(&normalized[r]).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    }
                    let mut gn = g.to_vec();
                    for item in 0..n {
                        for ch in 0..c {
                            gn[(item * c + ch) * plane..(item * c + ch + 1) * plane]
                                .iter_mut()
                                .for_each(|v| *v = *v * sv[ch]);
                        }
                    }
                    gn
                }
                None => g.to_vec(),
            };
            if let Some(buf) = slot(nodes, grads, *input) {
                kernels::group_norm_backward(normalized, rstd, &grad_norm, *per_group, buf);
            }
        }
        Op::NormAct { input, scale, shift, offset, groups, activation, normalized, rstd } => {
            let (n, c, h, w) = image_dims(out.shape(), "group_norm_act").expect("validated at record time");
            let plane = h * w;
            let cpg = c / groups;
            let per_group = cpg * plane;
            let sv = nodes[*scale].value.data();
            let bv = nodes[*shift].value.data();
            let ov = offset.map(|o| nodes[o].value.data());
            let mut dscale = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            let mut doffset = vec![T::zero(); if offset.is_some() { n * c } else { 0 }];
            let mut dxh = vec![T::zero(); normalized.len()];
            for item in 0..n {
                for ch in 0..c {
                    let r = (item * c + ch) * plane..(item * c + ch + 1) * plane;
                    let (s, b) = (sv[ch], bv[ch] + ov.map_or(T::zero(), |o| o[item * c + ch]));
                    let (mut sum_dz, mut sum_dz_xh) = (T::zero(), T::zero());
                    for ((d, &gv), &xh) in dxh[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&normalized[r]) {
                        let dz = match activation {
                            Some(Activation::Silu) => {
                                let z = xh * s + b;
                                let sg = z.sigmoid();
                                gv * (sg + z * sg * (T::one() - sg))
                            }
                            Some(Activation::Relu) => {
                                if xh * s + b > T::zero() {
                                    gv
                                } else {
                                    T::zero()
                                }
                            }
                            None => gv,
                        };
                        sum_dz = sum_dz + dz;
                        sum_dz_xh = sum_dz_xh + dz * xh;
                        *d = dz * s;
                    }
                    dshift[ch] = dshift[ch] + sum_dz;
                    dscale[ch] = dscale[ch] + sum_dz_xh;
                    if offset.is_some() {
                        doffset[item * c + ch] = sum_dz;
                    }
                }
            }
            if let Some(buf) = slot(nodes, grads, *scale) {
                buf.iter_mut().zip(&dscale).for_each(|(b, &v)| *b = *b + v);
            }
            if let Some(buf) = slot(nodes, grads, *shift) {
                buf.iter_mut().zip(&dshift).for_each(|(b, &v)| *b = *b + v);
            }
            if let Some(o) = *offset {
                if let Some(buf) = slot(nodes, grads, o) {
                    buf.iter_mut().zip(&doffset).for_each(|(b, &v)| *b = *b + v);
                }
            }
            if let Some(buf) = slot(nodes, grads, *input) {
                kernels::group_norm_backward(normalized, rstd, &dxh, per_group, buf);
            }
        }
        Op::Resample(direction, x) => {
            let xs = nodes[*x].value.shape().to_vec();
            let (n, c, h, w) = image_dims(&xs, "resample2x").expect("validated at record time");
            if let Some(buf) = slot(nodes, grads, *x) {
                match direction {
                    Resample::Up => kernels::upsample2x_backward(g, n * c, h, w, buf),
                    Resample::Down => kernels::downsample2x_backward(g, n * c, h, w, buf),
                }
            }
        }
        Op::Concat(a, b) => {
            let (a, b) = (*a, *b);
            let (n, ca, h, w) = image_dims(nodes[a].value.shape(), "concat").expect("validated");
            let cb = image_dims(nodes[b].value.shape(), "concat").expect("validated").1;
            let plane = h * w;
            let stride = (ca + cb) * plane;
            if let Some(buf) = slot(nodes, grads, a) {
                for item in 0..n {
                    let src = &g[item * stride..item * stride + ca * plane];
                    buf[item * ca * plane..(item + 1) * ca * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d = *d + s);
                }
            }
            if let Some(buf) = slot(nodes, grads, b) {
                for item in 0..n {
                    let src = &g[item * stride + ca * plane..(item + 1) * stride];
                    buf[item * cb * plane..(item + 1) * cb * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::Reshape(x) => acc_scaled(nodes, grads, *x, g, |_, gv| gv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, v).unwrap()
    }

    #[test]
    fn add_and_zero_scale() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let z = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let zz = tape.elementwise(BinaryOp::Mul, z, 0.0).unwrap();
        assert_eq!(tape.value(zz).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(NumericsError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn conv_identity_and_valid_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, one, None, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, ones, None, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
        let bad = tape.constant(Tensor::ones(&[1, 3, 1, 1]));
        assert!(tape.conv2d(x, bad, None, Padding::Same).is_err());
    }

    #[test]
    fn relu_group_norm_resample() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = tape.constant(Tensor::full(&[1, 4, 2, 2], 3.5));
        let n = tape.group_norm(c, 2, 1e-5, None).unwrap();
        assert!(tape.value(n).data().iter().all(|&v| v == 0.0));
        assert!(tape.group_norm(c, 3, 1e-5, None).is_err());

        let img = tape.constant(Tensor::full(&[2, 4, 4], -0.75));
        let up = tape.resample2x(img, Resample::Up).unwrap();
        let down = tape.resample2x(up, Resample::Down).unwrap();
        assert_eq!(tape.value(down), tape.value(img));
    }

    #[test]
    fn polynomial_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[6.0]);
        // second call accumulates
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).unwrap().is_none());

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(a), Err(NumericsError::NotScalar(_))));
        let mut other = Tape::<f64>::new();
        let b = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(b), Err(NumericsError::ForeignVar)));
        assert!(matches!(tape.grad(b), Err(NumericsError::ForeignVar)));
    }

    #[test]
    fn fused_norm_act_matches_composition() {
        let x = Tensor::from_f64(&[2, 4, 2, 3], &(0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect::<Vec<_>>()).unwrap();
        let s = Tensor::from_f64(&[4], &[1.0, -0.5, 2.0, 0.7]).unwrap();
        let b = Tensor::from_f64(&[4], &[0.1, 0.0, -0.3, 0.2]).unwrap();
        let o = Tensor::from_f64(&[2, 4], &[0.5, -0.2, 0.0, 0.3, -0.1, 0.4, 0.2, -0.6]).unwrap();
        let probe = Tensor::from_f64(&[2, 4, 2, 3], &(0..48).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let run = |fused: bool| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = [&x, &s, &b, &o].iter().map(|t| tape.param((*t).clone())).collect();
            let y = if fused {
                tape.group_norm_act(vars[0], 2, 1e-5, vars[1], vars[2], Some(vars[3]), Some(Activation::Silu)).unwrap()
            } else {
                let h = tape.group_norm(vars[0], 2, 1e-5, Some((vars[1], vars[2]))).unwrap();
                let h = tape.add_channel(h, vars[3]).unwrap();
                tape.silu(h)
            };
            let p = tape.constant(probe.clone());
            let l = tape.mul(y, p).unwrap();
            let l = tape.sum(l);
            tape.backward(l).unwrap();
            let grads: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad(*v).unwrap().unwrap()).collect();
            (tape.value(y).clone(), grads)
        };
        let (ya, ga) = run(true);
        let (yb, gb) = run(false);
        assert!(ya.max_abs_diff(&yb) < 1e-13);
        for (a, b) in ga.iter().zip(&gb) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }
}
