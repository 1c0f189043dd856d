//! Reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tensor`] is a cheaply cloneable handle to a shared buffer. Ops build a
//! DAG of backward closures; [`Tensor::backward`] runs a single reverse
//! topological pass and accumulates gradients into every tracked leaf.
//!
//! Invariants:
//! - all arithmetic is `f64`, end to end;
//! - forward values are immutable while a graph is alive (only the optimizer
//!   mutates leaf data, after gradients are consumed);
//! - a frozen leaf never receives a gradient, but gradients still flow
//!   through ops whose inputs mix frozen and trainable tensors;
//! - backward closures never capture their own output, so graphs are acyclic
//!   and drop cleanly with the loss tensor.

mod gradcheck;
mod init;
pub mod m2te;
mod optim;

pub use gradcheck::grad_check;
pub use init::{uniform, xavier_uniform};
pub use optim::Adam;

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph construction disabled on this thread. Ops inside
/// produce plain value tensors, which makes long sampling loops cheap.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        Restore(prev)
    });
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackFn = Box<dyn Fn(&[f64])>;

struct Op {
    parents: Vec<Tensor>,
    back: BackFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    tracked: Cell<bool>,
    op: Option<Op>,
}

/// Handle to a shared dense tensor. Cloning shares the buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked.get())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                tracked: Cell::new(tracked),
                op,
            }),
        }
    }

    /// Untracked leaf from explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, None))
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(vec![], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    /// Marks this leaf as requiring gradients and returns it.
    pub fn with_grad(self) -> Tensor {
        self.inner.tracked.set(true);
        self
    }

    /// Toggles gradient tracking. Only valid on leaves; interior nodes keep
    /// their graph role.
    pub fn set_tracked(&self, tracked: bool) -> Result<()> {
        if self.inner.op.is_some() {
            return Err(Error::Contract(
                "set_tracked is only valid on leaf tensors".into(),
            ));
        }
        self.inner.tracked.set(tracked);
        Ok(())
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked.get()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    /// Borrow of the backing buffer, row-major.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Copy of the accumulated gradient, if any was written.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the backing data. The shape is fixed; this is how an
    /// optimizer applies updates.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Mutable access to the backing data, for optimizers and tests.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Accumulates into the gradient buffer if this tensor is tracked.
    fn add_grad(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.tracked.get() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    fn node(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        let tracked = grad_enabled() && parents.iter().any(|p| p.inner.tracked.get());
        if tracked {
            Tensor::new_inner(shape, data, true, Some(Op { parents, back }))
        } else {
            Tensor::new_inner(shape, data, false, None)
        }
    }

    /// Reverse-mode pass from a scalar. All tracked leaves reachable from
    /// this node accumulate gradients; everything else is untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, shape is {:?}",
                self.shape()
            )));
        }
        if !self.inner.tracked.get() {
            return Err(Error::Contract(
                "backward() on a tensor with no graph (untracked)".into(),
            ));
        }

        // Post-order DFS over parent edges; reversed it is a topological
        // order, so every node is processed after all of its consumers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, idx)) = stack.pop() {
            let n_parents = node.inner.op.as_ref().map_or(0, |op| op.parents.len());
            if idx < n_parents {
                let parent = node.inner.op.as_ref().unwrap().parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.inner.tracked.get()
                    && parent.inner.op.is_some()
                    && visited.insert(parent.inner.id)
                {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        *self.inner.grad.borrow_mut() = Some(vec![1.0]);
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            if let Some(op) = &node.inner.op {
                (op.back)(&grad);
            } else {
                // The root itself may be a leaf; keep its seed gradient.
                *node.inner.grad.borrow_mut() = Some(grad);
            }
        }
        Ok(())
    }

    // ---- shape helpers ----

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                pa.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g += d));
                pb.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g += d));
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                pa.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g += d));
                pb.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g -= d));
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                {
                    let bv = pb.data();
                    pa.add_grad(|g| {
                        for i in 0..g.len() {
                            g[i] += d[i] * bv[i];
                        }
                    });
                }
                let av = pa.data();
                pb.add_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * av[i];
                    }
                });
            }),
        ))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let pa = self.clone();
        Tensor::node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |d| {
                pa.add_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += c * d[i];
                    }
                });
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Multiplication by a scalar tensor, with gradient to both sides.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|x| x * sv).collect();
        let (pa, ps) = (self.clone(), s.clone());
        Ok(Tensor::node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |d| {
                let sv = ps.data()[0];
                pa.add_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += sv * d[i];
                    }
                });
                let av = pa.data();
                ps.add_grad(|g| {
                    let mut acc = 0.0;
                    for i in 0..av.len() {
                        acc += d[i] * av[i];
                    }
                    g[0] += acc;
                });
            }),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|x| x.tanh()).collect();
        let pa = self.clone();
        let y_saved = y.clone();
        Tensor::node(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |d| {
                pa.add_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * (1.0 - y_saved[i] * y_saved[i]);
                    }
                });
            }),
        )
    }

    /// SiLU activation, `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        let y: Vec<f64> = self.data().iter().map(|x| x * sigmoid(*x)).collect();
        let pa = self.clone();
        Tensor::node(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |d| {
                let xv = pa.data();
                pa.add_grad(|g| {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        g[i] += d[i] * (s * (1.0 + xv[i] * (1.0 - s)));
                    }
                });
            }),
        )
    }

    // ---- linear algebra ----

    /// 2D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::node(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                // dA = dC . B^T
                {
                    let b = pb.data();
                    pa.add_grad(|g| {
                        for i in 0..m {
                            for j in 0..n {
                                let dv = d[i * n + j];
                                if dv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    g[i * k + p] += dv * b[p * n + j];
                                }
                            }
                        }
                    });
                }
                // dB = A^T . dC
                let a = pa.data();
                pb.add_grad(|g| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += av * d[i * n + j];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        let pa = self.clone();
        Ok(Tensor::node(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |d| {
                pa.add_grad(|g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += d[j * m + i];
                        }
                    }
                });
            }),
        ))
    }

    /// 1D convolution, valid padding. Input `[c_in, t]`, kernel
    /// `[c_out, c_in, k]`, output `[c_out, (t - k)/stride + 1]`.
    pub fn conv1d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (c_in, t) = self.rows_cols("conv1d")?;
        let (c_out, kc_in, k) = match kernel.shape() {
            [a, b, c] => (*a, *b, *c),
            _ => {
                return Err(Error::Shape {
                    op: "conv1d",
                    lhs: self.shape().to_vec(),
                    rhs: kernel.shape().to_vec(),
                })
            }
        };
        if kc_in != c_in || k > t || stride == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let t_out = (t - k) / stride + 1;
        let mut out = vec![0.0; c_out * t_out];
        {
            let x = self.data();
            let w = kernel.data();
            for co in 0..c_out {
                for to in 0..t_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        let xoff = ci * t + to * stride;
                        let woff = (co * c_in + ci) * k;
                        for j in 0..k {
                            acc += w[woff + j] * x[xoff + j];
                        }
                    }
                    out[co * t_out + to] = acc;
                }
            }
        }
        let (px, pw) = (self.clone(), kernel.clone());
        Ok(Tensor::node(
            vec![c_out, t_out],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |d| {
                {
                    let w = pw.data();
                    px.add_grad(|g| {
                        for co in 0..c_out {
                            for to in 0..t_out {
                                let dv = d[co * t_out + to];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    let xoff = ci * t + to * stride;
                                    let woff = (co * c_in + ci) * k;
                                    for j in 0..k {
                                        g[xoff + j] += dv * w[woff + j];
                                    }
                                }
                            }
                        }
                    });
                }
                let x = px.data();
                pw.add_grad(|g| {
                    for co in 0..c_out {
                        for to in 0..t_out {
                            let dv = d[co * t_out + to];
                            if dv == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                let xoff = ci * t + to * stride;
                                let woff = (co * c_in + ci) * k;
                                for j in 0..k {
                                    g[woff + j] += dv * x[xoff + j];
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Depthwise 1D convolution. Input `[c, t]`, kernel `[c, k]`, each
    /// channel convolved with its own filter; output `[c, (t-k)/stride + 1]`.
    pub fn conv1d_depthwise(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (c, t) = self.rows_cols("conv1d_depthwise")?;
        let (kc, k) = kernel.rows_cols("conv1d_depthwise")?;
        if kc != c || k > t || stride == 0 {
            return Err(Error::Shape {
                op: "conv1d_depthwise",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let t_out = (t - k) / stride + 1;
        let mut out = vec![0.0; c * t_out];
        {
            let x = self.data();
            let w = kernel.data();
            for ci in 0..c {
                for to in 0..t_out {
                    let xoff = ci * t + to * stride;
                    let woff = ci * k;
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += w[woff + j] * x[xoff + j];
                    }
                    out[ci * t_out + to] = acc;
                }
            }
        }
        let (px, pw) = (self.clone(), kernel.clone());
        Ok(Tensor::node(
            vec![c, t_out],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |d| {
                {
                    let w = pw.data();
                    px.add_grad(|g| {
                        for ci in 0..c {
                            for to in 0..t_out {
                                let dv = d[ci * t_out + to];
                                if dv == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    g[ci * t + to * stride + j] += dv * w[ci * k + j];
                                }
                            }
                        }
                    });
                }
                let x = px.data();
                pw.add_grad(|g| {
                    for ci in 0..c {
                        for to in 0..t_out {
                            let dv = d[ci * t_out + to];
                            if dv == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                g[ci * k + j] += dv * x[ci * t + to * stride + j];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise RMS normalization with a learned gain:
    /// `y = x / sqrt(mean(x^2) + 1e-6) * gain`.
    pub fn rms_norm(&self, gain: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-6;
        let (m, dcols) = self.rows_cols("rms_norm")?;
        if gain.shape() != [dcols] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * dcols];
        let mut rs = vec![0.0; m];
        {
            let x = self.data();
            let g = gain.data();
            for i in 0..m {
                let row = &x[i * dcols..(i + 1) * dcols];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / dcols as f64;
                let r = 1.0 / (ms + EPS).sqrt();
                rs[i] = r;
                for j in 0..dcols {
                    out[i * dcols + j] = row[j] * r * g[j];
                }
            }
        }
        let (px, pg) = (self.clone(), gain.clone());
        Ok(Tensor::node(
            vec![m, dcols],
            out,
            vec![self.clone(), gain.clone()],
            Box::new(move |d| {
                let x = px.data();
                {
                    let g = pg.data();
                    px.add_grad(|gx| {
                        for i in 0..m {
                            let r = rs[i];
                            let row = &x[i * dcols..(i + 1) * dcols];
                            let drow = &d[i * dcols..(i + 1) * dcols];
                            let mut dot = 0.0;
                            for j in 0..dcols {
                                dot += drow[j] * g[j] * row[j];
                            }
                            let c = r * r * r * dot / dcols as f64;
                            for j in 0..dcols {
                                gx[i * dcols + j] += r * g[j] * drow[j] - c * row[j];
                            }
                        }
                    });
                }
                pg.add_grad(|gg| {
                    for i in 0..m {
                        let r = rs[i];
                        for j in 0..dcols {
                            gg[j] += d[i * dcols + j] * x[i * dcols + j] * r;
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        {
            let x = self.data();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
                for j in 0..n {
                    out[i * n + j] /= z;
                }
            }
        }
        let y_saved = out.clone();
        let px = self.clone();
        Ok(Tensor::node(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| {
                    for i in 0..m {
                        let yrow = &y_saved[i * n..(i + 1) * n];
                        let drow = &d[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            g[i * n + j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                });
            }),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    /// `logits` is `[t, v]`, `targets` has `t` ids below `v`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (t, v) = self.rows_cols("cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!(
                "cross_entropy target id {bad} out of range for vocab {v}"
            )));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        {
            let x = self.data();
            for i in 0..t {
                let row = &x[i * v..(i + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..v {
                    let e = (row[j] - mx).exp();
                    probs[i * v + j] = e;
                    z += e;
                }
                for j in 0..v {
                    probs[i * v + j] /= z;
                }
                loss -= probs[i * v + targets[i]].ln();
            }
        }
        loss /= t as f64;
        let px = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::node(
            vec![],
            vec![loss],
            vec![self.clone()],
            Box::new(move |d| {
                let scale = d[0] / t as f64;
                px.add_grad(|g| {
                    for i in 0..t {
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            g[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }),
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mse")?;
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyInput("mse over zero elements".into()));
        }
        let loss = {
            let a = self.data();
            let b = other.data();
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n as f64
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::node(
            vec![],
            vec![loss],
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                let scale = 2.0 * d[0] / n as f64;
                let (av, bv) = (pa.to_vec(), pb.to_vec());
                pa.add_grad(|g| {
                    for i in 0..n {
                        g[i] += scale * (av[i] - bv[i]);
                    }
                });
                pb.add_grad(|g| {
                    for i in 0..n {
                        g[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let px = self.clone();
        Tensor::node(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| g.iter_mut().for_each(|g| *g += d[0]));
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean_all over zero elements".into()));
        }
        Ok(self.sum_all().scale(1.0 / n as f64))
    }

    /// Column means of a matrix, `[m, d] -> [1, d]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, dcols) = self.rows_cols("mean_rows")?;
        if m == 0 {
            return Err(Error::EmptyInput("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; dcols];
        {
            let x = self.data();
            for i in 0..m {
                for j in 0..dcols {
                    out[j] += x[i * dcols + j];
                }
            }
            for v in out.iter_mut() {
                *v /= m as f64;
            }
        }
        let px = self.clone();
        Ok(Tensor::node(
            vec![1, dcols],
            out,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| {
                    for i in 0..m {
                        for j in 0..dcols {
                            g[i * dcols + j] += d[j] / m as f64;
                        }
                    }
                });
            }),
        ))
    }

    /// Broadcast add of a rank-1 bias over every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, dcols) = self.rows_cols("add_row")?;
        if bias.shape() != [dcols] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data: Vec<f64> = {
            let x = self.data();
            let b = bias.data();
            (0..m * dcols).map(|i| x[i] + b[i % dcols]).collect()
        };
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::node(
            vec![m, dcols],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |d| {
                px.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g += d));
                pb.add_grad(|g| {
                    for i in 0..m {
                        for j in 0..dcols {
                            g[j] += d[i * dcols + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of zero tensors".into()));
        }
        let (_, dcols) = parts[0].rows_cols("concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != dcols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * dcols);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let owners: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::node(
            vec![rows, dcols],
            data,
            parts.to_vec(),
            Box::new(move |d| {
                let mut off = 0;
                for (p, &sz) in owners.iter().zip(&sizes) {
                    let seg = &d[off..off + sz];
                    p.add_grad(|g| g.iter_mut().zip(seg).for_each(|(g, d)| *g += d));
                    off += sz;
                }
            }),
        ))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, dcols) = self.rows_cols("slice_rows")?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data: Vec<f64> = self.data()[start * dcols..(start + len) * dcols].to_vec();
        let px = self.clone();
        Ok(Tensor::node(
            vec![len, dcols],
            data,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| {
                    for (i, dv) in d.iter().enumerate() {
                        g[start * dcols + i] += dv;
                    }
                });
            }),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of zero tensors".into()));
        }
        let (rows, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (r, c) = p.rows_cols("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                for i in 0..rows {
                    data[i * total + off..i * total + off + w]
                        .copy_from_slice(&pd[i * w..(i + 1) * w]);
                }
                off += w;
            }
        }
        let owners: Vec<Tensor> = parts.to_vec();
        let widths2 = widths.clone();
        Ok(Tensor::node(
            vec![rows, total],
            data,
            parts.to_vec(),
            Box::new(move |d| {
                let mut off = 0;
                for (p, &w) in owners.iter().zip(&widths2) {
                    p.add_grad(|g| {
                        for i in 0..rows {
                            for j in 0..w {
                                g[i * w + j] += d[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }),
        ))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, dcols) = self.rows_cols("slice_cols")?;
        if start + len > dcols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = vec![0.0; m * len];
        {
            let x = self.data();
            for i in 0..m {
                data[i * len..(i + 1) * len]
                    .copy_from_slice(&x[i * dcols + start..i * dcols + start + len]);
            }
        }
        let px = self.clone();
        Ok(Tensor::node(
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| {
                    for i in 0..m {
                        for j in 0..len {
                            g[i * dcols + start + j] += d[i * len + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Row lookup into an embedding table `[v, d]`; backward scatter-adds.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, dcols) = self.rows_cols("embedding")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = vec![0.0; ids.len() * dcols];
        {
            let table = self.data();
            for (t, &id) in ids.iter().enumerate() {
                data[t * dcols..(t + 1) * dcols]
                    .copy_from_slice(&table[id * dcols..(id + 1) * dcols]);
            }
        }
        let px = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::node(
            vec![ids.len(), dcols],
            data,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..dcols {
                            g[id * dcols + j] += d[t * dcols + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let px = self.clone();
        Ok(Tensor::node(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |d| {
                px.add_grad(|g| g.iter_mut().zip(d).for_each(|(g, d)| *g += d));
            }),
        ))
    }
}

/// A named, optionally trainable leaf tensor. Cloning shares the underlying
/// buffer, so a model can hand out parameter lists freely.
#[derive(Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    /// Wraps a leaf tensor as a trainable parameter.
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Result<Parameter> {
        tensor.set_tracked(true)?;
        Ok(Parameter {
            name: name.into(),
            tensor,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.tensor.is_tracked()
    }

    /// Freezes or thaws the parameter. A frozen parameter's gradient slot is
    /// never written by backward passes.
    pub fn set_trainable(&self, trainable: bool) {
        // Parameters are always leaves, set_tracked cannot fail here.
        self.tensor
            .set_tracked(trainable)
            .expect("parameter tensors are leaves");
        if !trainable {
            self.tensor.clear_grad();
        }
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.tensor.shape())
            .field("trainable", &self.trainable())
            .finish()
    }
}
