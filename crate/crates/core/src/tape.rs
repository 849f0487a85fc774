//! Reverse-mode autodiff over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and enter the tape as named leaves, so
//! [`Grads::params`] can hand back gradients keyed by module path.
//!
//! A tape built with [`Tape::tracing`] carries shapes only. Model code runs
//! unchanged on it, which yields token-count ledgers and multiply-add counts
//! for full-size configurations without touching any weights.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{ParamSpec, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Mat),
    Borrowed(ArrayView2<'p, f64>),
    Shape,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        visible: Var,
        fill: Var,
        positions: Vec<usize>,
    },
    MeanRows(Var),
    Maximum(Var, Var),
    MaskedMse {
        pred: Var,
        target: Mat,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Mat,
    },
    Mse {
        pred: Var,
        target: Mat,
    },
    WeightedSum {
        x: Var,
        weights: Mat,
    },
}

struct Node<'p> {
    value: Value<'p>,
    shape: (usize, usize),
    op: Op,
    requires_grad: bool,
}

enum Source<'p> {
    Store(&'p ParamStore),
    Specs(HashMap<String, (usize, usize)>),
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    source: Source<'p>,
    bound: HashMap<String, Var>,
    flops: u64,
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, x·Φ(x).
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf(x) + x * pdf
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            source: Source::Store(params),
            bound: HashMap::new(),
            flops: 0,
        }
    }

    /// A shape-only tape whose parameters are described by `specs`.
    pub fn tracing(specs: &[ParamSpec]) -> Self {
        Tape {
            nodes: Vec::new(),
            source: Source::Specs(
                specs
                    .iter()
                    .map(|s| (s.name.clone(), (s.rows, s.cols)))
                    .collect(),
            ),
            bound: HashMap::new(),
            flops: 0,
        }
    }

    pub fn is_tracing(&self) -> bool {
        matches!(self.source, Source::Specs(_))
    }

    /// Multiply-adds executed (or traced) by matrix products so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape.0
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].shape.1
    }

    /// Value of a node. Panics on a tracing tape.
    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Borrowed(m) => m.view(),
            Value::Shape => panic!("tracing tape holds no values"),
        }
    }

    fn push(&mut self, value: Option<Mat>, shape: (usize, usize), op: Op, requires_grad: bool) -> Var {
        let value = match value {
            Some(m) => {
                debug_assert_eq!(m.dim(), shape);
                Value::Owned(m)
            }
            None => Value::Shape,
        };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that gradients are not propagated into.
    pub fn constant(&mut self, m: Mat) -> Var {
        let shape = m.dim();
        let value = if self.is_tracing() { None } else { Some(m) };
        self.push(value, shape, Op::Leaf, false)
    }

    /// Input whose gradient is recorded.
    pub fn input(&mut self, m: Mat) -> Var {
        let shape = m.dim();
        let value = if self.is_tracing() { None } else { Some(m) };
        self.push(value, shape, Op::Leaf, true)
    }

    /// Shape-only placeholder for tracing tapes.
    pub fn placeholder(&mut self, rows: usize, cols: usize) -> Var {
        if self.is_tracing() {
            self.push(None, (rows, cols), Op::Leaf, false)
        } else {
            self.constant(Mat::zeros((rows, cols)))
        }
    }

    /// Binds a named parameter, reusing the leaf if it was bound before.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let (value, shape) = match &self.source {
            Source::Store(store) => {
                let m = store
                    .get(name)
                    .unwrap_or_else(|| panic!("parameter '{name}' missing from store"));
                (Value::Borrowed(m.view()), m.dim())
            }
            Source::Specs(specs) => {
                let shape = *specs
                    .get(name)
                    .unwrap_or_else(|| panic!("parameter '{name}' missing from specs"));
                (Value::Shape, shape)
            }
        };
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        self.flops += (m * k * n) as u64;
        let value = (!self.is_tracing()).then(|| self.value(a).dot(&self.value(b)));
        let rg = self.rg(&[a, b]);
        self.push(value, (m, n), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = (!self.is_tracing()).then(|| self.value(a).t().to_owned());
        let rg = self.rg(&[a]);
        self.push(value, (n, m), Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shape mismatch");
        let value = (!self.is_tracing()).then(|| &self.value(a) + &self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, shape, Op::Add(a, b), rg)
    }

    /// `a + row`, broadcasting a 1×n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(self.shape(row), (1, shape.1), "bias shape mismatch");
        let value = (!self.is_tracing()).then(|| &self.value(a) + &self.value(row));
        let rg = self.rg(&[a, row]);
        self.push(value, shape, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let shape = self.shape(a);
        let value = (!self.is_tracing()).then(|| &self.value(a) * s);
        let rg = self.rg(&[a]);
        self.push(value, shape, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let value = (!self.is_tracing()).then(|| self.value(a).mapv(gelu));
        let rg = self.rg(&[a]);
        self.push(value, shape, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let value = (!self.is_tracing()).then(|| {
            let mut out = self.value(a).to_owned();
            for mut row in out.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out
        });
        let rg = self.rg(&[a]);
        self.push(value, shape, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let rg = self.rg(&[x, gain, bias]);
        if self.is_tracing() {
            let op = Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Mat::zeros((0, 0)),
                inv_std: Vec::new(),
            };
            return self.push(None, (n, c), op, rg);
        }
        let xv = self.value(x);
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(n);
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push(Some(out), (n, c), op, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + width <= n, "column slice out of range");
        let value = (!self.is_tracing())
            .then(|| self.value(a).slice(s![.., start..start + width]).to_owned());
        let rg = self.rg(&[a]);
        self.push(value, (m, width), Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.rows(parts[0]);
        assert!(parts.iter().all(|&p| self.rows(p) == m), "concat_cols row mismatch");
        let n = parts.iter().map(|&p| self.cols(p)).sum();
        let value = (!self.is_tracing()).then(|| {
            let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols")
        });
        let rg = self.rg(parts);
        self.push(value, (m, n), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "row slice out of range");
        let value = (!self.is_tracing())
            .then(|| self.value(a).slice(s![start..start + len, ..]).to_owned());
        let rg = self.rg(&[a]);
        self.push(value, (len, n), Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.cols(parts[0]);
        assert!(parts.iter().all(|&p| self.cols(p) == n), "concat_rows col mismatch");
        let m = parts.iter().map(|&p| self.rows(p)).sum();
        let value = (!self.is_tracing()).then(|| {
            let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows")
        });
        let rg = self.rg(parts);
        self.push(value, (m, n), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row selection; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        assert!(idx.iter().all(|&i| i < m), "gather index out of range");
        let value = (!self.is_tracing()).then(|| self.value(a).select(Axis(0), idx));
        let rg = self.rg(&[a]);
        self.push(value, (idx.len(), n), Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Places `visible` rows at `positions` of an `n`-row output and fills
    /// every other row with the 1×d `fill` row.
    pub fn scatter_rows(&mut self, visible: Var, fill: Var, positions: &[usize], n: usize) -> Var {
        let (k, d) = self.shape(visible);
        assert_eq!(k, positions.len(), "scatter count mismatch");
        assert_eq!(self.shape(fill), (1, d), "fill row shape mismatch");
        assert!(positions.iter().all(|&p| p < n), "scatter position out of range");
        let value = (!self.is_tracing()).then(|| {
            let fill_row = self.value(fill);
            let mut out = Mat::zeros((n, d));
            for mut row in out.rows_mut() {
                row.assign(&fill_row.row(0));
            }
            let vis = self.value(visible);
            for (i, &p) in positions.iter().enumerate() {
                out.row_mut(p).assign(&vis.row(i));
            }
            out
        });
        let rg = self.rg(&[visible, fill]);
        let op = Op::ScatterRows {
            visible,
            fill,
            positions: positions.to_vec(),
        };
        self.push(value, (n, d), op, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        assert!(m > 0, "mean over zero rows");
        let value = (!self.is_tracing())
            .then(|| self.value(a).mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0)));
        let rg = self.rg(&[a]);
        self.push(value, (1, n), Op::MeanRows(a), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b));
        let value = (!self.is_tracing()).then(|| {
            let mut out = self.value(a).to_owned();
            out.zip_mut_with(&self.value(b), |x, &y| *x = x.max(y));
            out
        });
        let rg = self.rg(&[a, b]);
        self.push(value, shape, Op::Maximum(a, b), rg)
    }

    /// Mean over `rows` of the per-row mean squared error.
    pub fn masked_mse(&mut self, pred: Var, target: Mat, rows: &[usize]) -> Var {
        assert_eq!(self.shape(pred), target.dim(), "masked_mse shape mismatch");
        assert!(!rows.is_empty(), "masked_mse over empty row set");
        let value = (!self.is_tracing()).then(|| {
            let p = self.value(pred);
            let width = p.ncols() as f64;
            let total: f64 = rows
                .iter()
                .map(|&r| {
                    p.row(r)
                        .iter()
                        .zip(target.row(r))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / width
                })
                .sum();
            Mat::from_elem((1, 1), total / rows.len() as f64)
        });
        let rg = self.rg(&[pred]);
        let op = Op::MaskedMse {
            pred,
            target,
            rows: rows.to_vec(),
        };
        self.push(value, (1, 1), op, rg)
    }

    /// −log softmax(logits)[target] for a 1×K row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let (one, k) = self.shape(logits);
        assert_eq!(one, 1, "cross_entropy expects a single row");
        assert!(target < k, "target class out of range");
        let rg = self.rg(&[logits]);
        if self.is_tracing() {
            let op = Op::CrossEntropy {
                logits,
                target,
                probs: Mat::zeros((0, 0)),
            };
            return self.push(None, (1, 1), op, rg);
        }
        let (loss, probs) = {
            let l = self.value(logits);
            let max = l.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + l.mapv(|x| (x - max).exp()).sum().ln();
            (lse - l[[0, target]], l.mapv(|x| (x - lse).exp()))
        };
        let op = Op::CrossEntropy {
            logits,
            target,
            probs,
        };
        self.push(Some(Mat::from_elem((1, 1), loss)), (1, 1), op, rg)
    }

    /// (1/K)‖pred − target‖² over all entries.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Var {
        assert_eq!(self.shape(pred), target.dim(), "mse shape mismatch");
        let value = (!self.is_tracing()).then(|| {
            let p = self.value(pred);
            let d = &p - &target;
            Mat::from_elem((1, 1), d.mapv(|x| x * x).sum() / d.len() as f64)
        });
        let rg = self.rg(&[pred]);
        self.push(value, (1, 1), Op::Mse { pred, target }, rg)
    }

    /// Σ x ⊙ weights, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Var {
        assert_eq!(self.shape(x), weights.dim(), "weighted_sum shape mismatch");
        let value = (!self.is_tracing())
            .then(|| Mat::from_elem((1, 1), (&self.value(x) * &weights).sum()));
        let rg = self.rg(&[x]);
        self.push(value, (1, 1), Op::WeightedSum { x, weights }, rg)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    /// Backpropagates from a 1×1 node.
    pub fn backward(&self, out: Var) -> Grads {
        assert!(!self.is_tracing(), "cannot differentiate a tracing tape");
        assert_eq!(self.shape(out), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, d: Mat| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(&x, |gv, &xv| *gv *= gelu_grad(xv));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = yv * (*dv - dot));
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if self.nodes[x.0].requires_grad {
                        let c = xhat.ncols() as f64;
                        let mut dxhat = &g * &self.value(*gain);
                        for ((mut drow, xrow), &inv) in
                            dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            let sum_d: f64 = drow.sum();
                            let sum_dx: f64 = drow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                            drow.zip_mut_with(&xrow, |dv, &xv| {
                                *dv = inv / c * (c * *dv - sum_d - xv * sum_dx)
                            });
                        }
                        acc(*x, dxhat);
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.cols(*p);
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let h = g.nrows();
                    d.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.rows(*p);
                        acc(*p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
                Op::ScatterRows {
                    visible,
                    fill,
                    positions,
                } => {
                    acc(*visible, g.select(Axis(0), positions));
                    let mut is_vis = vec![false; g.nrows()];
                    for &p in positions {
                        is_vis[p] = true;
                    }
                    let mut df = Mat::zeros((1, g.ncols()));
                    for (r, vis) in is_vis.iter().enumerate() {
                        if !vis {
                            let mut row = df.row_mut(0);
                            row += &g.row(r);
                        }
                    }
                    acc(*fill, df);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.shape(*a);
                    let row = g.row(0).mapv(|v| v / m as f64);
                    let d = row.broadcast((m, n)).expect("broadcast").to_owned();
                    acc(*a, d);
                }
                Op::Maximum(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = g.clone();
                    let mut db = g;
                    ndarray::Zip::from(&mut da)
                        .and(&mut db)
                        .and(&av)
                        .and(&bv)
                        .for_each(|x, y, &p, &q| {
                            if p >= q {
                                *y = 0.0;
                            } else {
                                *x = 0.0;
                            }
                        });
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MaskedMse { pred, target, rows } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g[[0, 0]] / (rows.len() as f64 * p.ncols() as f64);
                    let mut d = Mat::zeros(p.dim());
                    for &r in rows {
                        let mut row = d.row_mut(r);
                        row.assign(&(&p.row(r) - &target.row(r)));
                        row *= scale;
                    }
                    acc(*pred, d);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut d = probs.clone();
                    d[[0, *target]] -= 1.0;
                    acc(*logits, d * g[[0, 0]]);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g[[0, 0]] / p.len() as f64;
                    acc(*pred, (&p - target) * scale);
                }
                Op::WeightedSum { x, weights } => acc(*x, weights * g[[0, 0]]),
            }
        }

        let params = self
            .bound
            .iter()
            .filter_map(|(name, v)| grads[v.0].as_ref().map(|g| (name.clone(), g.clone())))
            .collect();
        Grads { nodes: grads, params }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Grads {
    /// Gradient with respect to a leaf; `None` if the output does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradients of every parameter bound on the tape that received one.
    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
    }
}
