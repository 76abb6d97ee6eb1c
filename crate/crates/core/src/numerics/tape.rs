//! Reverse-mode gradients over a recorded list of matrix operations.
//!
//! Every value on a [`Tape`] is a rank-2 matrix. A forward pass pushes one
//! node per operation; [`Tape::backward`] walks the list in reverse and
//! accumulates vector-Jacobian products. Nodes that depend on no trainable
//! parameter are never visited on the way back, so frozen sub-networks only
//! pay for their forward evaluation.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::matmul_into;
use crate::numerics::{Gradients, ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    InvSqrt1p(Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSum(Var),
    SumAll(Var),
    SegmentSoftmax(Var, usize),
    CenterRows(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of a [`ParamSet`] registered on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    /// Adds the bindings of `other`; names must be disjoint.
    pub fn extend(&mut self, other: Bound) -> Result<()> {
        for (k, v) in other.vars {
            if self.vars.insert(k.clone(), v).is_some() {
                return Err(Error::Invalid(format!("parameter `{k}` bound twice")));
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    /// Records a named parameter. Frozen parameters are recorded as constants.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(name.to_string());
        }
        v
    }

    /// Registers every parameter of `params` on this tape.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|p| (p.name.clone(), self.param(&p.name, &p.value, p.trainable)))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter of `params` as a constant.
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|p| (p.name.clone(), self.constant(&p.value)))
            .collect();
        Bound { vars }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(vec![n.rows, n.cols], n.value.clone())
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "element-wise op")?;
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[r×c] + row[1×c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: row {:?} vs matrix {:?}",
                self.shape(row),
                (r, c)
            )));
        }
        let rv = &self.node(row).value;
        let out = self
            .node(a)
            .value
            .chunks(c.max(1))
            .flat_map(|ch| ch.iter().zip(rv).map(|(x, y)| x + y))
            .collect::<Vec<_>>();
        let ng = self.ng(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    /// `a[r×c] ⊙ col[r×1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::Shape(format!(
                "mul_col: column {:?} vs matrix {:?}",
                self.shape(col),
                (r, c)
            )));
        }
        let cv = &self.node(col).value;
        let mut out = self.node(a).value.clone();
        for (i, ch) in out.chunks_mut(c.max(1)).enumerate() {
            for x in ch {
                *x *= cv[i];
            }
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    /// `a[r×c] ⊙ row[1×c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "mul_row: row {:?} vs matrix {:?}",
                self.shape(row),
                (r, c)
            )));
        }
        let rv = &self.node(row).value;
        let out = self
            .node(a)
            .value
            .chunks(c.max(1))
            .flat_map(|ch| ch.iter().zip(rv).map(|(x, y)| x * y))
            .collect::<Vec<_>>();
        let ng = self.ng(&[a, row]);
        Ok(self.push(r, c, out, Op::MulRow(a, row), ng))
    }

    /// Multiplies every entry by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape("scale_by expects a 1×1 scale".into()));
        }
        let k = self.node(s).value[0];
        let (r, c) = self.shape(a);
        let out = self.node(a).value.iter().map(|x| x * k).collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.node(a).value.iter().map(|x| x * k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| silu(x)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    /// `(1 + a)^(-1/2)` element-wise; `a` must exceed −1.
    pub fn inv_sqrt1p(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.node(a).value.iter().any(|&x| x <= -1.0) {
            return Err(Error::Invalid("inv_sqrt1p needs inputs above -1".into()));
        }
        let out = self.node(a).value.iter().map(|&x| 1.0 / (1.0 + x).sqrt()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::InvSqrt1p(a), ng))
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather index {bad} out of {r} rows")));
        }
        let src = &self.node(a).value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(idx.len(), c, out, Op::Gather(a, idx), ng))
    }

    /// Row `i` of `a` is added into row `idx[i]` of an `out_rows`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(Error::Shape(format!(
                "scatter index has {} entries for {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Shape(format!("scatter index {bad} out of {out_rows} rows")));
        }
        let src = &self.node(a).value;
        let mut out = vec![0.0; out_rows * c];
        for (row, &dst) in idx.iter().enumerate() {
            for (o, s) in out[dst * c..(dst + 1) * c].iter_mut().zip(&src[row * c..(row + 1) * c]) {
                *o += s;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out_rows, c, out, Op::ScatterAdd(a, idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Shape("concat_cols of nothing".into())),
        };
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Shape(format!("concat_cols rows {pr} vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let n = self.node(p);
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Shape("concat_rows of nothing".into())),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let n = self.node(p);
            if n.cols != c {
                return Err(Error::Shape(format!("concat_rows cols {} vs {c}", n.cols)));
            }
            rows += n.rows;
            out.extend_from_slice(&n.value);
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Per-row sum, `r×c → r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .node(a)
            .value
            .chunks(c.max(1))
            .map(|ch| ch.iter().sum())
            .collect::<Vec<f64>>();
        let out = if c == 0 { vec![0.0; r] } else { out };
        let ng = self.ng(&[a]);
        self.push(r, 1, out, Op::RowSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    /// Softmax of a column vector over consecutive groups of `segment` rows.
    pub fn segment_softmax(&mut self, a: Var, segment: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c != 1 || segment == 0 || r % segment != 0 {
            return Err(Error::Shape(format!(
                "segment_softmax needs an r×1 input with r divisible by {segment}, got {:?}",
                (r, c)
            )));
        }
        let mut out = self.node(a).value.clone();
        for seg in out.chunks_mut(segment) {
            let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in seg.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, 1, out, Op::SegmentSoftmax(a, segment), ng))
    }

    /// Subtracts the column-wise mean over all rows.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = center_rows(&self.node(a).value, r, c);
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::CenterRows(a), ng)
    }

    /// Squared Frobenius norm of `a − b` as a `1×1` node.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum_all(sq))
    }

    /// Gradients of the scalar `output` with respect to every trainable
    /// parameter recorded on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output);
        if (out.rows, out.cols) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {}×{}",
                out.rows, out.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut result = Gradients::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = match grads.get(id).and_then(|g| g.clone()) {
                    Some(g) => g,
                    None => vec![0.0; node.value.len()],
                };
                result.accumulate(name, &Tensor::from_parts(vec![node.rows, node.cols], g))?;
            }
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.needs_grad(*a) {
                    // ga = g · bᵀ
                    let bv = self.data(*b);
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.needs_grad(*b) {
                    // gb = aᵀ · g
                    let av = self.data(*a);
                    let gb = acc(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, 1.0, self);
                add_into(grads, *b, g, 1.0, self);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, 1.0, self);
                add_into(grads, *b, g, -1.0, self);
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let bv = self.data(*b);
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.data(*a);
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g, 1.0, self);
                if self.needs_grad(*row) {
                    let gr = acc(grads, *row, c);
                    for ch in g.chunks(c.max(1)) {
                        for (o, x) in gr.iter_mut().zip(ch) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.data(*col);
                if self.needs_grad(*a) {
                    let ga = acc(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * cv[i];
                        }
                    }
                }
                if self.needs_grad(*col) {
                    let av = self.data(*a);
                    let gc = acc(grads, *col, r);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * av[i * c + j];
                        }
                        gc[i] += s;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.data(*row);
                if self.needs_grad(*a) {
                    let ga = acc(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * rv[j];
                        }
                    }
                }
                if self.needs_grad(*row) {
                    let av = self.data(*a);
                    let gr = acc(grads, *row, c);
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.data(*s)[0];
                add_into(grads, *a, g, k, self);
                if self.needs_grad(*s) {
                    let av = self.data(*a);
                    let dot: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(grads, *s, 1)[0] += dot;
                }
            }
            Op::Scale(a, k) => add_into(grads, *a, g, *k, self),
            Op::Silu(a) => {
                let av = self.data(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(av[i]);
                    ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::InvSqrt1p(a) => {
                let y = &node.value;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] -= 0.5 * g[i] * y[i] * y[i] * y[i];
                }
            }
            Op::Gather(a, idx) => {
                let (ar, _) = self.shape(*a);
                let ga = acc(grads, *a, ar * c);
                for (row, &src) in idx.iter().enumerate() {
                    for (o, x) in ga[src * c..(src + 1) * c].iter_mut().zip(&g[row * c..(row + 1) * c]) {
                        *o += x;
                    }
                }
            }
            Op::ScatterAdd(a, idx) => {
                let (ar, _) = self.shape(*a);
                let ga = acc(grads, *a, ar * c);
                for (row, &dst) in idx.iter().enumerate() {
                    for (o, x) in ga[row * c..(row + 1) * c].iter_mut().zip(&g[dst * c..(dst + 1) * c]) {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.needs_grad(p) {
                        let gp = acc(grads, p, r * pc);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    if self.needs_grad(p) {
                        let gp = acc(grads, p, len);
                        for (o, x) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::RowSum(a) => {
                let (ar, ac) = self.shape(*a);
                let ga = acc(grads, *a, ar * ac);
                for i in 0..ar {
                    for j in 0..ac {
                        ga[i * ac + j] += g[i];
                    }
                }
            }
            Op::SumAll(a) => {
                let n = self.node(*a).value.len();
                let ga = acc(grads, *a, n);
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let ga = acc(grads, *a, r);
                for start in (0..r).step_by(*seg) {
                    let dot: f64 = (start..start + seg).map(|i| g[i] * y[i]).sum();
                    for i in start..start + seg {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::CenterRows(a) => {
                let centered = center_rows(g, r, c);
                add_into(grads, *a, &centered, 1.0, self);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], k: f64, tape: &Tape) {
    if !tape.needs_grad(v) {
        return;
    }
    let ga = acc(grads, v, g.len());
    for (o, x) in ga.iter_mut().zip(g) {
        *o += k * x;
    }
}

pub(crate) fn center_rows(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    if r == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; c];
    for ch in v.chunks(c) {
        for (m, x) in mean.iter_mut().zip(ch) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= r as f64;
    }
    v.chunks(c)
        .flat_map(|ch| ch.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
