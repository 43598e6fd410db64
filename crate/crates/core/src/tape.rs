//! Reverse-mode differentiation over a recorded tape.
//!
//! Every forward op pushes one node; `backward` walks the nodes in reverse
//! creation order (a topological order by construction) exactly once and
//! accumulates gradients into per-node buffers. `stop_grad` passes values
//! forward and blocks the backward path.

use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // some variant fields exist only for debug printing
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    AddRow(Var, Var),
    Sum(Var),
    MeanCols(Var),
    MaxCols(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Gelu(Var),
    Log(Var),
    XLogX(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Embedding { table: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose2d(Var),
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StopGrad(Var),
    StraightThrough { grad_to: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    PairwiseSqDist(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific forward stash (layernorm xhat/inv_std, CE probabilities).
    aux: Vec<f32>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by `Tape::backward`.
pub struct Grads {
    g: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.g[v.0].as_deref()
    }

    /// Gradient of a parameter leaf; zeros if the leaf is off the loss path.
    pub fn of(&self, v: Var, numel: usize) -> Vec<f32> {
        match &self.g[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f32>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn raw(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor { shape, data, requires_grad: false }
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        t.debug_check_finite();
        let ng = t.requires_grad;
        self.push(Op::Leaf, t, vec![], ng)
    }

    /// Leaf that never receives gradient, regardless of the tensor flag.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, t, vec![], false)
    }

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let v: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), Self::raw(shape, v), vec![], ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let v: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), Self::raw(shape, v), vec![], ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let v: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), Self::raw(shape, v), vec![], ng))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v: Vec<f32> = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), Self::raw(shape, v), vec![], ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v: Vec<f32> = self.value(a).data.iter().map(|x| x + c).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::AddScalar(a, c), Self::raw(shape, v), vec![], ng)
    }

    /// [r×c] + bias[c], broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(bias).numel() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "add_row bias {} vs cols {}",
                self.value(bias).numel(),
                c
            )));
        }
        let mut v = self.value(a).data.clone();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += self.value(bias).data[j];
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Op::AddRow(a, bias), Self::raw(vec![r, c], v), vec![], ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), vec![], ng)
    }

    /// [r×c] -> [r], mean over columns.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut v = vec![0.0; r];
        for i in 0..r {
            v[i] = self.value(a).data[i * c..(i + 1) * c].iter().sum::<f32>() / c as f32;
        }
        let ng = self.ng(a);
        self.push(Op::MeanCols(a), Self::raw(vec![r], v), vec![], ng)
    }

    /// [r×c] -> [r], max over columns; aux stores argmax per row.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut v = vec![0.0; r];
        let mut aux = vec![0.0; r];
        for i in 0..r {
            let row = &self.value(a).data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            v[i] = row[best];
            aux[i] = best as f32;
        }
        let ng = self.ng(a);
        self.push(Op::MaxCols(a), Self::raw(vec![r], v), aux, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = (self.value(a).rows(), self.value(a).cols());
        let (kb, n) = (self.value(b).rows(), self.value(b).cols());
        if ka != kb {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul [{m}x{ka}] x [{kb}x{n}]"
            )));
        }
        let mut v = vec![0.0; m * n];
        k::gemm_nn(&mut v, &self.value(a).data, &self.value(b).data, m, ka, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), Self::raw(vec![m, n], v), vec![], ng))
    }

    /// a[m×k] · b[n×k]ᵀ -> [m×n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = (self.value(a).rows(), self.value(a).cols());
        let (n, kb) = (self.value(b).rows(), self.value(b).cols());
        if ka != kb {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul_nt [{m}x{ka}] x [{n}x{kb}]T"
            )));
        }
        let mut v = vec![0.0; m * n];
        k::gemm_nt(&mut v, &self.value(a).data, &self.value(b).data, m, ka, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMulNT(a, b), Self::raw(vec![m, n], v), vec![], ng))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(CoreError::ShapeMismatch(format!("conv1d x{xs:?} w{ws:?}")));
        }
        let (cin, lin) = (xs[0], xs[1]);
        let (cout, ksz) = (ws[0], ws[2]);
        if self.value(b).numel() != cout {
            return Err(CoreError::ShapeMismatch("conv1d bias".into()));
        }
        let lout = k::conv1d_out_len(lin, ksz, stride, pad).ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "conv1d geometry gives non-positive output length (lin={lin}, k={ksz}, stride={stride}, pad={pad})"
            ))
        })?;
        let mut v = vec![0.0; cout * lout];
        k::conv1d_fwd(
            &mut v,
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            cin,
            lin,
            cout,
            ksz,
            stride,
            pad,
            lout,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Op::Conv1d { x, w, b, stride, pad },
            Self::raw(vec![cout, lout], v),
            vec![],
            ng,
        ))
    }

    pub fn convt1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        if xs.len() != 2 || ws.len() != 3 || ws[0] != xs[0] {
            return Err(CoreError::ShapeMismatch(format!("convt1d x{xs:?} w{ws:?}")));
        }
        let (cin, lin) = (xs[0], xs[1]);
        let (cout, ksz) = (ws[1], ws[2]);
        if self.value(b).numel() != cout {
            return Err(CoreError::ShapeMismatch("convt1d bias".into()));
        }
        let lout = k::convt1d_out_len(lin, ksz, stride, pad).ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "convt1d geometry gives non-positive output length (lin={lin}, k={ksz}, stride={stride}, pad={pad})"
            ))
        })?;
        let mut v = vec![0.0; cout * lout];
        k::convt1d_fwd(
            &mut v,
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            cin,
            lin,
            cout,
            ksz,
            stride,
            pad,
            lout,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Op::ConvT1d { x, w, b, stride, pad },
            Self::raw(vec![cout, lout], v),
            vec![],
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::Relu(a), Self::raw(shape, v), vec![], ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut v = Vec::with_capacity(n);
        let mut tanhs = Vec::with_capacity(n);
        for x in self.value(a).data.iter() {
            let (g, t) = k::gelu_parts(*x);
            v.push(g);
            tanhs.push(t);
        }
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::Gelu(a), Self::raw(shape, v), tanhs, ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self.value(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::Log(a), Self::raw(shape, v), vec![], ng)
    }

    /// x·ln(x) elementwise, with 0·ln(0) = 0. Used by the KL-to-uniform term.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .map(|x| if *x < 1e-30 { 0.0 } else { x * x.ln() })
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a);
        self.push(Op::XLogX(a), Self::raw(shape, v), vec![], ng)
    }

    /// Row-wise layer normalization of [r×c] with per-column gamma/beta.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(CoreError::ShapeMismatch("layernorm gamma/beta".into()));
        }
        const EPS: f32 = 1e-5;
        let mut out = vec![0.0; r * c];
        // aux: xhat (r*c) followed by inv_std (r)
        let mut aux = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &self.value(x).data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + EPS).sqrt();
            aux[r * c + i] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                aux[i * c + j] = xh;
                out[i * c + j] = self.value(gamma).data[j] * xh + self.value(beta).data[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            Self::raw(vec![r, c], out),
            aux,
            ng,
        ))
    }

    /// Row gather: out[i] = table[idx[i]].
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = (self.value(table).rows(), self.value(table).cols());
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(CoreError::InvalidArgument(format!(
                "embedding index {bad} out of range {n}"
            )));
        }
        let mut v = vec![0.0; idx.len() * d];
        for (i, ix) in idx.iter().enumerate() {
            v[i * d..(i + 1) * d].copy_from_slice(&self.value(table).data[ix * d..(ix + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Op::Embedding { table, idx: idx.to_vec() },
            Self::raw(vec![idx.len(), d], v),
            vec![],
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(CoreError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.value(a).shape,
                shape
            )));
        }
        let v = self.value(a).data.clone();
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), Self::raw(shape.to_vec(), v), vec![], ng))
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = self.value(a).data[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Op::Transpose2d(a), Self::raw(vec![c, r], v), vec![], ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut v = self.value(a).data.clone();
        for i in 0..r {
            k::softmax_inplace(&mut v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), Self::raw(vec![r, c], v), vec![], ng)
    }

    /// Softmax of square [T×T] scores where row i attends to columns 0..=i.
    /// Masked entries are exactly zero in the output.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if r != c {
            return Err(CoreError::ShapeMismatch("causal_softmax wants square".into()));
        }
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(a).data[i * c..i * c + i + 1];
            let out = &mut v[i * c..i * c + i + 1];
            out.copy_from_slice(row);
            k::softmax_inplace(out);
        }
        let ng = self.ng(a);
        Ok(self.push(Op::CausalSoftmax(a), Self::raw(vec![r, c], v), vec![], ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if start + len > r {
            return Err(CoreError::InvalidArgument(format!(
                "slice_rows {start}+{len} > {r}"
            )));
        }
        let v = self.value(a).data[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::SliceRows { x: a, start }, Self::raw(vec![len, c], v), vec![], ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if start + len > c {
            return Err(CoreError::InvalidArgument(format!(
                "slice_cols {start}+{len} > {c}"
            )));
        }
        let mut v = vec![0.0; r * len];
        for i in 0..r {
            v[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).data[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Op::SliceCols { x: a, start }, Self::raw(vec![r, len], v), vec![], ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(CoreError::ShapeMismatch("concat_cols row mismatch".into()));
            }
            total += self.value(*p).cols();
        }
        let mut v = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let c = self.value(*p).cols();
            for i in 0..r {
                v[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.value(*p).data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Self::raw(vec![r, total], v), vec![], ng))
    }

    /// Forward identity, zero gradient backward.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Op::StopGrad(a), Self::raw(v.shape, v.data), vec![], false)
    }

    /// Forward takes `value_from`'s value verbatim; backward routes the whole
    /// gradient to `grad_to`.
    pub fn straight_through(&mut self, grad_to: Var, value_from: Var) -> Result<Var> {
        if self.value(grad_to).shape != self.value(value_from).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "straight_through {:?} vs {:?}",
                self.value(grad_to).shape,
                self.value(value_from).shape
            )));
        }
        let v = self.value(value_from).clone();
        let ng = self.ng(grad_to);
        Ok(self.push(Op::StraightThrough { grad_to }, Self::raw(v.shape, v.data), vec![], ng))
    }

    /// Mean over rows of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != r {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= c) {
            return Err(CoreError::InvalidArgument(format!(
                "cross_entropy target {bad} out of range {c}"
            )));
        }
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0f64;
        for i in 0..r {
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = k::logsumexp(row);
            loss += (lse - row[targets[i]]) as f64;
            // stash softmax for backward
            k::softmax_inplace(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar((loss / r as f64) as f32),
            probs,
            ng,
        ))
    }

    /// d2[i][j] = ||a_i - b_j||^2 for a[n×d], b[m×d].
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let (m, db) = (self.value(b).rows(), self.value(b).cols());
        if d != db {
            return Err(CoreError::ShapeMismatch("pairwise_sqdist dims".into()));
        }
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut v = vec![0.0; n * m];
        k::gemm_nt(&mut v, av, bv, n, d, m);
        for i in 0..n {
            let na = k::dot(&av[i * d..(i + 1) * d], &av[i * d..(i + 1) * d]);
            for j in 0..m {
                let nb = k::dot(&bv[j * d..(j + 1) * d], &bv[j * d..(j + 1) * d]);
                v[i * m + j] = na + nb - 2.0 * v[i * m + j];
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::PairwiseSqDist(a, b), Self::raw(vec![n, m], v), vec![], ng))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::InvalidArgument(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut g: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if g[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = g[id].take().unwrap();
            self.backprop_node(id, &grad, &mut g);
            g[id] = Some(grad);
        }
        Ok(Grads { g })
    }

    fn accum(&self, g: &mut Vec<Option<Vec<f32>>>, v: Var, contribution: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = g[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        contribution(buf);
    }

    fn backprop_node(&self, id: usize, gout: &[f32], g: &mut Vec<Option<Vec<f32>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::StraightThrough { grad_to } => {
                self.accum(g, *grad_to, |buf| k::axpy(1.0, gout, buf));
            }
            Op::Add(a, b) => {
                self.accum(g, *a, |buf| k::axpy(1.0, gout, buf));
                self.accum(g, *b, |buf| k::axpy(1.0, gout, buf));
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, |buf| k::axpy(1.0, gout, buf));
                self.accum(g, *b, |buf| k::axpy(-1.0, gout, buf));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accum(g, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * bv[i];
                    }
                });
                self.accum(g, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(g, *a, |buf| k::axpy(c, gout, buf));
            }
            Op::AddScalar(a, _) => {
                self.accum(g, *a, |buf| k::axpy(1.0, gout, buf));
            }
            Op::AddRow(a, bias) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(g, *a, |buf| k::axpy(1.0, gout, buf));
                self.accum(g, *bias, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += gout[i * c + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gout[0];
                self.accum(g, *a, |buf| {
                    for v in buf.iter_mut() {
                        *v += s;
                    }
                });
            }
            Op::MeanCols(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(g, *a, |buf| {
                    for i in 0..r {
                        let s = gout[i] / c as f32;
                        for j in 0..c {
                            buf[i * c + j] += s;
                        }
                    }
                });
            }
            Op::MaxCols(a) => {
                let c = self.value(*a).cols();
                let r = self.value(*a).rows();
                let aux = &node.aux;
                self.accum(g, *a, |buf| {
                    for i in 0..r {
                        buf[i * c + aux[i] as usize] += gout[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, kk) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                // dA = gout · Bᵀ ; dB = Aᵀ · gout
                self.accum(g, *a, |buf| k::gemm_nt(buf, gout, bv, m, n, kk));
                self.accum(g, *b, |buf| k::gemm_tn(buf, av, gout, m, kk, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, kk) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                // out = A·Bᵀ: dA = gout·B ; dB = goutᵀ·A
                self.accum(g, *a, |buf| k::gemm_nn(buf, gout, bv, m, n, kk));
                self.accum(g, *b, |buf| k::gemm_tn(buf, gout, av, m, n, kk));
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (cin, lin) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                let ws = &self.value(*w).shape;
                let (cout, ksz) = (ws[0], ws[2]);
                let lout = self.nodes[id].value.shape[1];
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                self.accum(g, *x, |buf| {
                    k::conv1d_bwd_x(buf, gout, wv, cin, lin, cout, ksz, *stride, *pad, lout)
                });
                // weight and bias grads share one kernel; split buffers
                if self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad {
                    let mut dw = vec![0.0; cout * cin * ksz];
                    let mut db = vec![0.0; cout];
                    k::conv1d_bwd_w(&mut dw, &mut db, gout, xv, cin, lin, cout, ksz, *stride, *pad, lout);
                    self.accum(g, *w, |buf| k::axpy(1.0, &dw, buf));
                    self.accum(g, *b, |buf| k::axpy(1.0, &db, buf));
                }
            }
            Op::ConvT1d { x, w, b, stride, pad } => {
                let (cin, lin) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                let ws = &self.value(*w).shape;
                let (cout, ksz) = (ws[1], ws[2]);
                let lout = self.nodes[id].value.shape[1];
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                self.accum(g, *x, |buf| {
                    k::convt1d_bwd_x(buf, gout, wv, cin, lin, cout, ksz, *stride, *pad, lout)
                });
                if self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad {
                    let mut dw = vec![0.0; cin * cout * ksz];
                    let mut db = vec![0.0; cout];
                    k::convt1d_bwd_w(&mut dw, &mut db, gout, xv, cin, lin, cout, ksz, *stride, *pad, lout);
                    self.accum(g, *w, |buf| k::axpy(1.0, &dw, buf));
                    self.accum(g, *b, |buf| k::axpy(1.0, &db, buf));
                }
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                self.accum(g, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += gout[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).data;
                let tanhs = &node.aux;
                self.accum(g, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * k::gelu_grad_from_tanh(av[i], tanhs[i]);
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.value(*a).data;
                self.accum(g, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] / av[i];
                    }
                });
            }
            Op::XLogX(a) => {
                let av = &self.value(*a).data;
                self.accum(g, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] >= 1e-30 {
                            buf[i] += gout[i] * (av[i].ln() + 1.0);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let aux = &node.aux;
                let gv = &self.value(*gamma).data;
                self.accum(g, *gamma, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += gout[i * c + j] * aux[i * c + j];
                        }
                    }
                });
                self.accum(g, *beta, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += gout[i * c + j];
                        }
                    }
                });
                self.accum(g, *x, |buf| {
                    for i in 0..r {
                        let inv = aux[r * c + i];
                        let xh = &aux[i * c..(i + 1) * c];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..c {
                            let dxh = gout[i * c + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f32;
                        m2 /= c as f32;
                        for j in 0..c {
                            let dxh = gout[i * c + j] * gv[j];
                            buf[i * c + j] += inv * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, idx } => {
                let d = self.value(*table).cols();
                self.accum(g, *table, |buf| {
                    for (i, ix) in idx.iter().enumerate() {
                        k::axpy(1.0, &gout[i * d..(i + 1) * d], &mut buf[ix * d..(ix + 1) * d]);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(g, *a, |buf| k::axpy(1.0, gout, buf));
            }
            Op::Transpose2d(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(g, *a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let p = &node.value.data;
                self.accum(g, *a, |buf| {
                    for i in 0..r {
                        let prow = &p[i * c..(i + 1) * c];
                        let grow = &gout[i * c..(i + 1) * c];
                        let s = k::dot(prow, grow);
                        for j in 0..c {
                            buf[i * c + j] += prow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::CausalSoftmax(a) => {
                let c = node.value.cols();
                let p = &node.value.data;
                self.accum(g, *a, |buf| {
                    for i in 0..c {
                        let prow = &p[i * c..i * c + i + 1];
                        let grow = &gout[i * c..i * c + i + 1];
                        let s = k::dot(prow, grow);
                        for j in 0..=i {
                            buf[i * c + j] += prow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.rows();
                self.accum(g, *x, |buf| {
                    k::axpy(1.0, gout, &mut buf[start * c..(start + len) * c]);
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let (r, len) = (node.value.rows(), node.value.cols());
                self.accum(g, *x, |buf| {
                    for i in 0..r {
                        k::axpy(
                            1.0,
                            &gout[i * len..(i + 1) * len],
                            &mut buf[i * c + start..i * c + start + len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.accum(g, *p, |buf| {
                        for i in 0..r {
                            k::axpy(
                                1.0,
                                &gout[i * total + off..i * total + off + c],
                                &mut buf[i * c..(i + 1) * c],
                            );
                        }
                    });
                    off += c;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (r, c) = (self.value(*logits).rows(), self.value(*logits).cols());
                let probs = &node.aux;
                let s = gout[0] / r as f32;
                self.accum(g, *logits, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += s * probs[i * c + j];
                        }
                        buf[i * c + targets[i]] -= s;
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).rows();
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                // dA = 2*(a .* rowsum(g) - g·B), dB = 2*(b .* colsum(g) - gᵀ·A)
                self.accum(g, *a, |buf| {
                    let mut gb = vec![0.0; n * d];
                    k::gemm_nn(&mut gb, gout, bv, n, m, d);
                    for i in 0..n {
                        let rs: f32 = gout[i * m..(i + 1) * m].iter().sum();
                        for j in 0..d {
                            buf[i * d + j] += 2.0 * (av[i * d + j] * rs - gb[i * d + j]);
                        }
                    }
                });
                self.accum(g, *b, |buf| {
                    let mut ga = vec![0.0; m * d];
                    k::gemm_tn(&mut ga, gout, av, n, m, d);
                    for j in 0..m {
                        let mut cs = 0.0;
                        for i in 0..n {
                            cs += gout[i * m + j];
                        }
                        for t in 0..d {
                            buf[j * d + t] += 2.0 * (bv[j * d + t] * cs - ga[j * d + t]);
                        }
                    }
                });
            }
        }
    }
}
