//! Reverse-mode differentiation over a single-use tape.
//!
//! Every op appends one node whose inputs were recorded earlier, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep. Any value can be tapped: a tap is an identity node that always
//! receives a gradient, and after `backward` the tap's forward value and
//! gradient are copied out as a [`TapPoint`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: ValueId,
        b: ValueId,
        trans_b: bool,
    },
    Add {
        a: ValueId,
        b: ValueId,
        bias: bool,
    },
    Scale {
        a: ValueId,
        factor: T,
    },
    Relu {
        a: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: ValueId,
        target: ValueId,
        records: usize,
    },
    Sum {
        a: ValueId,
    },
    Tap {
        a: ValueId,
    },
    GatherRows {
        a: ValueId,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<ValueId>,
        rows: Vec<Vec<usize>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse { .. } => "mse",
            Op::Sum { .. } => "sum",
            Op::Tap { .. } => "tap",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct TapEntry {
    layer: usize,
    input: Option<ValueId>,
    output: ValueId,
}

/// Values captured at a tapped layer: hidden input, (fine-tuned) output and
/// the gradient of the loss with respect to that output.
#[derive(Debug, Clone, PartialEq)]
pub struct TapPoint<T> {
    pub layer: usize,
    pub input: Option<Tensor<T>>,
    pub output: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    taps: Vec<TapPoint<T>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, id: ValueId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()).expect("non-empty shape"))
    }

    pub fn taps(&self) -> &[TapPoint<T>] {
        &self.taps
    }

    pub fn into_taps(self) -> Vec<TapPoint<T>> {
        self.taps
    }

    /// Number of nodes the sweep processed (each at most once).
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Recording of one forward pass. Single use: one `backward` per tape.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    taps: Vec<TapEntry>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            taps: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: ValueId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(Error::UnknownValue(id.0))
    }

    pub fn value(&self, id: ValueId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<ValueId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Record a leaf; its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> ValueId {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: rg,
        });
        ValueId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> ValueId {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> ValueId {
        self.leaf(t.with_requires_grad(true))
    }

    fn matmul_impl(&mut self, a: ValueId, b: ValueId, trans_b: bool) -> Result<ValueId> {
        let av = self.value(a)?;
        let bv = self.value(b)?;
        let (n, k) = av.dims2("matmul")?;
        let (br, bc) = bv.dims2("matmul")?;
        let (k2, p) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let b_strides = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![T::zero(); n * p];
        T::gemm(
            n,
            k,
            p,
            av.data(),
            (k as isize, 1),
            bv.data(),
            b_strides,
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        let rg = self.needs_grad(a) || self.needs_grad(b);
        let value = Tensor::matrix(n, p, out)?;
        self.push(Op::MatMul { a, b, trans_b }, value, rg)
    }

    /// `a (n×k) · b (k×p)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_impl(a, b, false)
    }

    /// `a (n×k) · bᵀ` for `b (p×k)`, the layout used for weight matrices.
    pub fn matmul_t(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_impl(a, b, true)
    }

    /// Exact-shape sum, or `a (n×k) + b (k)` / `b (1×k)` with `b` broadcast over rows.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let av = self.value(a)?;
        let bv = self.value(b)?;
        let (value, bias) = if av.shape() == bv.shape() {
            (av.add(bv)?, false)
        } else {
            let (n, k) = av.dims2("add")?;
            let is_row = matches!(bv.shape(), [len] if *len == k)
                || matches!(bv.shape(), [1, len] if *len == k);
            if !is_row {
                return Err(Error::shape(
                    "add",
                    format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
                ));
            }
            let bd = bv.data();
            let mut out = av.to_vec();
            for r in 0..n {
                for (o, &x) in out[r * k..(r + 1) * k].iter_mut().zip(bd) {
                    *o += x;
                }
            }
            (Tensor::matrix(n, k, out)?, true)
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Add { a, b, bias }, value, rg)
    }

    pub fn scale(&mut self, a: ValueId, factor: T) -> Result<ValueId> {
        let value = self.value(a)?.scale(factor);
        let rg = self.needs_grad(a);
        self.push(Op::Scale { a, factor }, value, rg)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let value = self
            .value(a)?
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs_grad(a);
        self.push(Op::Relu { a }, value, rg)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let total = self.value(a)?.data().iter().copied().sum::<T>();
        let rg = self.needs_grad(a);
        self.push(Op::Sum { a }, Tensor::scalar(total), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let lv = self.value(logits)?;
        let (n, c) = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= z;
            }
            total += z.ln() + max - row[label];
        }
        let loss = total / T::of(n as f64);
        let rg = self.needs_grad(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// `Σ‖pred − target‖² / (2·records)`, where records is the leading extent
    /// of a matrix (1 for vectors).
    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        let pv = self.value(pred)?;
        let tv = self.value(target)?;
        if pv.shape() != tv.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", pv.shape(), tv.shape()),
            ));
        }
        let records = if pv.ndim() >= 2 { pv.shape()[0] } else { 1 };
        let sq: T = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = sq / T::of(2.0 * records as f64);
        let rg = self.needs_grad(pred) || self.needs_grad(target);
        self.push(
            Op::Mse {
                pred,
                target,
                records,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Rows of `a` at `rows`, in order.
    pub fn gather_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId> {
        let value = self.value(a)?.select_rows(rows)?;
        let rg = self.needs_grad(a);
        self.push(
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Assemble an `n×k` matrix whose row `rows[i][j]` is row `j` of `parts[i]`.
    /// Rows not covered by any part are zero; each row may be covered once.
    pub fn scatter_rows(
        &mut self,
        parts: &[ValueId],
        rows: &[Vec<usize>],
        n: usize,
    ) -> Result<ValueId> {
        if parts.len() != rows.len() || parts.is_empty() {
            return Err(Error::shape("scatter_rows", "parts/rows mismatch"));
        }
        let (_, k) = self.value(parts[0])?.dims2("scatter_rows")?;
        let mut out = vec![T::zero(); n * k];
        let mut seen = vec![false; n];
        for (&p, idx) in parts.iter().zip(rows) {
            let pv = self.value(p)?;
            let (pr, pk) = pv.dims2("scatter_rows")?;
            if pk != k || pr != idx.len() {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("part {pr}×{pk} for {} rows of width {k}", idx.len()),
                ));
            }
            for (j, &r) in idx.iter().enumerate() {
                if r >= n || seen[r] {
                    return Err(Error::shape("scatter_rows", format!("row {r} invalid or repeated")));
                }
                seen[r] = true;
                out[r * k..(r + 1) * k].copy_from_slice(pv.row(j));
            }
        }
        let rg = parts.iter().any(|&p| self.needs_grad(p));
        let value = Tensor::matrix(n, k, out)?;
        self.push(
            Op::ScatterRows {
                parts: parts.to_vec(),
                rows: rows.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Insert an identity node after `value` and register it as a tap for `layer`.
    /// The returned id must be used downstream in place of `value`.
    pub fn tap(&mut self, value: ValueId, layer: usize) -> Result<ValueId> {
        self.register_tap(None, value, layer)
    }

    /// Like [`Tape::tap`], also capturing the layer's hidden input.
    pub fn tap_layer(&mut self, input: ValueId, output: ValueId, layer: usize) -> Result<ValueId> {
        self.node(input)?;
        self.register_tap(Some(input), output, layer)
    }

    fn register_tap(&mut self, input: Option<ValueId>, value: ValueId, layer: usize) -> Result<ValueId> {
        let v = self.value(value)?.clone();
        let id = self.push(Op::Tap { a: value }, v, true)?;
        self.taps.push(TapEntry {
            layer,
            input,
            output: id,
        });
        Ok(id)
    }

    /// Reverse sweep from `loss` (seed gradient 1).
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut acc: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        acc[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let Some(g) = acc[idx].take() else { continue };
            visited += 1;
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut acc)?;
            }
            acc[idx] = Some(g);
        }

        let grads: Vec<Option<Tensor<T>>> = acc
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();

        let taps = self
            .taps
            .iter()
            .map(|t| {
                let output = self.nodes[t.output.0].value.clone();
                let grad = grads[t.output.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(output.shape()).expect("shape"));
                TapPoint {
                    layer: t.layer,
                    input: t.input.map(|i| self.nodes[i.0].value.clone()),
                    output,
                    grad,
                }
            })
            .collect();

        Ok(Gradients {
            grads,
            taps,
            visited,
        })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &[T],
        acc: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (n, k) = av.dims2("matmul")?;
                let (br, bc) = bv.dims2("matmul")?;
                let p = out.shape()[1];
                if self.needs_grad(*a) {
                    // ga (n×k) = g (n×p) · op(b)ᵀ
                    let b_strides = if *trans_b { (bc as isize, 1) } else { (1, bc as isize) };
                    let dst = slot(acc, *a, n * k);
                    T::gemm(n, p, k, g, (p as isize, 1), bv.data(), b_strides, T::one(), dst, (k as isize, 1));
                }
                if self.needs_grad(*b) {
                    let dst = slot(acc, *b, br * bc);
                    if *trans_b {
                        // gb (p×k) = gᵀ (p×n) · a (n×k)
                        T::gemm(p, n, k, g, (1, p as isize), av.data(), (k as isize, 1), T::one(), dst, (k as isize, 1));
                    } else {
                        // gb (k×p) = aᵀ (k×n) · g (n×p)
                        T::gemm(k, n, p, av.data(), (1, k as isize), g, (p as isize, 1), T::one(), dst, (p as isize, 1));
                    }
                }
            }
            Op::Add { a, b, bias } => {
                if self.needs_grad(*a) {
                    accumulate(slot(acc, *a, g.len()), g);
                }
                if self.needs_grad(*b) {
                    if *bias {
                        let k = self.nodes[b.0].value.len();
                        let dst = slot(acc, *b, k);
                        for row in g.chunks(k) {
                            accumulate(dst, row);
                        }
                    } else {
                        accumulate(slot(acc, *b, g.len()), g);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.needs_grad(*a) {
                    let dst = slot(acc, *a, g.len());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x * *factor;
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs_grad(*a) {
                    let input = self.nodes[a.0].value.data();
                    let dst = slot(acc, *a, g.len());
                    for ((d, &x), &v) in dst.iter_mut().zip(g).zip(input) {
                        if v > T::zero() {
                            *d += x;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs_grad(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let s = g[0] / T::of(n as f64);
                    let dst = slot(acc, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dst[r * c + j] += (probs[r * c + j] - onehot) * s;
                        }
                    }
                }
            }
            Op::Mse {
                pred,
                target,
                records,
            } => {
                let pv = self.nodes[pred.0].value.data();
                let tv = self.nodes[target.0].value.data();
                let s = g[0] / T::of(*records as f64);
                if self.needs_grad(*pred) {
                    let dst = slot(acc, *pred, pv.len());
                    for ((d, &p), &t) in dst.iter_mut().zip(pv).zip(tv) {
                        *d += (p - t) * s;
                    }
                }
                if self.needs_grad(*target) {
                    let dst = slot(acc, *target, pv.len());
                    for ((d, &p), &t) in dst.iter_mut().zip(pv).zip(tv) {
                        *d -= (p - t) * s;
                    }
                }
            }
            Op::Sum { a } => {
                if self.needs_grad(*a) {
                    let dst = slot(acc, *a, self.nodes[a.0].value.len());
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Tap { a } => {
                if self.needs_grad(*a) {
                    accumulate(slot(acc, *a, g.len()), g);
                }
            }
            Op::GatherRows { a, rows } => {
                if self.needs_grad(*a) {
                    let av = &self.nodes[a.0].value;
                    let k = av.shape()[1];
                    let dst = slot(acc, *a, av.len());
                    for (j, &r) in rows.iter().enumerate() {
                        accumulate(&mut dst[r * k..(r + 1) * k], &g[j * k..(j + 1) * k]);
                    }
                }
            }
            Op::ScatterRows { parts, rows } => {
                let k = out.shape()[1];
                for (&p, idx) in parts.iter().zip(rows) {
                    if !self.needs_grad(p) {
                        continue;
                    }
                    let dst = slot(acc, p, idx.len() * k);
                    for (j, &r) in idx.iter().enumerate() {
                        accumulate(&mut dst[j * k..(j + 1) * k], &g[r * k..(r + 1) * k]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Scalar>(acc: &mut [Option<Vec<T>>], id: ValueId, len: usize) -> &mut [T] {
    acc[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central differences of `f` around `x`, step `h`.
    fn numeric_grad(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                let mut minus = x.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let p = Tensor::new(x.shape().to_vec(), plus).unwrap();
                let m = Tensor::new(x.shape().to_vec(), minus).unwrap();
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (a, n) in analytic.iter().zip(numeric) {
            assert!(((a - n) / scale).abs() <= tol, "analytic {a} vs numeric {n}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2).unwrap());
        let m = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(mat(&[vec![1.0, 2.0]]));
        let b = tape.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[11.0]);

        let bad = tape.matmul(a, a);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut r).unwrap();
        let b = Tensor::<f64>::uniform(&[3, 5], 1.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let ai = tape.param(a.clone());
        let bi = tape.param(b.clone());
        let c = tape.matmul(ai, bi).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let num_a = numeric_grad(&a, 1e-5, |x| x.matmul(&b).unwrap().data().iter().sum());
        let num_b = numeric_grad(&b, 1e-5, |x| a.matmul(x).unwrap().data().iter().sum());
        assert_close(g.get(ai).unwrap().data(), &num_a, 1e-7);
        assert_close(g.get(bi).unwrap().data(), &num_b, 1e-7);
    }

    #[test]
    fn matmul_t_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut r).unwrap();
        let w = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut r).unwrap();
        let y = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut r).unwrap();
        // ½Σ(x wᵀ − y)² / rows
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let p = x.matmul(&w.transpose().unwrap()).unwrap();
            p.sub(&y).unwrap().data().iter().map(|d| d * d).sum::<f64>() / 8.0
        };
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let wi = tape.param(w.clone());
        let p = tape.matmul_t(xi, wi).unwrap();
        let yi = tape.constant(y.clone());
        let loss = tape.mse(p, yi).unwrap();
        assert!((tape.value(loss).unwrap().item() - f(&x, &w)).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let num_x = numeric_grad(&x, 1e-5, |v| f(v, &w));
        let num_w = numeric_grad(&w, 1e-5, |v| f(&x, v));
        assert_close(g.get(xi).unwrap().data(), &num_x, 1e-7);
        assert_close(g.get(wi).unwrap().data(), &num_w, 1e-7);
    }

    #[test]
    fn add_identity_and_bias_broadcast() {
        let mut tape = Tape::new();
        let a = tape.param(mat(&[vec![1.0, -2.0], vec![3.0, 4.0]]));
        let z = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), tape.value(a).unwrap().data());

        let b = tape.param(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let biased = tape.add(a, b).unwrap();
        assert_eq!(tape.value(biased).unwrap().data(), &[11.0, 18.0, 13.0, 24.0]);
        let total = tape.sum(biased).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(tape.add(a, b).is_err());
    }

    fn residual_grads(alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng();
        let h = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let dh = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let y = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let hi = tape.param(h);
        let dhi = tape.param(dh);
        let scaled = tape.scale(dhi, alpha).unwrap();
        let sum = tape.add(hi, scaled).unwrap();
        let hat = tape.tap(sum, 0).unwrap();
        let yi = tape.constant(y);
        let l = tape.mse(hat, yi).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(dhi).unwrap().to_vec(), g.taps()[0].grad.to_vec())
    }

    #[test]
    fn residual_add_passes_gradient_scaled_by_alpha() {
        let (gdh, ghat) = residual_grads(1.0);
        assert_eq!(gdh, ghat);
        let (gdh, ghat) = residual_grads(0.5);
        let expected: Vec<f64> = ghat.iter().map(|v| 0.5 * v).collect();
        assert_eq!(gdh, expected);
    }

    #[test]
    fn relu_forward_and_tie_rule() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let mut r = rng();
        // keep inputs away from the kink
        let x = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r)
            .unwrap()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let y = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let f = |x: &Tensor<f64>| -> f64 {
            let rl = x.map(|v| v.max(0.0));
            rl.sub(&y).unwrap().data().iter().map(|d| d * d).sum::<f64>() / 6.0
        };
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let rl = tape.relu(xi).unwrap();
        let yi = tape.constant(y.clone());
        let loss = tape.mse(rl, yi).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_close(g.get(xi).unwrap().data(), &numeric_grad(&x, 1e-5, f), 1e-7);
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 10]).unwrap());
        let l = tape.softmax_cross_entropy(logits, &[3, 7]).unwrap();
        assert!((tape.value(l).unwrap().item() - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.302585).abs() < 1e-6);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let mut tape = Tape::new();
            let lg = tape.constant(Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap());
            let l = tape.softmax_cross_entropy(lg, &[0]).unwrap();
            let v = tape.value(l).unwrap().item();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-4);

        let mut tape = Tape::new();
        let lg = tape.constant(Tensor::<f64>::zeros(&[1, 3]).unwrap());
        assert!(matches!(
            tape.softmax_cross_entropy(lg, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut r).unwrap();
        let labels = [0usize, 4, 2, 2];
        let f = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let l = tape.softmax_cross_entropy(xi, &labels).unwrap();
            tape.value(l).unwrap().item()
        };
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let l = tape.softmax_cross_entropy(xi, &labels).unwrap();
        let g = tape.backward(l).unwrap();
        assert_close(g.get(xi).unwrap().data(), &numeric_grad(&x, 1e-5, f), 1e-7);
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(mat(&[vec![1.0, 1.0]]));
        let t = tape.constant(mat(&[vec![0.0, 0.0]]));
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 1.0);
        let same = tape.mse(p, p).unwrap();
        assert_eq!(tape.value(same).unwrap().item(), 0.0);
        let bad = tape.constant(Tensor::zeros(&[2, 1]).unwrap());
        assert!(tape.mse(p, bad).is_err());

        let mut r = rng();
        let x = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let y = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r).unwrap();
        let f = |x: &Tensor<f64>| {
            x.sub(&y).unwrap().data().iter().map(|d| d * d).sum::<f64>() / 6.0
        };
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let yi = tape.constant(y.clone());
        let l = tape.mse(xi, yi).unwrap();
        let g = tape.backward(l).unwrap();
        assert_close(g.get(xi).unwrap().data(), &numeric_grad(&x, 1e-5, f), 1e-8);
    }

    #[test]
    fn backward_sum_gives_ones_and_is_single_use() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[2, 3, 2]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 12]);
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_ids() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[2, 2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { .. })));
        assert!(matches!(
            tape.backward(ValueId(99)),
            Err(Error::UnknownValue(99))
        ));
        assert!(tape.tap(ValueId(42), 0).is_err());
    }

    #[test]
    fn two_layer_chain_matches_hand_derivation() {
        // y = sum(W2 · (W1 · x)), x = [1, 2]ᵀ as a row, so dy/dW1 = (W2ᵀ 1) xᵀ
        let x = mat(&[vec![1.0, 2.0]]);
        let w1 = mat(&[vec![1.0, 0.5], vec![-1.0, 2.0]]);
        let w2 = mat(&[vec![3.0, 1.0], vec![0.0, -2.0]]);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let w1i = tape.param(w1);
        let w2i = tape.param(w2);
        let h = tape.matmul_t(xi, w1i).unwrap();
        let y = tape.matmul_t(h, w2i).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // column sums of W2: [3, -1]; outer product with x = [1, 2]
        assert_eq!(g.get(w1i).unwrap().data(), &[3.0, 6.0, -1.0, -2.0]);
        // h = [2, 3]; dy/dW2 = 1 · hᵀ for each row
        assert_eq!(g.get(w2i).unwrap().data(), &[2.0, 3.0, 2.0, 3.0]);
        assert!(g.get(xi).is_none());
    }

    fn chain(tapped: bool) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let mut r = rng();
        let x = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut r).unwrap();
        let w = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut r).unwrap();
        let v = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let wi = tape.param(w);
        let vi = tape.param(v);
        let mut h = tape.matmul_t(xi, wi).unwrap();
        if tapped {
            h = tape.tap_layer(xi, h, 0).unwrap();
        }
        let a = tape.relu(h).unwrap();
        let o = tape.matmul_t(a, vi).unwrap();
        let l = tape.softmax_cross_entropy(o, &[0, 1, 1, 0, 1]).unwrap();
        let loss = tape.value(l).unwrap().item();
        let g = tape.backward(l).unwrap();
        let tap_grad = g.taps().first().map(|t| t.grad.to_vec());
        let hg = g.get(h).map(|t| t.to_vec());
        let mut all = g.get(wi).unwrap().to_vec();
        all.extend(g.get(vi).unwrap().data());
        (loss, all, tap_grad.or(hg))
    }

    #[test]
    fn tap_does_not_change_values_or_gradients() {
        let (l0, g0, h0) = chain(false);
        let (l1, g1, h1) = chain(true);
        assert_eq!(l0.to_bits(), l1.to_bits());
        assert_eq!(g0, g1);
        assert_eq!(h0, h1);
    }

    #[test]
    fn tap_shapes_and_loss_tap() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[3, 2]).unwrap());
        let t = tape.tap_layer(x, x, 4).unwrap();
        let s = tape.sum(t).unwrap();
        let ls = tape.tap(s, 9).unwrap();
        let g = tape.backward(ls).unwrap();
        let taps = g.taps();
        assert_eq!(taps[0].layer, 4);
        assert_eq!(taps[0].grad.shape(), taps[0].output.shape());
        assert_eq!(taps[0].input.as_ref().unwrap().shape(), &[3, 2]);
        assert_eq!(taps[1].grad.data(), &[1.0]);
    }

    #[test]
    fn tap_receives_gradient_even_under_constants() {
        // nothing upstream requires grad, but the tap still sees ∇
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 2]).unwrap());
        let t = tape.tap(x, 0).unwrap();
        let s = tape.sum(t).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.taps()[0].grad.data(), &[1.0, 1.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn gather_and_scatter_round_trip_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(mat(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let a = tape.gather_rows(x, &[2, 0]).unwrap();
        let b = tape.gather_rows(x, &[1]).unwrap();
        let s = tape
            .scatter_rows(&[a, b], &[vec![2, 0], vec![1]], 3)
            .unwrap();
        assert_eq!(tape.value(s).unwrap().data(), tape.value(x).unwrap().data());
        let w = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]]));
        let l = tape.mse(s, w).unwrap();
        let g = tape.backward(l).unwrap();
        let expected: Vec<f64> = [0.0, 2.0, 3.0, 2.0, 2.0, 6.0].iter().map(|d| d / 3.0).collect();
        assert_eq!(g.get(x).unwrap().data(), expected.as_slice());

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        assert!(tape.scatter_rows(&[x, x], &[vec![0, 1], vec![1, 0]], 2).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_visits_each_reachable_node_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2, 2]).unwrap());
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visited(), 4);
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 4]);
    }
}
