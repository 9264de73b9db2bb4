//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation records a node; node indices only ever point backwards,
//! so a single reverse sweep over the tape is a valid reverse topological
//! order and visits each node exactly once.

use super::tensor::{matmul, normalize_last, softmax, Scalar, Tensor};
use super::NumericsError;

/// Handle to a tape node. Only valid on the tape that produced it;
/// indexing with a foreign handle panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Normalize {
        x: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        n_valid: usize,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Computation tape. Forward methods record nodes eagerly; [`Tape::backward`]
/// replays them in reverse to accumulate gradients for every leaf.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

/// Leaf gradients produced by [`Tape::backward`]. Leaves that the root does
/// not depend on hold explicit zeros; non-leaf vars hold nothing.
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Registers a trainable parameter; it will receive a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Registers input data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = F::from_f64(factor);
        let value = self.value(a).map(|v| v * c);
        let rg = self.needs(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = F::zero();
        let value = self.value(a).map(|v| if v > zero { v } else { zero });
        let rg = self.needs(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let value = softmax(self.value(a), axis)?;
        let rg = self.needs(a);
        Ok(self.push(Op::Softmax { x: a, axis }, value, rg))
    }

    /// Zero-mean unit-variance normalization of each last-axis lane.
    /// Combine with [`Tape::layer_norm`] for the learned affine form.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let value = normalize_last(self.value(a), eps)?;
        let rg = self.needs(a);
        Ok(self.push(Op::Normalize { x: a, eps }, value, rg))
    }

    /// `gain * normalize(x) + bias` over the last axis.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let xs = self.value(x).shape();
        let d = *xs.last().ok_or(NumericsError::RankTooLow {
            context: "layer_norm",
            rank: 0,
            min: 1,
        })?;
        for v in [gain, bias] {
            if self.value(v).shape() != [d] {
                return Err(NumericsError::ShapeMismatch {
                    context: "layer_norm",
                    lhs: self.value(v).shape().to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let xhat = self.normalize(x, eps)?;
        let scaled = self.mul(xhat, gain)?;
        self.add(scaled, bias)
    }

    /// Gathers rows of `table` (`[vocab, dim]`) at `ids`, shaped
    /// `ids_shape ++ [dim]`. Gradients scatter-add back into the table.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<Var, NumericsError> {
        let tshape = self.value(table).shape().to_vec();
        if tshape.len() != 2 {
            return Err(NumericsError::RankTooLow {
                context: "embedding",
                rank: tshape.len(),
                min: 2,
            });
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        let expected: usize = ids_shape.iter().product();
        if ids.len() != expected {
            return Err(NumericsError::LengthMismatch {
                context: "embedding ids",
                expected,
                got: ids.len(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        {
            let tdata = self.value(table).data();
            for &id in ids {
                if id >= vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        context: "embedding id",
                        index: id,
                        bound: vocab,
                    });
                }
                data.extend_from_slice(&tdata[id * dim..(id + 1) * dim]);
            }
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(Op::Reshape { x: a }, value, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).permute(perm)?;
        let rg = self.needs(a);
        Ok(self.push(
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        let rg = self.needs(a);
        self.push(Op::SumAll(a), value, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean_all());
        let rg = self.needs(a);
        self.push(Op::MeanAll(a), value, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, vocab]`). Rows with `valid[i] == false` contribute
    /// nothing to the loss or the gradient. Errors if no row is valid.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: &[bool],
    ) -> Result<Var, NumericsError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(NumericsError::RankTooLow {
                context: "cross_entropy",
                rank: shape.len(),
                min: 2,
            });
        }
        let (n, vocab) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(NumericsError::LengthMismatch {
                context: "cross_entropy targets",
                expected: n,
                got: targets.len(),
            });
        }
        if valid.len() != n {
            return Err(NumericsError::LengthMismatch {
                context: "cross_entropy mask",
                expected: n,
                got: valid.len(),
            });
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(NumericsError::NoValidTargets);
        }
        let mut total = F::zero();
        {
            let data = self.value(logits).data();
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                if targets[i] >= vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        context: "cross_entropy target",
                        index: targets[i],
                        bound: vocab,
                    });
                }
                let row = &data[i * vocab..(i + 1) * vocab];
                let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let sum_exp = row.iter().map(|&v| (v - mx).exp()).sum::<F>();
                let lse = mx + sum_exp.ln();
                total = total + lse - row[targets[i]];
            }
        }
        let value = Tensor::scalar(total / F::from_f64(n_valid as f64));
        let rg = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                n_valid,
            },
            value,
            rg,
        ))
    }

    /// Accumulates d(root)/d(leaf) for every leaf. `root` must be scalar.
    /// One reverse pass; each node is visited at most once.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>, NumericsError> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(NumericsError::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.0] = Some(Tensor::full(root_node.value.shape(), F::one()));
            for i in (0..=root.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                match &self.nodes[i].op {
                    Op::Leaf => grads[i] = Some(g),
                    Op::Constant => {}
                    Op::Add(a, b) => {
                        self.accumulate(&mut grads, *a, |av| g.reduce_to_shape(av.shape()))?;
                        self.accumulate(&mut grads, *b, |bv| g.reduce_to_shape(bv.shape()))?;
                    }
                    Op::Sub(a, b) => {
                        self.accumulate(&mut grads, *a, |av| g.reduce_to_shape(av.shape()))?;
                        self.accumulate(&mut grads, *b, |bv| {
                            g.map(|v| -v).reduce_to_shape(bv.shape())
                        })?;
                    }
                    Op::Mul(a, b) => {
                        let (av, bv) = (self.value(*a), self.value(*b));
                        self.accumulate(&mut grads, *a, |_| {
                            g.mul(bv)?.reduce_to_shape(av.shape())
                        })?;
                        self.accumulate(&mut grads, *b, |_| {
                            g.mul(av)?.reduce_to_shape(bv.shape())
                        })?;
                    }
                    Op::Scale(a, c) => {
                        let c = *c;
                        self.accumulate(&mut grads, *a, |_| Ok(g.map(|v| v * c)))?;
                    }
                    Op::MatMul(a, b) => {
                        let (av, bv) = (self.value(*a), self.value(*b));
                        self.accumulate(&mut grads, *a, |_| {
                            matmul(&g, &bv.transpose_last2()?)?.reduce_to_shape(av.shape())
                        })?;
                        self.accumulate(&mut grads, *b, |_| {
                            matmul(&av.transpose_last2()?, &g)?.reduce_to_shape(bv.shape())
                        })?;
                    }
                    Op::Relu(a) => {
                        let av = self.value(*a);
                        self.accumulate(&mut grads, *a, |_| {
                            let zero = F::zero();
                            let mask = av.map(|v| if v > zero { F::one() } else { zero });
                            g.mul(&mask)
                        })?;
                    }
                    Op::Softmax { x, axis } => {
                        let y = &self.nodes[i].value;
                        self.accumulate(&mut grads, *x, |_| {
                            let gy = g.mul(y)?;
                            let s = gy.sum_axis(*axis, true)?;
                            y.mul(&g.sub(&s)?)
                        })?;
                    }
                    Op::Normalize { x, eps } => {
                        let y = &self.nodes[i].value;
                        let xv = self.value(*x);
                        self.accumulate(&mut grads, *x, |_| {
                            Ok(normalize_backward(xv, y, &g, *eps))
                        })?;
                    }
                    Op::Embedding { table, ids } => {
                        let tshape = self.value(*table).shape().to_vec();
                        self.accumulate(&mut grads, *table, |_| {
                            let dim = tshape[1];
                            let mut dt = Tensor::zeros(&tshape);
                            {
                                let dst = dt.data_mut();
                                for (row, &id) in ids.iter().enumerate() {
                                    let src = &g.data()[row * dim..(row + 1) * dim];
                                    for (d, &s) in dst[id * dim..(id + 1) * dim]
                                        .iter_mut()
                                        .zip(src)
                                    {
                                        *d = *d + s;
                                    }
                                }
                            }
                            Ok(dt)
                        })?;
                    }
                    Op::Reshape { x } => {
                        let xs = self.value(*x).shape().to_vec();
                        self.accumulate(&mut grads, *x, |_| g.reshape(&xs))?;
                    }
                    Op::Permute { x, perm } => {
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        self.accumulate(&mut grads, *x, |_| g.permute(&inv))?;
                    }
                    Op::SumAll(a) => {
                        let g0 = g.data()[0];
                        self.accumulate(&mut grads, *a, |av| Ok(Tensor::full(av.shape(), g0)))?;
                    }
                    Op::MeanAll(a) => {
                        let av_shape = self.value(*a).shape().to_vec();
                        let n = self.value(*a).numel();
                        let g0 = g.data()[0] / F::from_f64(n as f64);
                        self.accumulate(&mut grads, *a, |_| Ok(Tensor::full(&av_shape, g0)))?;
                    }
                    Op::CrossEntropy {
                        logits,
                        targets,
                        valid,
                        n_valid,
                    } => {
                        let lv = self.value(*logits);
                        self.accumulate(&mut grads, *logits, |_| {
                            Ok(cross_entropy_backward(
                                lv,
                                targets,
                                valid,
                                *n_valid,
                                g.data()[0],
                            ))
                        })?;
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<F>>],
        var: Var,
        delta: impl FnOnce(&Tensor<F>) -> Result<Tensor<F>, NumericsError>,
    ) -> Result<(), NumericsError> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        let d = delta(&self.nodes[var.0].value)?;
        let slot = &mut grads[var.0];
        *slot = Some(match slot.take() {
            Some(cur) => cur.add(&d)?,
            None => d,
        });
        Ok(())
    }
}

/// d(normalize)/dx per lane: `(g - mean(g) - y * mean(g*y)) / sigma` with
/// `sigma = sqrt(pop_var(x) + eps)` and `y` the normalized output.
fn normalize_backward<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>, g: &Tensor<F>, eps: f64) -> Tensor<F> {
    let d = *x.shape().last().expect("normalize input has rank >= 1");
    let dn = F::from_f64(d as f64);
    let epsf = F::from_f64(eps);
    let mut out = vec![F::zero(); x.numel()];
    for (lane, ((xs, ys), gs)) in x
        .data()
        .chunks(d)
        .zip(y.data().chunks(d))
        .zip(g.data().chunks(d))
        .enumerate()
    {
        let mean = xs.iter().copied().sum::<F>() / dn;
        let var = xs
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<F>()
            / dn;
        let sigma = (var + epsf).sqrt();
        let g_mean = gs.iter().copied().sum::<F>() / dn;
        let gy_mean = gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum::<F>() / dn;
        let dst = &mut out[lane * d..(lane + 1) * d];
        for j in 0..d {
            dst[j] = (gs[j] - g_mean - ys[j] * gy_mean) / sigma;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// d(mean NLL)/dlogits: `(softmax(row) - onehot(target)) * g / n_valid` on
/// valid rows, zero elsewhere.
fn cross_entropy_backward<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    valid: &[bool],
    n_valid: usize,
    g: F,
) -> Tensor<F> {
    let vocab = logits.shape()[1];
    let scale = g / F::from_f64(n_valid as f64);
    let mut out = vec![F::zero(); logits.numel()];
    for (i, row) in logits.data().chunks(vocab).enumerate() {
        if !valid[i] {
            continue;
        }
        let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.iter().map(|&v| (v - mx).exp()).sum::<F>();
        let dst = &mut out[i * vocab..(i + 1) * vocab];
        for j in 0..vocab {
            let p = (row[j] - mx).exp() / sum_exp;
            let indicator = if j == targets[i] { F::one() } else { F::zero() };
            dst[j] = (p - indicator) * scale;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape as logits")
}

/// Compares analytic gradients against central finite differences for a
/// scalar-valued graph. `build` is called on a fresh tape for the analytic
/// pass and twice per parameter element for the numeric one, so keep the
/// function small. Returns the maximum relative error
/// `|fd - ad| / max(|fd|, |ad|, 1e-6)` over all elements. The absolute
/// floor sits above central-difference roundoff (one ulp of the loss over
/// 2*epsilon), so parameters whose true gradient is zero do not register
/// the noise as error; a genuinely wrong gradient differs at the scale of
/// the gradient itself and still stands out.
pub fn finite_difference_check<F, B>(
    params: &[Tensor<F>],
    epsilon: f64,
    mut build: B,
) -> Result<f64, NumericsError>
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(NumericsError::NonScalarRoot {
            shape: tape.value(root).shape().to_vec(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<F>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaves always carry gradients"))
        .collect();

    let mut eval = |ps: &[Tensor<F>]| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.value(r).data()[0].as_f64())
    };

    let mut max_rel = 0.0f64;
    let mut work = params.to_vec();
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + F::from_f64(epsilon);
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - F::from_f64(epsilon);
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = analytic[pi].data()[j].as_f64();
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
