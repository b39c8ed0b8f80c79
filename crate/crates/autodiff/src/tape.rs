use crate::array::gemm;
use crate::{Array, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf or any value that does not depend on a differentiable input.
    Constant,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: Broadcast,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    LogSumExp {
        a: Var,
        axis: usize,
    },
    GatherRows {
        sources: Vec<(Var, usize)>,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    Scale {
        a: Var,
        factors: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// `b` is `1 x c`, added to every row.
    Row,
    /// `b` is `r x 1`, added to every column.
    Column,
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Operands are always recorded
/// before their consumers, so a reverse sweep over the node list is a valid
/// backward order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `var`, or zeros of its shape when the output does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Array {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Array::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Structural(format!("axis must be 0 or 1, got {axis}")));
    }
    Ok(())
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

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Constant, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.push_raw(value, op, requires_grad)
    }

    fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::Shape(format!(
                "matmul of {m}x{k} with {}{br}x{bc}",
                if trans_b { "transposed " } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let value = Array::new(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("hadamard of {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let [r, c] = self.shape(a);
        let value = Array::new(r, c, data)?;
        Ok(self.push(value, Op::Hadamard { a, b }, &[a, b]))
    }

    /// `a + b` where `b` has the shape of `a`, or is a `1 x c` row added to
    /// every row, or an `r x 1` column added to every column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let broadcast = match self.shape(b) {
            s if s == [r, c] => Broadcast::None,
            [1, bc] if bc == c => Broadcast::Row,
            [br, 1] if br == r => Broadcast::Column,
            s => {
                return Err(Error::Shape(format!("add of {:?} with {:?}", [r, c], s)));
            }
        };
        let av = self.value(a);
        let bv = self.value(b);
        let value = Array::from_fn(r, c, |i, j| {
            av.get(i, j)
                + match broadcast {
                    Broadcast::None => bv.get(i, j),
                    Broadcast::Row => bv.get(0, j),
                    Broadcast::Column => bv.get(i, 0),
                }
        });
        Ok(self.push(value, Op::Add { a, b, broadcast }, &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp { a }, &[a])
    }

    /// Softmax along `axis`: axis 1 normalizes each row, axis 0 each column.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut out = x.clone();
        for_each_lane(r, c, axis, |lane| {
            let max = lane.iter().map(|&idx| x.data()[idx]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &idx in lane {
                let e = (x.data()[idx] - max).exp();
                out.data_mut()[idx] = e;
                total += e;
            }
            for &idx in lane {
                out.data_mut()[idx] /= total;
            }
        });
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    /// Log-sum-exp along `axis`, producing `1 x c` (axis 0) or `r x 1` (axis 1).
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut out = Vec::new();
        for_each_lane(r, c, axis, |lane| {
            out.push(logsumexp_of(lane.iter().map(|&idx| x.data()[idx])));
        });
        let value = if axis == 0 { Array::new(1, c, out)? } else { Array::new(r, 1, out)? };
        Ok(self.push(value, Op::LogSumExp { a, axis }, &[a]))
    }

    /// Sum along `axis`, producing `1 x c` (axis 0) or `r x 1` (axis 1).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut out = Vec::new();
        for_each_lane(r, c, axis, |lane| {
            out.push(lane.iter().map(|&idx| x.data()[idx]).sum());
        });
        let value = if axis == 0 { Array::new(1, c, out)? } else { Array::new(r, 1, out)? };
        Ok(self.push(value, Op::Sum { a, axis }, &[a]))
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let rows = self.sum(a, 0)?;
        self.sum(rows, 1)
    }

    /// Stacks the listed rows (each `(matrix, row index)`) into a new matrix.
    /// All sources must have the same column count.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let Some(&(first, _)) = sources.first() else {
            return Err(Error::Structural("gather_rows needs at least one row".into()));
        };
        let cols = self.shape(first)[1];
        let mut data = Vec::with_capacity(sources.len() * cols);
        for &(src, row) in sources {
            let [r, c] = self.shape(src);
            if c != cols {
                return Err(Error::Shape(format!("gather_rows mixes {cols} and {c} columns")));
            }
            if row >= r {
                return Err(Error::Shape(format!("row {row} out of range for {r}x{c}")));
            }
            data.extend_from_slice(self.value(src).row_slice(row));
        }
        let value = Array::new(sources.len(), cols, data)?;
        let operands: Vec<Var> = sources.iter().map(|s| s.0).collect();
        Ok(self.push(value, Op::GatherRows { sources: sources.to_vec() }, &operands))
    }

    /// Gathers rows of a single matrix.
    pub fn select_rows(&mut self, src: Var, rows: impl IntoIterator<Item = usize>) -> Result<Var> {
        let sources: Vec<(Var, usize)> = rows.into_iter().map(|r| (src, r)).collect();
        self.gather_rows(&sources)
    }

    /// Multiplies by constant factors: a single factor scales everything,
    /// otherwise one factor per row.
    pub fn scale(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if factors.len() != 1 && factors.len() != r {
            return Err(Error::Shape(format!("{} scale factors for {r}x{c} array", factors.len())));
        }
        let x = self.value(a);
        let value = Array::from_fn(r, c, |i, j| x.get(i, j) * if factors.len() == 1 { factors[0] } else { factors[i] });
        Ok(self.push(value, Op::Scale { a, factors: factors.to_vec() }, &[a]))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != [1, 1] {
            return Err(Error::Structural(format!("backward needs a scalar output, got {out_shape:?}")));
        }
        self.backward_seeded(&[(output, Array::scalar(1.0))])
    }

    /// Reverse sweep with explicit upstream gradients for several outputs,
    /// i.e. the gradient of `Σ_i <seed_i, output_i>`.
    pub fn backward_seeded(&self, seeds: &[(Var, Array)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (var, seed) in seeds {
            if seed.shape() != self.shape(*var) {
                return Err(Error::Shape(format!("seed {:?} for output {:?}", seed.shape(), self.shape(*var))));
            }
            accumulate(&mut grads, *var, seed.clone())?;
            last = last.max(var.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let [m, k] = av.shape();
                let n = g.cols();
                if self.requires_grad(*a) {
                    // dA = G · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), !trans_b, &mut da, false);
                    accumulate(grads, *a, Array::new(m, k, da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n x k: dB = Gᵀ · A
                        gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                        accumulate(grads, *b, Array::new(n, k, db)?)?;
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        accumulate(grads, *b, Array::new(k, n, db)?)?;
                    }
                }
            }
            Op::Hadamard { a, b } => {
                if self.requires_grad(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, d)?;
                }
                if self.requires_grad(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, d)?;
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    let db = match broadcast {
                        Broadcast::None => g.clone(),
                        Broadcast::Row => reduce(g, 0),
                        Broadcast::Column => reduce(g, 1),
                    };
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Relu { a } => {
                let d = zip_map(g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                accumulate(grads, *a, d)?;
            }
            Op::Log { a } => {
                let d = zip_map(g, self.value(*a), |gi, x| gi / x);
                accumulate(grads, *a, d)?;
            }
            Op::Exp { a } => {
                let d = zip_map(g, &node.value, |gi, y| gi * y);
                accumulate(grads, *a, d)?;
            }
            Op::Softmax { a, axis } => {
                // dx = y ⊙ (g − Σ_lane g⊙y)
                let y = &node.value;
                let [r, c] = y.shape();
                let mut d = Array::zeros(r, c);
                for_each_lane(r, c, *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
                    for &i in lane {
                        d.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                accumulate(grads, *a, d)?;
            }
            Op::LogSumExp { a, axis } => {
                let x = self.value(*a);
                let [r, c] = x.shape();
                let mut d = Array::zeros(r, c);
                let mut lane_idx = 0;
                for_each_lane(r, c, *axis, |lane| {
                    let lse = node.value.data()[lane_idx];
                    let gl = g.data()[lane_idx];
                    if lse.is_finite() {
                        for &i in lane {
                            d.data_mut()[i] = gl * (x.data()[i] - lse).exp();
                        }
                    }
                    lane_idx += 1;
                });
                accumulate(grads, *a, d)?;
            }
            Op::Sum { a, axis } => {
                let [r, c] = self.shape(*a);
                let d = Array::from_fn(r, c, |i, j| if *axis == 0 { g.get(0, j) } else { g.get(i, 0) });
                accumulate(grads, *a, d)?;
            }
            Op::GatherRows { sources } => {
                for (out_row, &(src, row)) in sources.iter().enumerate() {
                    if !self.requires_grad(src) {
                        continue;
                    }
                    let [r, c] = self.shape(src);
                    let slot = grads[src.0].get_or_insert_with(|| Array::zeros(r, c));
                    for (dst, &v) in slot.row_slice_mut(row).iter_mut().zip(g.row_slice(out_row)) {
                        *dst += v;
                    }
                }
            }
            Op::Scale { a, factors } => {
                let [r, c] = g.shape();
                let d =
                    Array::from_fn(r, c, |i, j| g.get(i, j) * if factors.len() == 1 { factors[0] } else { factors[i] });
                accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], var: Var, delta: Array) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let [r, c] = a.shape();
    Array::from_fn(r, c, |i, j| f(a.get(i, j), b.get(i, j)))
}

fn reduce(g: &Array, axis: usize) -> Array {
    let [r, c] = g.shape();
    if axis == 0 {
        Array::from_fn(1, c, |_, j| (0..r).map(|i| g.get(i, j)).sum())
    } else {
        Array::from_fn(r, 1, |i, _| g.row_slice(i).iter().sum())
    }
}

/// Calls `f` with the flat indices of each lane: columns for axis 0, rows
/// for axis 1.
fn for_each_lane(r: usize, c: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = Vec::with_capacity(r.max(c));
    if axis == 0 {
        for j in 0..c {
            lane.clear();
            lane.extend((0..r).map(|i| i * c + j));
            f(&lane);
        }
    } else {
        for i in 0..r {
            lane.clear();
            lane.extend((0..c).map(|j| i * c + j));
            f(&lane);
        }
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` for an all `-inf` input.
pub fn logsumexp_of(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array {
        Array::row(v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant(row(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(row(&[3.5; 4]));
        let y = t.softmax(x, 1).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Array::from_fn(2, 3, |i, j| (i * 3 + j) as f64));
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let x = t.param(row(&[0.3, -1.2, 2.0, 0.0]));
        let l = t.logsumexp(x, 1).unwrap();
        let sm = t.softmax(x, 1).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).max_abs_diff(t.value(sm)) < 1e-15);
    }

    #[test]
    fn logsumexp_of_empty_or_neg_inf() {
        assert_eq!(logsumexp_of([f64::NEG_INFINITY; 3].into_iter()), f64::NEG_INFINITY);
        assert_eq!(logsumexp_of(std::iter::empty()), f64::NEG_INFINITY);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(2, 3));
        let b = t.constant(Array::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
        assert!(t.matmul_transposed(a, b).is_ok());
        let c = t.constant(Array::zeros(3, 2));
        assert!(t.hadamard(a, c).is_err());
        assert!(t.add(a, c).is_err());
        assert!(t.softmax(a, 2).is_err());
        assert!(t.gather_rows(&[]).is_err());
        assert!(t.gather_rows(&[(a, 0), (c, 0)]).is_err());
        assert!(t.scale(a, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.param(Array::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::Structural(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut t = Tape::new();
        let x = t.param(row(&[1.0, 2.0]));
        let unused = t.param(Array::filled(3, 2, 7.0));
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), Array::zeros(3, 2));
        assert!(g.get_ref(unused).is_none());
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut t = Tape::new();
        let a = t.constant(row(&[1.0]));
        let b = t.exp(a);
        assert!(!t.requires_grad(b));
    }

    #[test]
    fn shared_operand_accumulates() {
        // f(x) = sum(x ⊙ x) -> 2x
        let mut t = Tape::new();
        let x = t.param(row(&[1.0, -3.0]));
        let y = t.hadamard(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, -6.0]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut t = Tape::new();
        let e = t.param(Array::from_fn(3, 2, |i, j| (i + j) as f64));
        let picked = t.gather_rows(&[(e, 2), (e, 0), (e, 2)]).unwrap();
        assert_eq!(t.value(picked).data(), &[2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);
        let s = t.sum_all(picked).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(e).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
