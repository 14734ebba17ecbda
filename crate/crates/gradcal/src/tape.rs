//! Reverse-mode differentiation tape over dense tensors.
//!
//! A forward pass appends nodes to the tape; `backward` replays it in
//! reverse from any scalar root. Gradient buffers are allocated per call,
//! so multiple backward passes over one tape are fully independent and a
//! tape is never mutated by differentiation.

use crate::error::{Error, Result};
use crate::region::{GradEntry, GradientMap, RegionTag};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Scalar loss kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over masked samples of the per-sample mean squared error.
    Mse,
    /// Mean over masked samples of softmax cross-entropy against a class
    /// index per row.
    SoftmaxCe,
    /// Mean over masked samples of the per-cell mean sigmoid binary
    /// cross-entropy against a 0/1 target per cell.
    SigmoidBce,
}

/// Target of a loss node.
#[derive(Debug, Clone)]
pub enum LossTarget {
    /// Dense targets with the same shape as the prediction.
    Values(Tensor),
    /// One class index per row (softmax cross-entropy).
    Classes(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x W^T + b, rows are samples.
    Linear {
        w: NodeId,
        b: NodeId,
        x: NodeId,
    },
    /// [left | right] column-wise; backward splits at the seam.
    ConcatCols {
        left: NodeId,
        right: NodeId,
        left_cols: usize,
    },
    Activation {
        kind: Activation,
        input: NodeId,
    },
    Loss {
        kind: LossKind,
        pred: NodeId,
        target: LossTarget,
        mask: Vec<f64>,
    },
    /// ca * a + cb * b, elementwise on equal shapes.
    AddScaled {
        a: NodeId,
        ca: f64,
        b: NodeId,
        cb: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

struct ParamBinding {
    node: NodeId,
    region: RegionTag,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<ParamBinding>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Records a non-learnable input (data, constants).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a learnable parameter and tags it with its region. Binding
    /// order defines the canonical gradient order of this tape.
    pub fn bind_param(&mut self, region: RegionTag, value: Tensor) -> NodeId {
        let node = self.push(value, Op::Leaf);
        self.bindings.push(ParamBinding { node, region });
        node
    }

    /// x W^T + b with `x: (batch, n_in)`, `W: (n_out, n_in)`,
    /// `b: (1, n_out)`.
    pub fn apply_linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        if xv.cols() != wv.cols() {
            return Err(Error::shape(
                "apply_linear: input width vs weight fan-in",
                format!("{}x{}", xv.rows(), xv.cols()),
                format!("{}x{}", wv.rows(), wv.cols()),
            ));
        }
        if bv.rows() != 1 || bv.cols() != wv.rows() {
            return Err(Error::shape(
                "apply_linear: bias vs weight fan-out",
                format!("{}x{}", bv.rows(), bv.cols()),
                format!("1x{}", wv.rows()),
            ));
        }
        let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; batch * n_out];
        for i in 0..batch {
            for o in 0..n_out {
                let mut acc = bv.data()[o];
                for k in 0..n_in {
                    acc += xv.get(i, k) * wv.get(o, k);
                }
                out[i * n_out + o] = acc;
            }
        }
        Ok(self.push(Tensor::from_raw(batch, n_out, out), Op::Linear { w, b, x }))
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concat_columns(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let (lv, rv) = (self.value(left), self.value(right));
        if lv.rows() != rv.rows() {
            return Err(Error::shape(
                "concat_columns: row counts",
                format!("{}x{}", lv.rows(), lv.cols()),
                format!("{}x{}", rv.rows(), rv.cols()),
            ));
        }
        let (rows, lc, rc) = (lv.rows(), lv.cols(), rv.cols());
        let mut out = Vec::with_capacity(rows * (lc + rc));
        for i in 0..rows {
            out.extend_from_slice(&lv.data()[i * lc..(i + 1) * lc]);
            out.extend_from_slice(&rv.data()[i * rc..(i + 1) * rc]);
        }
        Ok(self.push(
            Tensor::from_raw(rows, lc + rc, out),
            Op::ConcatCols {
                left,
                right,
                left_cols: lc,
            },
        ))
    }

    /// Elementwise activation; relu uses subgradient 0 at 0.
    pub fn apply_activation(&mut self, kind: Activation, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = match kind {
            Activation::Relu => v.data().iter().map(|&x| x.max(0.0)).collect(),
            Activation::Tanh => v.data().iter().map(|&x| x.tanh()).collect(),
        };
        let (rows, cols) = v.shape();
        self.push(Tensor::from_raw(rows, cols, data), Op::Activation { kind, input })
    }

    /// Masked mean loss over samples; rows with mask 0 contribute nothing.
    /// An all-zero mask yields exactly 0 with zero gradient.
    pub fn compute_loss(
        &mut self,
        kind: LossKind,
        pred: NodeId,
        target: LossTarget,
        mask: &[f64],
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        let (rows, cols) = pv.shape();
        if mask.len() != rows {
            return Err(Error::shape(
                "compute_loss: mask vs batch",
                format!("{} mask entries", mask.len()),
                format!("{rows} rows"),
            ));
        }
        match &target {
            LossTarget::Values(t) => {
                if t.shape() != pv.shape() {
                    return Err(Error::shape(
                        "compute_loss: target vs prediction",
                        format!("{}x{}", t.rows(), t.cols()),
                        format!("{rows}x{cols}"),
                    ));
                }
                if matches!(kind, LossKind::SoftmaxCe) {
                    return Err(Error::Usage(
                        "softmax_ce takes class-index targets".into(),
                    ));
                }
            }
            LossTarget::Classes(labels) => {
                if !matches!(kind, LossKind::SoftmaxCe) {
                    return Err(Error::Usage(
                        "class-index targets are only valid for softmax_ce".into(),
                    ));
                }
                if labels.len() != rows {
                    return Err(Error::shape(
                        "compute_loss: labels vs batch",
                        format!("{} labels", labels.len()),
                        format!("{rows} rows"),
                    ));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
                    return Err(Error::Usage(format!(
                        "class label {bad} out of range for {cols} classes"
                    )));
                }
            }
        }
        let m: f64 = mask.iter().sum();
        let value = if m == 0.0 {
            0.0
        } else {
            let mut total = 0.0;
            for i in 0..rows {
                if mask[i] == 0.0 {
                    continue;
                }
                total += mask[i] * per_sample_loss(kind, pv, &target, i);
            }
            total / m
        };
        let mask = mask.to_vec();
        Ok(self.push(
            Tensor::from_raw(1, 1, vec![value]),
            Op::Loss {
                kind,
                pred,
                target,
                mask,
            },
        ))
    }

    /// ca * a + cb * b on equal shapes (used to combine scalar losses).
    pub fn add_scaled(&mut self, a: NodeId, ca: f64, b: NodeId, cb: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{}x{}", av.rows(), av.cols()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        let (rows, cols) = av.shape();
        Ok(self.push(
            Tensor::from_raw(rows, cols, data),
            Op::AddScaled { a, ca, b, cb },
        ))
    }

    /// Exact reverse-mode gradients of the scalar `root` with respect to
    /// every bound parameter. Parameters not reachable from the root get
    /// all-zero entries. Repeated calls with different roots never
    /// interact.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not on this tape".into()));
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}x{}",
                root_val.rows(),
                root_val.cols()
            )));
        }

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Lift the downstream gradient out so parents can be written.
            let delta = std::mem::take(&mut grads[i]);
            self.propagate(i, &delta, &mut grads);
            grads[i] = delta;
        }

        let entries = self
            .bindings
            .iter()
            .map(|binding| {
                let value = &self.nodes[binding.node.0].value;
                GradEntry {
                    region: binding.region,
                    grad: Tensor::from_raw(
                        value.rows(),
                        value.cols(),
                        grads[binding.node.0].clone(),
                    ),
                }
            })
            .collect();
        Ok(GradientMap::new(entries))
    }

    fn propagate(&self, node: usize, delta: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Linear { w, b, x } => {
                let wv = &self.nodes[w.0].value;
                let xv = &self.nodes[x.0].value;
                let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
                // dW[o,k] += sum_i delta[i,o] * x[i,k]
                {
                    let gw = &mut grads[w.0];
                    for i in 0..batch {
                        for o in 0..n_out {
                            let d = delta[i * n_out + o];
                            if d == 0.0 {
                                continue;
                            }
                            for k in 0..n_in {
                                gw[o * n_in + k] += d * xv.get(i, k);
                            }
                        }
                    }
                }
                // db[o] += sum_i delta[i,o]
                {
                    let gb = &mut grads[b.0];
                    for i in 0..batch {
                        for o in 0..n_out {
                            gb[o] += delta[i * n_out + o];
                        }
                    }
                }
                // dx[i,k] += sum_o delta[i,o] * W[o,k]
                {
                    let gx = &mut grads[x.0];
                    for i in 0..batch {
                        for o in 0..n_out {
                            let d = delta[i * n_out + o];
                            if d == 0.0 {
                                continue;
                            }
                            for k in 0..n_in {
                                gx[i * n_in + k] += d * wv.get(o, k);
                            }
                        }
                    }
                }
            }
            Op::ConcatCols {
                left,
                right,
                left_cols,
            } => {
                let rows = self.nodes[node].value.rows();
                let total = self.nodes[node].value.cols();
                let rc = total - left_cols;
                {
                    let gl = &mut grads[left.0];
                    for i in 0..rows {
                        for c in 0..*left_cols {
                            gl[i * left_cols + c] += delta[i * total + c];
                        }
                    }
                }
                {
                    let gr = &mut grads[right.0];
                    for i in 0..rows {
                        for c in 0..rc {
                            gr[i * rc + c] += delta[i * total + left_cols + c];
                        }
                    }
                }
            }
            Op::Activation { kind, input } => {
                let xv = &self.nodes[input.0].value;
                let yv = &self.nodes[node].value;
                let gi = &mut grads[input.0];
                match kind {
                    Activation::Relu => {
                        for (j, g) in gi.iter_mut().enumerate() {
                            if xv.data()[j] > 0.0 {
                                *g += delta[j];
                            }
                        }
                    }
                    Activation::Tanh => {
                        for (j, g) in gi.iter_mut().enumerate() {
                            let y = yv.data()[j];
                            *g += delta[j] * (1.0 - y * y);
                        }
                    }
                }
            }
            Op::Loss {
                kind,
                pred,
                target,
                mask,
            } => {
                let m: f64 = mask.iter().sum();
                if m == 0.0 {
                    return;
                }
                let d = delta[0];
                if d == 0.0 {
                    return;
                }
                let pv = &self.nodes[pred.0].value;
                let (rows, cols) = pv.shape();
                let gp = &mut grads[pred.0];
                for i in 0..rows {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let scale = d * mask[i] / m;
                    match (kind, target) {
                        (LossKind::Mse, LossTarget::Values(t)) => {
                            for j in 0..cols {
                                gp[i * cols + j] +=
                                    scale * 2.0 * (pv.get(i, j) - t.get(i, j)) / cols as f64;
                            }
                        }
                        (LossKind::SoftmaxCe, LossTarget::Classes(labels)) => {
                            let probs = softmax_row(pv, i);
                            for j in 0..cols {
                                let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                                gp[i * cols + j] += scale * (probs[j] - indicator);
                            }
                        }
                        (LossKind::SigmoidBce, LossTarget::Values(t)) => {
                            for j in 0..cols {
                                let s = sigmoid(pv.get(i, j));
                                gp[i * cols + j] += scale * (s - t.get(i, j)) / cols as f64;
                            }
                        }
                        _ => unreachable!("loss target kind checked at construction"),
                    }
                }
            }
            Op::AddScaled { a, ca, b, cb } => {
                {
                    let ga = &mut grads[a.0];
                    for (j, g) in ga.iter_mut().enumerate() {
                        *g += ca * delta[j];
                    }
                }
                {
                    let gb = &mut grads[b.0];
                    for (j, g) in gb.iter_mut().enumerate() {
                        *g += cb * delta[j];
                    }
                }
            }
        }
    }
}

fn per_sample_loss(kind: LossKind, pred: &Tensor, target: &LossTarget, row: usize) -> f64 {
    let cols = pred.cols();
    match (kind, target) {
        (LossKind::Mse, LossTarget::Values(t)) => {
            let mut acc = 0.0;
            for j in 0..cols {
                let d = pred.get(row, j) - t.get(row, j);
                acc += d * d;
            }
            acc / cols as f64
        }
        (LossKind::SoftmaxCe, LossTarget::Classes(labels)) => {
            let max = (0..cols)
                .map(|j| pred.get(row, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = (0..cols).map(|j| (pred.get(row, j) - max).exp()).sum();
            max + sum_exp.ln() - pred.get(row, labels[row])
        }
        (LossKind::SigmoidBce, LossTarget::Values(t)) => {
            let mut acc = 0.0;
            for j in 0..cols {
                let z = pred.get(row, j);
                let y = t.get(row, j);
                // max(z,0) - z*y + ln(1 + exp(-|z|)) is stable for large |z|.
                acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
            acc / cols as f64
        }
        _ => unreachable!("loss target kind checked at construction"),
    }
}

fn softmax_row(t: &Tensor, row: usize) -> Vec<f64> {
    let cols = t.cols();
    let max = (0..cols)
        .map(|j| t.get(row, j))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = (0..cols).map(|j| (t.get(row, j) - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_forced_arithmetic() {
        let mut tape = Tape::new();
        let w = tape.input(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(1, 2, &[0.0, 0.0]));
        let x = tape.input(t(1, 2, &[1.0, 1.0]));
        let y = tape.apply_linear(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_identity_case() {
        let mut tape = Tape::new();
        let w = tape.input(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.input(t(1, 2, &[0.0, 0.0]));
        let x = tape.input(t(1, 2, &[5.0, -2.0]));
        let y = tape.apply_linear(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -2.0]);
    }

    #[test]
    fn linear_with_bias() {
        let mut tape = Tape::new();
        let w = tape.input(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(1, 2, &[1.0, 1.0]));
        let x = tape.input(t(1, 2, &[1.0, 1.0]));
        let y = tape.apply_linear(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 8.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let w = tape.input(t(2, 3, &[0.0; 6]));
        let b = tape.input(t(1, 2, &[0.0; 2]));
        let x = tape.input(t(1, 2, &[0.0; 2]));
        let err = tape.apply_linear(w, b, x).unwrap_err().to_string();
        assert!(err.contains("1x2") && err.contains("2x3"), "{err}");
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.input(t(1, 2, &[1.0, 2.0]));
        let b = tape.input(t(1, 1, &[3.0]));
        let c = tape.concat_columns(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let a = tape.input(t(2, 1, &[1.0, 2.0]));
        let b = tape.input(t(2, 1, &[3.0, 4.0]));
        let c = tape.concat_columns(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);

        let a = tape.input(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let empty = tape.input(Tensor::zeros(2, 0));
        let c = tape.concat_columns(a, empty).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_row_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.input(t(1, 2, &[1.0, 2.0]));
        let b = tape.input(t(2, 1, &[3.0, 4.0]));
        assert!(tape.concat_columns(a, b).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 2, &[-1.0, 2.0]));
        let y = tape.apply_activation(Activation::Relu, x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let z = tape.input(t(1, 1, &[0.0]));
        let y = tape.apply_activation(Activation::Tanh, z);
        assert_eq!(tape.value(y).data(), &[0.0]);

        let one = tape.input(t(1, 1, &[1.0]));
        let y = tape.apply_activation(Activation::Tanh, one);
        // High-precision tanh(1).
        assert!((tape.value(y).data()[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let pred = tape.input(t(2, 2, &[0.3, 0.7, -1.0, 2.0]));
        let l = tape
            .compute_loss(
                LossKind::Mse,
                pred,
                LossTarget::Values(t(2, 2, &[0.3, 0.7, -1.0, 2.0])),
                &[1.0, 1.0],
            )
            .unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let logits = tape.input(t(1, 3, &[0.4, 0.4, 0.4]));
        let l = tape
            .compute_loss(
                LossKind::SoftmaxCe,
                logits,
                LossTarget::Classes(vec![1]),
                &[1.0],
            )
            .unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

        let logit = tape.input(t(1, 1, &[0.0]));
        let l = tape
            .compute_loss(
                LossKind::SigmoidBce,
                logit,
                LossTarget::Values(t(1, 1, &[1.0])),
                &[1.0],
            )
            .unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_loss_is_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.bind_param(RegionTag::HeadDet, t(1, 1, &[2.0]));
        let b = tape.input(t(1, 1, &[0.0]));
        let x = tape.input(t(1, 1, &[3.0]));
        let y = tape.apply_linear(w, b, x).unwrap();
        let l = tape
            .compute_loss(
                LossKind::Mse,
                y,
                LossTarget::Values(t(1, 1, &[0.0])),
                &[0.0],
            )
            .unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let gm = tape.backward(l).unwrap();
        assert_eq!(gm.region_norm(RegionTag::HeadDet).unwrap(), 0.0);
    }

    #[test]
    fn product_rule_through_linear() {
        // root = w * x with w = 3, x = 2 via a 1x1 linear layer.
        let mut tape = Tape::new();
        let w = tape.bind_param(RegionTag::SharedLast, t(1, 1, &[3.0]));
        let b = tape.bind_param(RegionTag::SharedTrunk, t(1, 1, &[0.0]));
        let x = tape.bind_param(RegionTag::LidarBranch, t(1, 1, &[2.0]));
        let y = tape.apply_linear(w, b, x).unwrap();
        let gm = tape.backward(y).unwrap();
        assert_eq!(
            gm.region_gradient(RegionTag::SharedLast).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            gm.region_gradient(RegionTag::LidarBranch).unwrap(),
            vec![3.0]
        );
    }

    #[test]
    fn tanh_prime_at_zero_is_one() {
        // root = tanh(w * x) at w = 0: d/dw = x.
        let mut tape = Tape::new();
        let w = tape.bind_param(RegionTag::SharedLast, t(1, 1, &[0.0]));
        let b = tape.input(t(1, 1, &[0.0]));
        let x = tape.input(t(1, 1, &[2.5]));
        let y = tape.apply_linear(w, b, x).unwrap();
        let z = tape.apply_activation(Activation::Tanh, y);
        let gm = tape.backward(z).unwrap();
        assert_eq!(
            gm.region_gradient(RegionTag::SharedLast).unwrap(),
            vec![2.5]
        );
    }

    #[test]
    fn backward_root_must_be_scalar_and_on_tape() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 2, &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        assert!(tape.backward(NodeId(99)).is_err());
    }

    #[test]
    fn roots_are_independent() {
        // Two losses on one tape; gradients per root match fresh tapes.
        let build = |tape: &mut Tape| {
            let w = tape.bind_param(RegionTag::SharedLast, t(1, 1, &[1.5]));
            let b = tape.bind_param(RegionTag::SharedTrunk, t(1, 1, &[0.25]));
            let x = tape.input(t(1, 1, &[2.0]));
            let y = tape.apply_linear(w, b, x).unwrap();
            let l1 = tape
                .compute_loss(
                    LossKind::Mse,
                    y,
                    LossTarget::Values(t(1, 1, &[0.0])),
                    &[1.0],
                )
                .unwrap();
            let z = tape.apply_activation(Activation::Tanh, y);
            let l2 = tape
                .compute_loss(
                    LossKind::Mse,
                    z,
                    LossTarget::Values(t(1, 1, &[1.0])),
                    &[1.0],
                )
                .unwrap();
            (l1, l2)
        };
        let mut shared = Tape::new();
        let (l1, l2) = build(&mut shared);
        let g1 = shared.backward(l1).unwrap();
        let g2 = shared.backward(l2).unwrap();

        let mut fresh1 = Tape::new();
        let (f1, _) = build(&mut fresh1);
        let e1 = fresh1.backward(f1).unwrap();
        let mut fresh2 = Tape::new();
        let (_, f2) = build(&mut fresh2);
        let e2 = fresh2.backward(f2).unwrap();

        for tag in [RegionTag::SharedLast, RegionTag::SharedTrunk] {
            assert_eq!(
                g1.region_gradient(tag).unwrap(),
                e1.region_gradient(tag).unwrap()
            );
            assert_eq!(
                g2.region_gradient(tag).unwrap(),
                e2.region_gradient(tag).unwrap()
            );
        }
    }

    #[test]
    fn concat_backward_splits_bit_exactly() {
        let mut tape = Tape::new();
        let left = tape.bind_param(RegionTag::LidarBranch, t(1, 2, &[0.3, -0.7]));
        let right = tape.bind_param(RegionTag::ImageBranch, t(1, 1, &[0.9]));
        let cat = tape.concat_columns(left, right).unwrap();
        let w = tape.input(t(1, 3, &[0.11, 0.23, -0.5]));
        let b = tape.input(t(1, 1, &[0.0]));
        let y = tape.apply_linear(w, b, cat).unwrap();
        let gm = tape.backward(y).unwrap();
        // d y / d cat = w, split at the seam.
        assert_eq!(
            gm.region_gradient(RegionTag::LidarBranch).unwrap(),
            vec![0.11, 0.23]
        );
        assert_eq!(
            gm.region_gradient(RegionTag::ImageBranch).unwrap(),
            vec![-0.5]
        );
    }

    #[test]
    fn scaling_the_root_scales_gradients_linearly() {
        let mut tape = Tape::new();
        let w = tape.bind_param(RegionTag::SharedLast, t(1, 2, &[1.25, -0.5]));
        let b = tape.input(t(1, 1, &[0.1]));
        let x = tape.input(t(2, 2, &[1.0, 2.0, -0.5, 0.25]));
        let y = tape.apply_linear(w, b, x).unwrap();
        let z = tape.apply_activation(Activation::Tanh, y);
        let l = tape
            .compute_loss(
                LossKind::Mse,
                z,
                LossTarget::Values(t(2, 1, &[0.5, -0.5])),
                &[1.0, 1.0],
            )
            .unwrap();
        let zero = tape.input(t(1, 1, &[0.0]));
        let scaled = tape.add_scaled(l, 3.0, zero, 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        let gs = tape.backward(scaled).unwrap();
        let a = g.region_gradient(RegionTag::SharedLast).unwrap();
        let b = gs.region_gradient(RegionTag::SharedLast).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn determinism_bit_identical_gradients() {
        let run = || {
            let mut tape = Tape::new();
            let w = tape.bind_param(RegionTag::SharedLast, t(2, 2, &[0.3, -0.2, 0.9, 0.11]));
            let b = tape.bind_param(RegionTag::SharedTrunk, t(1, 2, &[0.0, 0.5]));
            let x = tape.input(t(3, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]));
            let y = tape.apply_linear(w, b, x).unwrap();
            let z = tape.apply_activation(Activation::Relu, y);
            let l = tape
                .compute_loss(
                    LossKind::SigmoidBce,
                    z,
                    LossTarget::Values(t(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])),
                    &[1.0, 0.0, 1.0],
                )
                .unwrap();
            let gm = tape.backward(l).unwrap();
            (
                tape.value(l).data()[0],
                gm.region_gradient(RegionTag::SharedLast).unwrap(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
