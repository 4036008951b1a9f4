//! Reverse-over-forward differentiation for small dense networks.
//!
//! A batch of `n` points travels through the network together with `k`
//! forward tangents (derivatives with respect to network inputs). All of it
//! lives in one stacked matrix of `(1 + k) * n` rows: the primal values come
//! first, then one block of `n` rows per tangent direction. Linear layers act
//! on every block with the same weights (the bias only touches the primal
//! block), so a single matrix product propagates values and tangents.
//!
//! Every operation is recorded on a [`Tape`]. The reverse sweep then pulls
//! adjoints of both primal and tangent outputs back to the parameters, which
//! yields exact gradients of losses that contain input derivatives.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Named extent of a parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Contiguous partition of a flat parameter array into named blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a `rows x cols` block and return its offset.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let offset = self.len();
        self.segments.push(Segment {
            name: name.into(),
            offset,
            rows,
            cols,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// True when the segments tile `0..len()` without gaps or overlap.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        true
    }
}

/// Flat trainable values together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParameterVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if !layout.is_partition() || layout.len() != values.len() {
            return Err(Error::invalid(format!(
                "layout covers {} values but {} were given",
                layout.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Linear {
        src: NodeId,
        weight: usize,
        bias: usize,
        outputs: usize,
        inputs: usize,
    },
    Snake {
        src: NodeId,
        /// `sin 2a` and `cos 2a` of the primal pre-activation.
        sin2: Array2<f64>,
        cos2: Array2<f64>,
    },
    Add(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    label: &'static str,
    value: Array2<f64>,
}

/// Record of one batched evaluation with forward tangents.
///
/// Replaying the same operations on the same parameters and inputs
/// reproduces every value bit for bit: all reductions run in a fixed order.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    points: usize,
    tangents: usize,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64], points: usize, tangents: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(Self {
            params,
            points,
            tangents,
            nodes: Vec::new(),
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn tangents(&self) -> usize {
        self.tangents
    }

    fn rows(&self) -> usize {
        (1 + self.tangents) * self.points
    }

    fn push(&mut self, op: Op, label: &'static str, value: Array2<f64>) -> Result<NodeId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability(format!(
                "non-finite value in layer {} ({label})",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { op, label, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Stacked input: primal rows followed by one block per tangent direction.
    pub fn input(&mut self, stacked: Array2<f64>) -> Result<NodeId> {
        if stacked.nrows() != self.rows() {
            return Err(Error::invalid(format!(
                "input has {} rows, expected {}",
                stacked.nrows(),
                self.rows()
            )));
        }
        self.push(Op::Input, "input", stacked)
    }

    /// `y = W h + b`, with `W` (`outputs x inputs`, row-major) at `weight` and
    /// `b` at `bias` in the parameter slice.
    pub fn linear(&mut self, src: NodeId, weight: usize, bias: usize, outputs: usize) -> Result<NodeId> {
        let h = &self.nodes[src.0].value;
        let inputs = h.ncols();
        let w = weight_view(self.params, weight, outputs, inputs);
        let mut out = Array2::zeros((h.nrows(), outputs));
        general_mat_mul(1.0, h, &w.t(), 0.0, &mut out);
        let b = &self.params[bias..bias + outputs];
        for mut row in out.slice_mut(s![..self.points, ..]).rows_mut() {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        self.push(
            Op::Linear {
                src,
                weight,
                bias,
                outputs,
                inputs,
            },
            "linear",
            out,
        )
    }

    /// Snake activation `a + sin^2 a`; tangents scale by `1 + sin 2a`.
    pub fn snake(&mut self, src: NodeId) -> Result<NodeId> {
        let n = self.points;
        let a = &self.nodes[src.0].value;
        let primal = a.slice(s![..n, ..]);
        let mut sin2 = Array2::zeros(primal.raw_dim());
        let mut cos2 = Array2::zeros(primal.raw_dim());
        let mut out = Array2::zeros(a.raw_dim());
        Zip::from(out.slice_mut(s![..n, ..]))
            .and(&mut sin2)
            .and(&mut cos2)
            .and(&primal)
            .for_each(|y, s2, c2, &x| {
                let (s, c) = (2.0 * x).sin_cos();
                *s2 = s;
                *c2 = c;
                *y = x + 0.5 * (1.0 - c);
            });
        for d in 0..self.tangents {
            let rows = (1 + d) * n..(2 + d) * n;
            Zip::from(out.slice_mut(s![rows.clone(), ..]))
                .and(a.slice(s![rows, ..]))
                .and(&sin2)
                .for_each(|y, &ta, &s2| *y = (1.0 + s2) * ta);
        }
        self.push(Op::Snake { src, sin2, cos2 }, "snake", out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), "add", out)
    }

    /// Full stacked value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Primal block of a node.
    pub fn primal(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].value.slice(s![..self.points, ..])
    }

    /// Tangent block `direction` of a node.
    pub fn tangent(&self, id: NodeId, direction: usize) -> ArrayView2<'_, f64> {
        assert!(direction < self.tangents, "tangent direction out of range");
        let n = self.points;
        self.nodes[id.0]
            .value
            .slice(s![(1 + direction) * n..(2 + direction) * n, ..])
    }

    /// Reverse sweep. `seeds` holds adjoints (same stacked shape as the node
    /// value) of the quantity being differentiated; parameter gradients are
    /// accumulated into `grad`.
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<f64>)>, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer does not match parameter count"));
        }
        let n = self.points;
        let mut adjoints: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if seed.raw_dim() != self.nodes[id.0].value.raw_dim() {
                return Err(Error::invalid("seed shape does not match node"));
            }
            accumulate(&mut adjoints[id.0], seed);
        }

        for (idx, node) in self.nodes.iter().enumerate().rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Linear {
                    src,
                    weight,
                    bias,
                    outputs,
                    inputs,
                } => {
                    let h = &self.nodes[src.0].value;
                    {
                        let mut dw = ArrayViewMut2::from_shape(
                            (*outputs, *inputs),
                            &mut grad[*weight..*weight + outputs * inputs],
                        )
                        .expect("weight block shape");
                        general_mat_mul(1.0, &adj.t(), h, 1.0, &mut dw);
                    }
                    let db = adj.slice(s![..n, ..]).sum_axis(Axis(0));
                    for (g, v) in grad[*bias..*bias + outputs].iter_mut().zip(db.iter()) {
                        *g += v;
                    }
                    if matches!(self.nodes[src.0].op, Op::Input) {
                        continue;
                    }
                    let w = weight_view(self.params, *weight, *outputs, *inputs);
                    let mut dh = Array2::zeros(h.raw_dim());
                    general_mat_mul(1.0, &adj, &w, 0.0, &mut dh);
                    accumulate(&mut adjoints[src.0], dh);
                }
                Op::Snake { src, sin2, cos2 } => {
                    let a = &self.nodes[src.0].value;
                    let mut da = Array2::zeros(a.raw_dim());
                    Zip::from(da.slice_mut(s![..n, ..]))
                        .and(adj.slice(s![..n, ..]))
                        .and(sin2)
                        .for_each(|d, &g, &s2| *d = g * (1.0 + s2));
                    for t in 0..self.tangents {
                        let rows = (1 + t) * n..(2 + t) * n;
                        let (mut primal_adj, mut tangent_adj) =
                            da.multi_slice_mut((s![..n, ..], s![rows.clone(), ..]));
                        Zip::from(&mut primal_adj)
                            .and(&mut tangent_adj)
                            .and(adj.slice(s![rows.clone(), ..]))
                            .and(a.slice(s![rows, ..]))
                            .and(sin2)
                            .and(cos2)
                            .for_each(|dp, dt, &g, &ta, &s2, &c2| {
                                *dp += 2.0 * g * ta * c2;
                                *dt = g * (1.0 + s2);
                            });
                    }
                    accumulate(&mut adjoints[src.0], da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[b.0], adj.clone());
                    accumulate(&mut adjoints[a.0], adj);
                }
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Instability(format!("non-finite gradient component {i}")));
        }
        Ok(())
    }

    /// Labels of the recorded operations, in order.
    pub fn labels(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.label).collect()
    }
}

fn weight_view(params: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &params[offset..offset + rows * cols]).expect("weight block shape")
}

fn accumulate(slot: &mut Option<Array2<f64>>, value: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &value,
        None => *slot = Some(value),
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub checked: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Compare the gradient returned by `loss` against central differences on
/// `samples` coordinates drawn with `seed`.
///
/// `loss` returns the loss and its full gradient. The difference step for
/// coordinate `i` is `step * max(1, |theta_i|)`. Relative errors use
/// `max(|analytic|, |numeric|, 1e-6 * max|gradient|)` as denominator so that
/// components that are zero up to rounding do not dominate the report.
pub fn finite_difference_check<F>(
    params: &[f64],
    loss: F,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..params.len())).collect()
    };
    finite_difference_check_at(params, loss, step, &indices)
}

/// [`finite_difference_check`] on the given coordinates.
pub fn finite_difference_check_at<F>(
    params: &[f64],
    mut loss: F,
    step: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("difference step must be positive, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    if indices.iter().any(|&i| i >= params.len()) {
        return Err(Error::invalid("gradient check index out of range"));
    }
    let (_, grad) = loss(params)?;
    if grad.len() != params.len() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let mut work = params.to_vec();
    let mut checked = Vec::with_capacity(indices.len());
    let mut max_relative_error = 0.0f64;
    for &index in indices {
        let h = step * params[index].abs().max(1.0);
        work[index] = params[index] + h;
        let (plus, _) = loss(&work)?;
        work[index] = params[index] - h;
        let (minus, _) = loss(&work)?;
        work[index] = params[index];
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad[index];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6 * scale);
        let relative_error = if denom > 0.0 {
            (analytic - numeric).abs() / denom
        } else {
            0.0
        };
        max_relative_error = max_relative_error.max(relative_error);
        checked.push(GradCheckEntry {
            index,
            analytic,
            numeric,
            relative_error,
        });
    }
    Ok(GradCheckReport {
        step,
        checked,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layout_partitions() {
        let mut layout = ParamLayout::new();
        assert_eq!(layout.push("w", 3, 2), 0);
        assert_eq!(layout.push("b", 3, 1), 6);
        assert_eq!(layout.len(), 9);
        assert!(layout.is_partition());
        assert!(ParameterVector::new(layout.clone(), vec![0.0; 8]).is_err());
        assert!(ParameterVector::new(layout.clone(), vec![f64::NAN; 9]).is_err());
        assert!(ParameterVector::new(layout, vec![0.5; 9]).is_ok());
    }

    #[test]
    fn linear_derivative_is_weight() {
        // y = w x + b with w = 2.5, b = -1; one tangent along x
        let params = [2.5, -1.0];
        let mut tape = Tape::new(&params, 2, 1).unwrap();
        let x = tape.input(array![[0.3], [-4.0], [1.0], [1.0]]).unwrap();
        let y = tape.linear(x, 0, 1, 1).unwrap();
        assert_eq!(tape.primal(y), array![[-0.25], [-11.0]]);
        assert_eq!(tape.tangent(y, 0), array![[2.5], [2.5]]);
    }

    #[test]
    fn snake_at_zero() {
        let params: [f64; 0] = [];
        let mut tape = Tape::new(&params, 1, 1).unwrap();
        let a = tape.input(array![[0.0], [1.0]]).unwrap();
        let y = tape.snake(a).unwrap();
        assert_eq!(tape.primal(y)[[0, 0]], 0.0);
        assert_eq!(tape.tangent(y, 0)[[0, 0]], 1.0);
    }

    #[test]
    fn square_of_parameter() {
        // loss = theta^2 at theta = 3 via y = theta * 1
        let params = [3.0, 0.0];
        let mut tape = Tape::new(&params, 1, 0).unwrap();
        let x = tape.input(array![[1.0]]).unwrap();
        let y = tape.linear(x, 0, 1, 1).unwrap();
        let v = tape.primal(y)[[0, 0]];
        let mut grad = vec![0.0; 2];
        tape.backward(vec![(y, array![[2.0 * v]])], &mut grad).unwrap();
        assert_eq!(grad[0], 6.0);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let params = [1.0, 0.0];
        let mut tape = Tape::new(&params, 1, 0).unwrap();
        assert!(matches!(tape.input(array![[f64::NAN]]), Err(Error::Instability(_))));
    }

    #[test]
    fn gradcheck_quadratic() {
        let params = vec![0.7, -1.3, 2.0];
        let quad = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = p[0] * p[0] + 3.0 * p[1] * p[1] + p[0] * p[2];
            Ok((v, vec![2.0 * p[0] + p[2], 6.0 * p[1], p[0]]))
        };
        let report = finite_difference_check(&params, quad, 1e-5, 10, 1).unwrap();
        assert_eq!(report.checked.len(), 3);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert!(finite_difference_check(&params, quad, 0.0, 3, 1).is_err());
    }
}
