//! Reverse-mode differentiation of the block forwards.
//!
//! A [`GradTape`] records every operation of a block forward together with
//! its output. [`GradTape::backward`] walks the tape in reverse, applying the
//! rules in [`backward`], and accumulates one gradient per node.

mod backward;
pub mod gradcheck;

pub use backward::{
    backward_concat, backward_linear, backward_matmul, backward_pool, backward_rescale_rows,
    backward_softmax_rows,
};
pub use gradcheck::{
    finite_difference_check, numeric_gradient, relative_error, BlockCase, GradcheckOptions,
    GradcheckReport, Slot, TensorCheck,
};

use crate::blocks::{
    run_block, Backend, BlockConfig, BlockKind, BlockWeights, Normalization, Phase, ProjectionRef,
    WeightRefs,
};
use crate::error::{shape_err, Result};
use crate::sampling::{sample_with_record, SampleRecord, SamplerSpec};
use crate::tensor::{Shape3, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape, matching [`GradTape::replay`] order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Project {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Normalize(Var, Normalization),
    Sample {
        src: Var,
        grid: Shape3,
        spec: SamplerSpec,
        record: SampleRecord,
    },
    Add(Var, Var),
    Concat(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record of one forward evaluation. Single owner; not shared
/// between threads.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Accumulated gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    fn take_or_zeros(&mut self, var: Var, like: &Tensor) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::wrap(like.shape().to_vec(), vec![0.0; like.len()]))
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn normalize(&mut self, x: Var, kind: Normalization) -> Result<Var> {
        let value = kind.apply(self.value(x).clone())?;
        Ok(self.push(value, Op::Normalize(x, kind)))
    }

    /// Evaluates one node from already-computed parent values.
    fn eval(op: &Op, values: &[Tensor]) -> Result<Tensor> {
        let v = |var: &Var| &values[var.0];
        let value = match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Reshape(src) => return Err(shape_err!("reshape {src:?} needs a target shape")),
            Op::Transpose(src) => v(src).transpose2d()?,
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Project { x, weight, bias } => {
                Tensor::linear_project(v(x), v(weight), bias.as_ref().map(v))?
            }
            Op::Normalize(src, kind) => kind.apply(v(src).clone())?,
            Op::Sample {
                src, grid, spec, ..
            } => sample_with_record(v(src), *grid, spec)?.0,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Concat(a, b) => Tensor::concat_channels(v(a), v(b))?,
        };
        Ok(value)
    }

    /// Recomputes every node from the leaves and returns the values in tape
    /// order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(src) => values[src.0].reshape(node.value.shape())?,
                op => Self::eval(op, &values)?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse sweep from `output`, seeded with `grad_out`.
    pub fn backward(&self, output: Var, grad_out: &Tensor) -> Result<Gradients> {
        if grad_out.shape() != self.value(output).shape() {
            return Err(shape_err!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                self.value(output).shape()
            ));
        }
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        grads.grads[output.0] = Some(grad_out.clone());
        let accumulate = |grads: &mut Gradients, var: Var, g: Tensor| -> Result<()> {
            let slot = &mut grads.grads[var.0];
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&g)?,
                None => g,
            });
            Ok(())
        };

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads.grads[idx].clone() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Reshape(src) => {
                    let back = g.into_shape(self.value(*src).shape())?;
                    accumulate(&mut grads, *src, back)?;
                }
                Op::Transpose(src) => accumulate(&mut grads, *src, g.transpose2d()?)?,
                Op::MatMul(a, b) => {
                    let (ga, gb) = backward_matmul(&g, self.value(*a), self.value(*b))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Project { x, weight, bias } => {
                    let (gx, gw, gb) =
                        backward_linear(&g, self.value(*x), self.value(*weight), bias.is_some())?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *weight, gw)?;
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Normalize(src, kind) => {
                    let gi = match kind {
                        Normalization::Softmax => backward_softmax_rows(&g, &node.value)?,
                        Normalization::Rescale => backward_rescale_rows(&g)?,
                        Normalization::None => g,
                    };
                    accumulate(&mut grads, *src, gi)?;
                }
                Op::Sample { src, record, .. } => {
                    accumulate(&mut grads, *src, backward_pool(&g, record)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).shape()[0];
                    let (ga, gb) = backward_concat(&g, split)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
            }
        }
        Ok(grads)
    }
}

impl Backend for GradTape {
    type V = Var;

    fn enter(&mut self, _phase: Phase) {}

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(*x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(*x)))
    }

    fn reshape_owned(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.reshape(&x, shape)
    }

    fn project(&mut self, x: &Var, p: &ProjectionRef<'_, Var>) -> Result<Var> {
        let value = Tensor::linear_project(
            self.value(*x),
            self.value(*p.weight),
            p.bias.map(|b| self.value(*b)),
        )?;
        let op = Op::Project {
            x: *x,
            weight: *p.weight,
            bias: p.bias.copied(),
        };
        Ok(self.push(value, op))
    }

    fn sample(&mut self, x: &Var, grid: Shape3, spec: &SamplerSpec) -> Result<Var> {
        let (value, record) = sample_with_record(self.value(*x), grid, spec)?;
        Ok(self.push(
            value,
            Op::Sample {
                src: *x,
                grid,
                spec: spec.clone(),
                record,
            },
        ))
    }

    fn attend(
        &mut self,
        query: &Var,
        keys: &Var,
        values: &Var,
        normalization: Normalization,
    ) -> Result<Var> {
        let query_t = self.transpose(query)?;
        let similarity = self.matmul(query_t, *keys)?;
        let normalized = self.normalize(similarity, normalization)?;
        let values_t = self.transpose(values)?;
        self.matmul(normalized, values_t)
    }

    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let value = self.value(*x).transpose2d()?;
        Ok(self.push(value, Op::Transpose(*x)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.value(*a).add(self.value(*b))?;
        Ok(self.push(value, Op::Add(*a, *b)))
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = Tensor::concat_channels(self.value(*a), self.value(*b))?;
        Ok(self.push(value, Op::Concat(*a, *b)))
    }
}

#[derive(Debug, Clone, Copy)]
struct ProjectionLeaves {
    weight: Var,
    bias: Option<Var>,
}

impl ProjectionLeaves {
    fn record(tape: &mut GradTape, p: &crate::blocks::Projection) -> Self {
        Self {
            weight: tape.leaf(p.weight.clone()),
            bias: p.bias.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    fn as_ref(&self) -> ProjectionRef<'_, Var> {
        ProjectionRef {
            weight: &self.weight,
            bias: self.bias.as_ref(),
        }
    }

    fn gradient(&self, grads: &mut Gradients, tape: &GradTape) -> ProjectionGrad {
        ProjectionGrad {
            weight: grads.take_or_zeros(self.weight, tape.value(self.weight)),
            bias: self.bias.map(|b| grads.take_or_zeros(b, tape.value(b))),
        }
    }
}

/// Gradient of one projection's weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of a scalar objective with respect to every block input and
/// parameter. With shared key/value projections both branches accumulate
/// into `key` and `value` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients {
    pub high: Tensor,
    pub low: Option<Tensor>,
    pub query: ProjectionGrad,
    pub key: ProjectionGrad,
    pub value: Option<ProjectionGrad>,
    pub output: ProjectionGrad,
}

/// A block forward recorded on a tape.
#[derive(Debug, Clone)]
pub struct BlockTape {
    pub tape: GradTape,
    pub output: Var,
    high: Var,
    low: Option<Var>,
    query: ProjectionLeaves,
    key: ProjectionLeaves,
    value: Option<ProjectionLeaves>,
    out_proj: ProjectionLeaves,
}

impl BlockTape {
    pub fn record(
        kind: BlockKind,
        high: &Tensor,
        low: Option<&Tensor>,
        cfg: &BlockConfig,
        w: &BlockWeights,
    ) -> Result<Self> {
        let (high_shape, low_shape) = crate::blocks::check_inputs(kind, high, low, cfg, w)?;
        let mut tape = GradTape::new();
        let high_var = tape.leaf(high.clone());
        let low_var = low.map(|l| tape.leaf(l.clone()));
        let query = ProjectionLeaves::record(&mut tape, &w.query);
        let key = ProjectionLeaves::record(&mut tape, &w.key);
        let value = w
            .value
            .as_ref()
            .map(|v| ProjectionLeaves::record(&mut tape, v));
        let out_proj = ProjectionLeaves::record(&mut tape, &w.output);
        let refs = WeightRefs {
            query: query.as_ref(),
            key: key.as_ref(),
            value: value.as_ref().map(ProjectionLeaves::as_ref),
            output: out_proj.as_ref(),
        };
        let low_arg = low_var.as_ref().zip(low_shape);
        let output = run_block(
            &mut tape,
            kind,
            cfg,
            &refs,
            (&high_var, high_shape),
            low_arg,
        )?;
        Ok(Self {
            tape,
            output,
            high: high_var,
            low: low_var,
            query,
            key,
            value,
            out_proj,
        })
    }

    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<BlockGradients> {
        let mut grads = self.tape.backward(self.output, grad_out)?;
        let tape = &self.tape;
        Ok(BlockGradients {
            high: grads.take_or_zeros(self.high, tape.value(self.high)),
            low: self.low.map(|l| grads.take_or_zeros(l, tape.value(l))),
            query: self.query.gradient(&mut grads, tape),
            key: self.key.gradient(&mut grads, tape),
            value: self.value.map(|v| v.gradient(&mut grads, tape)),
            output: self.out_proj.gradient(&mut grads, tape),
        })
    }
}

/// Reverse-mode gradients of `Σ grad_out ⊙ block(inputs)` for every input and
/// parameter.
pub fn block_backward(
    kind: BlockKind,
    high: &Tensor,
    low: Option<&Tensor>,
    cfg: &BlockConfig,
    w: &BlockWeights,
    grad_out: &Tensor,
) -> Result<BlockGradients> {
    BlockTape::record(kind, high, low, cfg, w)?.backward(grad_out)
}
