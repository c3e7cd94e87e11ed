//! Minimal reverse-mode differentiable compute core.
//!
//! Every model component builds its forward pass from the primitives on
//! [`Graph`]; [`forward_backward`] and [`grad_check`] run any [`Program`]
//! in either `f32` or `f64`.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::{read_tensor_body, write_tensor_body};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{touched_params, Graph, Var};
pub use optim::{adamw_step, step_decay_lr, AdamWConfig, OptimizerState};
pub use params::{init_linear, uniform, uniform_weight, NamedTensors, ParameterSet};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible operand shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value produced at {context}")]
    NonFiniteValue { context: String },
    #[error("missing input tensor {0:?}")]
    MissingInput(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("cannot differentiate through {op} (node {node})")]
    NonDifferentiable { op: &'static str, node: String },
    #[error("expected a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter/gradient/state paths disagree: {missing:?}")]
    PathMismatch { missing: Vec<String> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a program hands back: the scalar loss plus any named outputs.
#[derive(Clone, Debug)]
pub struct ProgramOutput {
    pub loss: Var,
    pub outputs: Vec<(String, Var)>,
}

impl ProgramOutput {
    pub fn loss(loss: Var) -> Self {
        Self {
            loss,
            outputs: Vec::new(),
        }
    }
}

/// A computation description, generic over the element type so the same
/// program can be trained in `f32` and checked in `f64`.
pub trait Program {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<ProgramOutput, DiffError>;
}

/// Evaluates `program` and differentiates its scalar loss. The returned
/// outputs include `"loss"` plus every named output of the program.
pub fn forward_backward<T: Scalar, P: Program + ?Sized>(
    program: &P,
    inputs: &NamedTensors<T>,
    params: &ParameterSet<T>,
) -> Result<(NamedTensors<T>, ParameterSet<T>), DiffError> {
    let mut g = Graph::new(params).with_inputs(inputs);
    let out = program.build(&mut g)?;
    let mut named = NamedTensors::new();
    for (name, v) in &out.outputs {
        named.insert(name.clone(), g.value(*v).clone());
    }
    named.insert("loss".to_string(), g.value(out.loss).clone());
    let grads = g.backward(out.loss)?;
    Ok((named, grads))
}
