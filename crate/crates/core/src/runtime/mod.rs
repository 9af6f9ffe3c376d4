//! Model execution.

mod exec;
mod oracle;
mod plan;
mod profile;

pub use exec::{ExecutionPlan, Step};
pub use oracle::{oracle_values, run_oracle};
pub use plan::{plan_memory, Arena, Buffer, MemoryPlan};
pub use profile::{Category, Profile, ProfileRecord};

use crate::bitpack::FloatTensor;
use crate::graph::{Graph, GraphError};
use crate::kernels::KernelError;
use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{node}`: {source}")]
    Kernel { node: String, source: KernelError },
    #[error("node `{node}`: {reason}")]
    Unsupported { node: String, reason: String },
    #[error("input {index}: {reason}")]
    Input { index: usize, reason: String },
}

pub(crate) fn check_inputs(graph: &Graph, inputs: &[FloatTensor]) -> Result<(), RuntimeError> {
    if inputs.len() != graph.inputs.len() {
        return Err(RuntimeError::Input {
            index: inputs.len().min(graph.inputs.len()),
            reason: format!("{} inputs given, graph takes {}", inputs.len(), graph.inputs.len()),
        });
    }
    for (index, (&t, x)) in graph.inputs.iter().zip(inputs).enumerate() {
        let want = graph.shape(t);
        if x.shape() != want {
            return Err(RuntimeError::Input {
                index,
                reason: format!("shape {} does not match {want}", x.shape()),
            });
        }
    }
    Ok(())
}

/// Loads a model file into an execution plan.
pub fn load_model(bytes: &[u8]) -> Result<ExecutionPlan, RuntimeError> {
    ExecutionPlan::load(bytes)
}
