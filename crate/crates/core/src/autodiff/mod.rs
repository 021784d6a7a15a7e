//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`] sweeps
//! the tape in reverse and deposits gradients on every node that requires
//! them. Parameters live outside the tape in [`Tensor`]s and are copied in
//! with [`Tape::param`] for each pass.

mod adam;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use kernels::Csr;
pub use tape::{softmax_in_place, Tape, Var};
pub use tensor::Tensor;

/// A set of trainable tensors with a fixed order.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Stable names in [`Module::parameters`] order, used by checkpoints.
    fn parameter_names(&self) -> Vec<String> {
        (0..self.parameters().len()).map(|i| format!("param{i}")).collect()
    }

    /// Copies every parameter onto `tape`, as trainable leaves or constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    /// Adds gradients of bound parameters (see [`Module::bind`]) into the
    /// module's own tensors.
    fn pull_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for (p, v) in self.parameters_mut().into_iter().zip(bound) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g);
            }
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}
