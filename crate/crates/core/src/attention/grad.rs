use super::kernels::{batched_equations, AttentionTrace, Q_EQ, Y_EQ};
use super::AttentionWeights;
use crate::error::Result;
use crate::tensor::{contract_grads, softmax_backward, Equation, Tensor};

/// Gradients of a batched attention call with respect to its inputs and
/// projections. `memory` receives the key and value paths summed.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub x: Tensor,
    pub memory: Tensor,
    pub p_q: Tensor,
    pub p_k: Tensor,
    pub p_v: Tensor,
    pub p_o: Tensor,
}

pub fn attention_backward(
    trace: &AttentionTrace,
    x: &Tensor,
    memory: &Tensor,
    w: &AttentionWeights,
    grad_y: &Tensor,
) -> Result<AttentionGrads> {
    let eq = batched_equations(w.kind());
    let sig = Equation::parse;

    let (grad_o, p_o) = contract_grads(&trace.o, w.p_o(), &sig(Y_EQ)?, grad_y)?;
    let (grad_weights, grad_v) = contract_grads(&trace.weights, &trace.v, &sig(eq.o)?, &grad_o)?;
    let grad_logits = softmax_backward(&trace.weights, &grad_weights)?;
    let (grad_q, grad_k) = contract_grads(&trace.q, &trace.k, &sig(eq.logits)?, &grad_logits)?;
    let (grad_x, p_q) = contract_grads(x, w.p_q(), &sig(Q_EQ)?, &grad_q)?;
    let (mut grad_memory, p_k) = contract_grads(memory, w.p_k(), &sig(eq.k)?, &grad_k)?;
    let (grad_memory_v, p_v) = contract_grads(memory, w.p_v(), &sig(eq.v)?, &grad_v)?;
    grad_memory.add_assign(&grad_memory_v)?;

    Ok(AttentionGrads {
        x: grad_x,
        memory: grad_memory,
        p_q,
        p_k,
        p_v,
        p_o,
    })
}
