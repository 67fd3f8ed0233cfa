//! Vector-Jacobian products, written with the same primitives as the forward
//! pass so they can themselves be recorded and differentiated.

use crate::error::Result;
use crate::tape::{Op, Tape, Var};

fn reduce(g: Var, shape: &[usize]) -> Result<Var> {
    g.sum_to(shape)
}

/// Contributions `(parent_id, gradient)` of upstream gradient `g` flowing
/// through node `id`. Only parents flagged in `wanted` are produced.
pub(crate) fn vjp(tape: &Tape, id: usize, op: &Op, g: &Var, wanted: &[bool]) -> Result<Vec<(usize, Var)>> {
    let v = |i: usize| tape.handle(i);
    let shape = |i: usize| tape.value_of(i).shape().to_vec();
    let out = v(id);
    let mut res = Vec::with_capacity(2);
    let mut emit = |k: usize, parent: usize, f: &mut dyn FnMut() -> Result<Var>| -> Result<()> {
        if wanted[k] {
            res.push((parent, f()?));
        }
        Ok(())
    };

    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(0, a, &mut || reduce(g.clone(), &shape(a)))?;
            emit(1, b, &mut || reduce(g.clone(), &shape(b)))?;
        }
        Op::Sub(a, b) => {
            emit(0, a, &mut || reduce(g.clone(), &shape(a)))?;
            emit(1, b, &mut || reduce(g.neg(), &shape(b)))?;
        }
        Op::Mul(a, b) => {
            emit(0, a, &mut || reduce(g.mul(&v(b))?, &shape(a)))?;
            emit(1, b, &mut || reduce(g.mul(&v(a))?, &shape(b)))?;
        }
        Op::Div(a, b) => {
            emit(0, a, &mut || reduce(g.div(&v(b))?, &shape(a)))?;
            emit(1, b, &mut || reduce(g.mul(&out)?.div(&v(b))?.neg(), &shape(b)))?;
        }
        Op::Neg(a) => emit(0, a, &mut || Ok(g.neg()))?,
        Op::Scale(a, c) => emit(0, a, &mut || Ok(g.scale(c)))?,
        Op::Offset(a) => emit(0, a, &mut || Ok(g.clone()))?,
        Op::Exp(a) => emit(0, a, &mut || g.mul(&out))?,
        Op::Log(a) => emit(0, a, &mut || g.div(&v(a)))?,
        Op::Sqrt(a) => emit(0, a, &mut || Ok(g.div(&out)?.scale(0.5)))?,
        Op::Sigmoid(a) => emit(0, a, &mut || g.mul(&out.sub(&out.square())?))?,
        Op::Tanh(a) => emit(0, a, &mut || g.mul(&out.square().neg().offset(1.0)))?,
        Op::Softplus(a) => emit(0, a, &mut || g.mul(&v(a).sigmoid()))?,
        Op::Relu(a) => emit(0, a, &mut || {
            let mask = tape.value_of(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            g.mul(&tape.constant(mask))
        })?,
        Op::SumTo(a) => emit(0, a, &mut || g.broadcast_to(&shape(a)))?,
        Op::BroadcastTo(a) => emit(0, a, &mut || g.sum_to(&shape(a)))?,
        Op::Reshape(a) => emit(0, a, &mut || g.reshape(&shape(a)))?,
        Op::Transpose(a) => emit(0, a, &mut || g.transpose())?,
        Op::MatMul(a, b) => {
            emit(0, a, &mut || g.matmul(&v(b).transpose()?))?;
            emit(1, b, &mut || v(a).transpose()?.matmul(g))?;
        }
        Op::Conv1d { x, w, pad_left } => {
            emit(0, x, &mut || g.conv1d_input_grad(&v(w), pad_left, shape(x)[2]))?;
            emit(1, w, &mut || v(x).conv1d_weight_grad(g, pad_left, shape(w)[2]))?;
        }
        Op::Conv1dInputGrad { g: gi, w, pad_left } => {
            // out = A_w^T gi, so <h, out> = <conv(h, w), gi> = <weight_grad(h, gi), w>
            emit(0, gi, &mut || g.conv1d_with_len(&v(w), pad_left, shape(gi)[2]))?;
            emit(1, w, &mut || g.conv1d_weight_grad(&v(gi), pad_left, shape(w)[2]))?;
        }
        Op::Conv1dWeightGrad { x, g: gi, pad_left } => {
            emit(0, x, &mut || v(gi).conv1d_input_grad(g, pad_left, shape(x)[2]))?;
            emit(1, gi, &mut || v(x).conv1d_with_len(g, pad_left, shape(gi)[2]))?;
        }
        Op::Gather { x, ref index } => {
            emit(0, x, &mut || g.scatter_add(index.clone(), &shape(x)))?;
        }
        Op::ScatterAdd { g: gi, ref index } => {
            emit(0, gi, &mut || g.gather(index.clone(), &shape(gi)))?;
        }
        Op::ConcatChannels { ref parts } => {
            let [b, total, l] = shape(id)[..] else { unreachable!("concat output is 3-d") };
            let mut offset = 0;
            for (k, &p) in parts.iter().enumerate() {
                let pc = shape(p)[1];
                emit(k, p, &mut || {
                    let index: Vec<usize> = (0..b)
                        .flat_map(|bi| (bi * total + offset) * l..(bi * total + offset + pc) * l)
                        .collect();
                    g.gather(index.into(), &[b, pc, l])
                })?;
                offset += pc;
            }
        }
    }
    Ok(res)
}
