use super::{AutodiffError, Tape, Var};

/// Gate layout along the last axis is `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[input_size, 4*hidden]`
    pub w_ih: Var,
    /// `[hidden, 4*hidden]`
    pub w_hh: Var,
    /// `[4*hidden]`
    pub bias: Var,
}

/// One LSTM step on `x[B,in]`, `h[B,hidden]`, `c[B,hidden]`, returning `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    weights: &LstmWeights,
) -> Result<(Var, Var), AutodiffError> {
    let hidden = tape.shape(weights.w_hh)[0];
    let w_hh = tape.shape(weights.w_hh).to_vec();
    if w_hh != [hidden, 4 * hidden] {
        return Err(AutodiffError::InvalidShape {
            op: "lstm_cell",
            shape: w_hh,
            reason: "recurrent weight must be [hidden, 4*hidden]",
        });
    }
    for state in [h, c] {
        let s = tape.shape(state);
        if s.len() != 2 || s[1] != hidden || s[0] != tape.shape(x)[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "lstm_cell",
                lhs: s.to_vec(),
                rhs: w_hh,
            });
        }
    }
    let input_part = tape.linear(x, weights.w_ih, weights.bias)?;
    let recurrent = tape.matmul(h, weights.w_hh)?;
    let gates = tape.add(input_part, recurrent)?;
    let i = tape.slice(gates, 1, 0, hidden)?;
    let f = tape.slice(gates, 1, hidden, hidden)?;
    let g = tape.slice(gates, 1, 2 * hidden, hidden)?;
    let o = tape.slice(gates, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}
