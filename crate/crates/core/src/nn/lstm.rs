//! LSTM cell and multi-layer sequence runner.
//!
//! Gate layout inside the stacked weight matrices is fixed as
//! (input i, forget f, cell g, output o), in that order, which checkpoints
//! rely on.

use super::linear::linear;
use crate::error::{Error, Result};
use crate::tensor::ops::{add, concat0, mul, narrow0, sigmoid, slice_cols, tanh};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one LSTM layer: `w_ih: [4h, i]`, `w_hh: [4h, h]`,
/// `b_ih: [4h]`, `b_hh: [4h]`.
#[derive(Clone, Debug)]
pub struct LstmWeights<T: Scalar> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

impl<T: Scalar> LstmWeights<T> {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        let i = self.input_size();
        if self.w_ih.shape() != [4 * h, i]
            || self.w_hh.shape() != [4 * h, h]
            || self.b_ih.shape() != [4 * h]
            || self.b_hh.shape() != [4 * h]
        {
            return Err(Error::Shape(format!(
                "inconsistent LSTM weights: w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.b_ih.shape(),
                self.b_hh.shape()
            )));
        }
        Ok(())
    }
}

/// One LSTM time step.
///
/// `i, f, o` use the logistic gate, `g` uses tanh;
/// `c' = f*c + i*g`, `h' = o * tanh(c')`.
pub fn lstm_step<T: Scalar>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    weights: &LstmWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    weights.validate()?;
    let hidden = weights.hidden_size();
    if h.shape().len() != 2 || h.shape()[1] != hidden || c.shape() != h.shape() {
        return Err(Error::Shape(format!(
            "lstm_step state shapes {:?}/{:?} do not match hidden size {hidden}",
            h.shape(),
            c.shape()
        )));
    }
    let gates = add(
        &linear(x, &weights.w_ih, Some(&weights.b_ih))?,
        &linear(h, &weights.w_hh, Some(&weights.b_hh))?,
    )?;
    let i = sigmoid(&slice_cols(&gates, 0, hidden)?);
    let f = sigmoid(&slice_cols(&gates, hidden, hidden)?);
    let g = tanh(&slice_cols(&gates, 2 * hidden, hidden)?);
    let o = sigmoid(&slice_cols(&gates, 3 * hidden, hidden)?);
    let c_next = add(&mul(&f, c)?, &mul(&i, &g)?)?;
    let h_next = mul(&o, &tanh(&c_next))?;
    Ok((h_next, c_next))
}

/// Output of a full sequence pass.
pub struct LstmOutput<T: Scalar> {
    /// Top-layer hidden state at every time step, each `[b, h]`.
    pub top_hiddens: Vec<Tensor<T>>,
    /// Per-item top-layer hidden at that item's true final step, `[b, h]`.
    pub final_hidden: Tensor<T>,
}

/// Runs a stacked LSTM over `seq: [t, b, i]` with zero initial state.
///
/// `lengths[j]` is item `j`'s true length; steps at or beyond it are
/// padding and never reach the returned `final_hidden`.
pub fn lstm_forward<T: Scalar>(
    seq: &Tensor<T>,
    lengths: &[usize],
    layers: &[LstmWeights<T>],
) -> Result<LstmOutput<T>> {
    let [t_max, batch, input] = match seq.shape() {
        [a, b, c] => [*a, *b, *c],
        other => {
            return Err(Error::Shape(format!(
                "lstm_forward sequence must be [t, b, i], got {other:?}"
            )))
        }
    };
    if layers.is_empty() {
        return Err(Error::InvalidArgument("lstm_forward needs >= 1 layer".into()));
    }
    if lengths.len() != batch {
        return Err(Error::Shape(format!(
            "lstm_forward got {} lengths for batch {batch}",
            lengths.len()
        )));
    }
    for (j, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(Error::InvalidArgument(format!(
                "lstm_forward item {j} has zero length"
            )));
        }
        if len > t_max {
            return Err(Error::Shape(format!(
                "lstm_forward item {j} length {len} exceeds padded length {t_max}"
            )));
        }
    }
    if layers[0].input_size() != input {
        return Err(Error::Shape(format!(
            "lstm_forward input width {input} does not match first layer ({})",
            layers[0].input_size()
        )));
    }

    let mut hs: Vec<Tensor<T>> = layers
        .iter()
        .map(|l| Tensor::zeros(&[batch, l.hidden_size()]))
        .collect();
    let mut cs = hs.clone();
    let mut top_hiddens = Vec::with_capacity(t_max);

    for t in 0..t_max {
        let mut x = narrow0(seq, t, 1)?.reshape(&[batch, input])?;
        for (li, layer) in layers.iter().enumerate() {
            let (h_next, c_next) = lstm_step(&x, &hs[li], &cs[li], layer)?;
            hs[li] = h_next.clone();
            cs[li] = c_next;
            x = h_next;
        }
        top_hiddens.push(x);
    }

    // Row j of the result is item j's top hidden at step lengths[j]-1.
    let rows: Vec<Tensor<T>> = lengths
        .iter()
        .enumerate()
        .map(|(j, &len)| narrow0(&top_hiddens[len - 1], j, 1))
        .collect::<Result<_>>()?;
    let final_hidden = concat0(&rows)?;

    Ok(LstmOutput {
        top_hiddens,
        final_hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Tensor};

    fn zero_weights(input: usize, hidden: usize) -> LstmWeights<f64> {
        LstmWeights {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            b_ih: Tensor::zeros(&[4 * hidden]),
            b_hh: Tensor::zeros(&[4 * hidden]),
        }
    }

    fn randn_weights(input: usize, hidden: usize, seed: u64) -> LstmWeights<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        LstmWeights {
            w_ih: mk(&[4 * hidden, input]),
            w_hh: mk(&[4 * hidden, hidden]),
            b_ih: mk(&[4 * hidden]),
            b_hh: mk(&[4 * hidden]),
        }
    }

    #[test]
    fn zero_weights_zero_cell_stays_zero() {
        let w = zero_weights(2, 3);
        let x = Tensor::<f64>::zeros(&[1, 2]);
        let h = Tensor::<f64>::zeros(&[1, 3]);
        let c = Tensor::<f64>::zeros(&[1, 3]);
        let (h2, c2) = lstm_step(&x, &h, &c, &w).unwrap();
        assert!(h2.data().iter().all(|&v| v == 0.0));
        assert!(c2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_unit_cell_halves() {
        // All gates sit at sigmoid(0)=0.5, g at tanh(0)=0:
        // c' = 0.5, h' = 0.5*tanh(0.5)
        let w = zero_weights(2, 3);
        let x = Tensor::<f64>::zeros(&[1, 2]);
        let h = Tensor::<f64>::zeros(&[1, 3]);
        let c = Tensor::from_vec(&[1, 3], vec![1.0f64; 3]).unwrap();
        let (h2, c2) = lstm_step(&x, &h, &c, &w).unwrap();
        for &v in c2.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let expected = 0.5 * (0.5f64).tanh();
        for &v in h2.data() {
            assert!((v - expected).abs() < 1e-9);
            assert!((v - 0.231059).abs() < 1e-6);
        }
    }

    #[test]
    fn gradcheck_three_chained_steps() {
        let w = randn_weights(2, 2, 9);
        let x1 = Tensor::from_vec(&[1, 2], vec![0.3f64, -0.6]).unwrap();
        let x2 = Tensor::from_vec(&[1, 2], vec![-0.2f64, 0.8]).unwrap();
        let x3 = Tensor::from_vec(&[1, 2], vec![0.5f64, 0.1]).unwrap();
        let params = [w.w_ih.clone(), w.w_hh.clone(), w.b_ih.clone(), w.b_hh.clone(), x1, x2, x3];
        let report = finite_diff_check(
            |p| {
                let w = LstmWeights {
                    w_ih: p[0].clone(),
                    w_hh: p[1].clone(),
                    b_ih: p[2].clone(),
                    b_hh: p[3].clone(),
                };
                let h = Tensor::<f64>::zeros(&[1, 2]);
                let c = Tensor::<f64>::zeros(&[1, 2]);
                let (h, c) = lstm_step(&p[4], &h, &c, &w).unwrap();
                let (h, c) = lstm_step(&p[5], &h, &c, &w).unwrap();
                let (h, _) = lstm_step(&p[6], &h, &c, &w).unwrap();
                ops::sum_all(&h)
            },
            &params,
            1e-4,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn forward_matches_manual_steps() {
        let layers = vec![randn_weights(2, 3, 1), randn_weights(3, 3, 2)];
        let t = 5;
        let seq_data: Vec<f64> = (0..t * 2).map(|i| (i as f64 * 0.23).sin()).collect();
        let seq = Tensor::from_vec(&[t, 1, 2], seq_data).unwrap();
        let out = lstm_forward(&seq, &[t], &layers).unwrap();

        let mut h = vec![Tensor::<f64>::zeros(&[1, 3]); 2];
        let mut c = h.clone();
        let mut top = Tensor::<f64>::zeros(&[1, 3]);
        for step in 0..t {
            let mut x = narrow0(&seq, step, 1).unwrap().reshape(&[1, 2]).unwrap();
            for (li, l) in layers.iter().enumerate() {
                let (hn, cn) = lstm_step(&x, &h[li], &c[li], l).unwrap();
                h[li] = hn.clone();
                c[li] = cn;
                x = hn;
            }
            top = x;
        }
        for (a, b) in out.final_hidden.data().iter().zip(top.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_item_matches_unpadded_run() {
        let layers = vec![randn_weights(2, 3, 7)];
        // Item 0 has true length 3 inside a T=5 padded batch.
        let mut seq_data = vec![0.0f64; 5 * 2 * 2];
        let item0: Vec<f64> = (0..6).map(|i| (i as f64 * 0.31).cos()).collect();
        let item1: Vec<f64> = (0..10).map(|i| (i as f64 * 0.17).sin()).collect();
        for t in 0..3 {
            seq_data[t * 4] = item0[t * 2];
            seq_data[t * 4 + 1] = item0[t * 2 + 1];
        }
        for t in 0..5 {
            seq_data[t * 4 + 2] = item1[t * 2];
            seq_data[t * 4 + 3] = item1[t * 2 + 1];
        }
        let batch = Tensor::from_vec(&[5, 2, 2], seq_data).unwrap();
        let padded = lstm_forward(&batch, &[3, 5], &layers).unwrap();

        let solo = Tensor::from_vec(&[3, 1, 2], item0).unwrap();
        let solo_out = lstm_forward(&solo, &[3], &layers).unwrap();

        for j in 0..3 {
            let a = padded.final_hidden.at(&[0, j]);
            let b = solo_out.final_hidden.at(&[0, j]);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_length_rejected() {
        let layers = vec![zero_weights(2, 3)];
        let seq = Tensor::<f64>::zeros(&[4, 1, 2]);
        assert!(lstm_forward(&seq, &[0], &layers).is_err());
    }

    #[test]
    fn zero_input_zero_init_stays_zero() {
        let layers = vec![zero_weights(2, 3), zero_weights(3, 3)];
        let seq = Tensor::<f64>::zeros(&[4, 2, 2]);
        let out = lstm_forward(&seq, &[4, 2], &layers).unwrap();
        assert!(out.final_hidden.data().iter().all(|&v| v == 0.0));
    }
}
