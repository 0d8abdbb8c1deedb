use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, l2_normalize_in_place, Matrix};
use crate::rng::Rng;

/// `z = normalize(W2 relu(W1 x + b1) + b2)`
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`], sufficient for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    raw_norm: f64,
    embedding: Vec<f64>,
}

impl Tape {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

/// Parameter-shaped gradient (or velocity) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            w1: Matrix::zeros(mlp.w1.rows(), mlp.w1.cols()),
            b1: vec![0.0; mlp.b1.len()],
            w2: Matrix::zeros(mlp.w2.rows(), mlp.w2.cols()),
            b2: vec![0.0; mlp.b2.len()],
        }
    }

    /// Blocks in a fixed order, each tagged with whether it is a weight
    /// matrix (as opposed to a bias).
    pub fn blocks(&self) -> [(&[f64], bool); 4] {
        [
            (self.w1.as_slice(), true),
            (&self.b1, false),
            (self.w2.as_slice(), true),
            (&self.b2, false),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&mut [f64], bool); 4] {
        [
            (self.w1.as_mut_slice(), true),
            (&mut self.b1, false),
            (self.w2.as_mut_slice(), true),
            (&mut self.b2, false),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|(b, _)| b.iter().all(|&x| x == 0.0))
    }
}

impl Mlp {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let mut init = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized buffer")
        };
        let w1 = init(hidden_dim, input_dim);
        let w2 = init(output_dim, hidden_dim);
        Self {
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn param_blocks(&self) -> [(&[f64], bool); 4] {
        [
            (self.w1.as_slice(), true),
            (&self.b1, false),
            (self.w2.as_slice(), true),
            (&self.b2, false),
        ]
    }

    pub fn param_blocks_mut(&mut self) -> [(&mut [f64], bool); 4] {
        [
            (self.w1.as_mut_slice(), true),
            (&mut self.b1, false),
            (self.w2.as_mut_slice(), true),
            (&mut self.b2, false),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.param_blocks().iter().all(|(b, _)| b.iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let h = self.hidden_dim();
        let mut pre_hidden = self.b1.clone();
        for (i, pre) in pre_hidden.iter_mut().enumerate() {
            *pre += dot(self.w1.row(i), input);
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&x| x.max(0.0)).collect();
        let mut out = self.b2.clone();
        for (k, o) in out.iter_mut().enumerate() {
            *o += dot(self.w2.row(k), &hidden);
        }
        debug_assert_eq!(hidden.len(), h);
        let raw_norm = l2_normalize_in_place(&mut out)?;
        let tape = Tape {
            input: input.to_vec(),
            pre_hidden,
            hidden,
            raw_norm,
            embedding: out.clone(),
        };
        Ok((out, tape))
    }

    /// Embeds a single input without keeping the tape.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(z, _)| z)
    }

    pub fn backward(&self, tape: &Tape, grad_embedding: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(tape, grad_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates the parameter gradient of `grad_embedding . z` into `grads`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        grad_embedding: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let (m, h, d) = (self.input_dim(), self.hidden_dim(), self.output_dim());
        if tape.input.len() != m || tape.hidden.len() != h || tape.embedding.len() != d {
            return Err(Error::TapeMismatch(format!(
                "tape dims ({}, {}, {}) vs network ({m}, {h}, {d})",
                tape.input.len(),
                tape.hidden.len(),
                tape.embedding.len()
            )));
        }
        if grad_embedding.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "embedding gradient has length {}, expected {d}",
                grad_embedding.len()
            )));
        }
        if grads.w1.rows() != h || grads.w1.cols() != m || grads.w2.rows() != d {
            return Err(Error::ShapeMismatch("gradient buffers do not match network".into()));
        }

        // Through z = v / |v|: dL/dv = (I - z z^T) g / |v|.
        let z = &tape.embedding;
        let radial = dot(z, grad_embedding);
        let grad_out: Vec<f64> = grad_embedding
            .iter()
            .zip(z)
            .map(|(g, zi)| (g - radial * zi) / tape.raw_norm)
            .collect();

        let mut grad_hidden = vec![0.0; h];
        for (k, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grads.b2[k] += go;
            axpy(go, &tape.hidden, grads.w2.row_mut(k));
            axpy(go, self.w2.row(k), &mut grad_hidden);
        }
        for (i, gh) in grad_hidden.iter().enumerate() {
            if tape.pre_hidden[i] <= 0.0 || *gh == 0.0 {
                continue;
            }
            grads.b1[i] += gh;
            axpy(*gh, &tape.input, grads.w1.row_mut(i));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_norm;
    use crate::rng::Stream;

    #[test]
    fn constant_network_outputs_normalized_bias() {
        let mut rng = Rng::new(0, Stream::Init);
        let mut mlp = Mlp::new(3, 5, 2, &mut rng);
        for (block, _) in mlp.param_blocks_mut() {
            block.iter_mut().for_each(|x| *x = 0.0);
        }
        mlp.b2 = vec![3.0, 4.0];
        for x in [[1.0, 2.0, 3.0], [-5.0, 0.0, 0.1]] {
            assert_eq!(mlp.embed(&x).unwrap(), vec![0.6, 0.8]);
        }
    }

    #[test]
    fn identity_construction() {
        let m = 6;
        let mut w1 = Matrix::zeros(2 * m, m);
        let mut w2 = Matrix::zeros(m, 2 * m);
        for i in 0..m {
            w1.set(i, i, 1.0);
            w1.set(m + i, i, -1.0);
            w2.set(i, i, 1.0);
            w2.set(i, m + i, -1.0);
        }
        let mlp = Mlp {
            w1,
            b1: vec![0.0; 2 * m],
            w2,
            b2: vec![0.0; m],
        };
        let mut rng = Rng::new(1, Stream::Data);
        for _ in 0..20 {
            let x: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let z = mlp.embed(&x).unwrap();
            let cos = dot(&z, &x) / l2_norm(&x);
            assert!(cos > 0.999, "{cos}");
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = Rng::new(2, Stream::Init);
        let mlp = Mlp::new(8, 16, 4, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            assert!((l2_norm(&mlp.embed(&x).unwrap()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_output_is_an_error() {
        let mut mlp = Mlp::new(2, 2, 2, &mut Rng::new(0, Stream::Init));
        for (block, _) in mlp.param_blocks_mut() {
            block.iter_mut().for_each(|x| *x = 0.0);
        }
        assert!(matches!(mlp.forward(&[1.0, 1.0]), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn zero_and_radial_gradients_vanish() {
        let mut rng = Rng::new(3, Stream::Init);
        let mlp = Mlp::new(4, 8, 3, &mut rng);
        let (z, tape) = mlp.forward(&[0.3, -0.2, 1.0, 0.5]).unwrap();
        assert!(mlp.backward(&tape, &[0.0; 3]).unwrap().is_zero());

        let radial: Vec<f64> = z.iter().map(|x| 2.5 * x).collect();
        let g = mlp.backward(&tape, &radial).unwrap();
        for (block, _) in g.blocks() {
            for x in block {
                assert!(x.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_mismatch_detected() {
        let mut rng = Rng::new(4, Stream::Init);
        let a = Mlp::new(4, 8, 3, &mut rng);
        let b = Mlp::new(5, 8, 3, &mut rng);
        let (_, tape) = a.forward(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(b.backward(&tape, &[1.0, 0.0, 0.0]), Err(Error::TapeMismatch(_))));
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = Rng::new(5, Stream::Init);
        let mlp = Mlp::new(5, 7, 4, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let loss = |net: &Mlp| dot(&net.embed(&x).unwrap(), &c);
        let (_, tape) = mlp.forward(&x).unwrap();
        let analytic = mlp.backward(&tape, &c).unwrap();

        let h = 1e-5;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (bi, (block, _)) in analytic.blocks().iter().enumerate() {
            for j in 0..block.len() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.param_blocks_mut()[bi].0[j] += h;
                minus.param_blocks_mut()[bi].0[j] -= h;
                num.push((loss(&plus) - loss(&minus)) / (2.0 * h));
                ana.push(block[j]);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = l2_norm(&num).max(l2_norm(&ana));
        assert!(diff / scale < 1e-6, "{}", diff / scale);
    }
}
