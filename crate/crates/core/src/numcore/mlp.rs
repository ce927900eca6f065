use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NumError, Result};

pub const DEFAULT_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

/// Derivative of LeakyReLU; the value at exactly zero is the slope.
#[inline]
pub fn leaky_relu_grad(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Two dense layers, each followed by LeakyReLU:
/// `y = lrelu(W2 · lrelu(W1 · x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2Params {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub slope: f64,
}

/// Gradients with the same block shapes as [`Mlp2Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2Grads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`mlp2_backward`].
#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    x: Matrix,
    z1: Matrix,
    a1: Matrix,
    z2: Matrix,
}

impl Mlp2Cache {
    pub fn input(&self) -> &Matrix {
        &self.x
    }
}

impl Mlp2Params {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>, slope: f64) -> Result<Self> {
        let p = Self {
            w1,
            b1,
            w2,
            b2,
            slope,
        };
        p.validate()?;
        Ok(p)
    }

    /// Kaiming-uniform weights for LeakyReLU, zero biases.
    pub fn init<R: Rng + ?Sized>(
        n_in: usize,
        n_hidden: usize,
        n_out: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut layer = |fan_out: usize, fan_in: usize| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let v = (0..fan_out * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Matrix::from_vec(fan_out, fan_in, v).expect("finite init")
        };
        let w1 = layer(n_hidden, n_in);
        let w2 = layer(n_out, n_hidden);
        Self {
            w1,
            b1: vec![0.0; n_hidden],
            w2,
            b2: vec![0.0; n_out],
            slope,
        }
    }

    /// `W1 = W2 = I`, zero biases.
    pub fn identity(n: usize, slope: f64) -> Self {
        Self {
            w1: Matrix::identity(n),
            b1: vec![0.0; n],
            w2: Matrix::identity(n),
            b2: vec![0.0; n],
            slope,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n_h = self.w1.rows();
        if self.b1.len() != n_h || self.w2.cols() != n_h || self.b2.len() != self.w2.rows() {
            return Err(NumError::Shape {
                op: "Mlp2Params",
                expected: format!("b1[{n_h}], W2[_x{n_h}], b2[{}]", self.w2.rows()),
                found: format!(
                    "b1[{}], W2[{}x{}], b2[{}]",
                    self.b1.len(),
                    self.w2.rows(),
                    self.w2.cols(),
                    self.b2.len()
                ),
            });
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(NumError::InvalidArgument(format!(
                "LeakyReLU slope must lie in (0, 1), got {}",
                self.slope
            )));
        }
        Ok(())
    }

    /// Parameter blocks in storage order: W1, b1, W2, b2.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn zero_grads(&self) -> Mlp2Grads {
        Mlp2Grads {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }
}

impl Mlp2Grads {
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = x.matmul_t(w)?;
    z.add_row_vector(b);
    Ok(z)
}

/// Row-wise forward pass over a `b × n_in` batch.
pub fn mlp2_forward(params: &Mlp2Params, x: &Matrix) -> Result<(Matrix, Mlp2Cache)> {
    if x.cols() != params.n_in() {
        return Err(NumError::Shape {
            op: "mlp2_forward",
            expected: format!("input width {}", params.n_in()),
            found: format!("{}x{}", x.rows(), x.cols()),
        });
    }
    let slope = params.slope;
    let z1 = affine(x, &params.w1, &params.b1)?;
    let a1 = z1.map(|z| leaky_relu(z, slope));
    let z2 = affine(&a1, &params.w2, &params.b2)?;
    let y = z2.map(|z| leaky_relu(z, slope));
    let cache = Mlp2Cache {
        x: x.clone(),
        z1,
        a1,
        z2,
    };
    Ok((y, cache))
}

/// Backpropagates `upstream = ∂L/∂y` through the cached forward pass.
/// Returns the parameter gradients and `∂L/∂x`.
pub fn mlp2_backward(
    params: &Mlp2Params,
    cache: &Mlp2Cache,
    upstream: &Matrix,
) -> Result<(Mlp2Grads, Matrix)> {
    upstream.ensure_shape("mlp2_backward", cache.z2.rows(), cache.z2.cols())?;
    let slope = params.slope;

    let mut dz2 = upstream.clone();
    for (d, z) in dz2.as_mut_slice().iter_mut().zip(cache.z2.as_slice()) {
        *d *= leaky_relu_grad(*z, slope);
    }
    let gw2 = dz2.t_matmul(&cache.a1)?;
    let gb2 = dz2.sum_rows();

    let mut dz1 = dz2.matmul(&params.w2)?;
    for (d, z) in dz1.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
        *d *= leaky_relu_grad(*z, slope);
    }
    let gw1 = dz1.t_matmul(&cache.x)?;
    let gb1 = dz1.sum_rows();
    let dx = dz1.matmul(&params.w1)?;

    Ok((
        Mlp2Grads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
        dx,
    ))
}
