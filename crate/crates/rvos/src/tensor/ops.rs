//! Differentiable tensor operations.
//!
//! Each operation validates shapes, computes its forward value eagerly, and
//! registers a backward closure that turns the output gradient into dense
//! parent gradients. Accumulation order is fixed and documented where exact
//! reproducibility matters (convolutions and matrix products accumulate over
//! the contraction index in ascending order, biases are added after the
//! accumulation), so independently written oracles can match results
//! bit-for-bit.

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let need = (self.needs_grad(), other.needs_grad());
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.to_vec());
                }
                if need.1 {
                    slots[1] = Some(g.to_vec());
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let need = (self.needs_grad(), other.needs_grad());
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.to_vec());
                }
                if need.1 {
                    slots[1] = Some(g.iter().map(|v| -v).collect());
                }
            }),
        )
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let need = (self.needs_grad(), other.needs_grad());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                }
                if need.1 {
                    slots[1] = Some(g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                }
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let need = (self.needs_grad(), other.needs_grad());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.iter().zip(b.data()).map(|(g, b)| g / b).collect());
                }
                if need.1 {
                    slots[1] = Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    );
                }
            }),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn emax(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("emax", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a.max(*b)).collect();
        let need = (self.needs_grad(), other.needs_grad());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "emax",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (a, b))| if a >= b { *g } else { 0.0 })
                            .collect(),
                    );
                }
                if need.1 {
                    slots[1] = Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (a, b))| if a >= b { 0.0 } else { *g })
                            .collect(),
                    );
                }
            }),
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn emin(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("emin", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a.min(*b)).collect();
        let need = (self.needs_grad(), other.needs_grad());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "emin",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (a, b))| if a <= b { *g } else { 0.0 })
                            .collect(),
                    );
                }
                if need.1 {
                    slots[1] = Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (a, b))| if a <= b { 0.0 } else { *g })
                            .collect(),
                    );
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`; exact for very large `x`.
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let need = self.needs_grad();
        let x = self.clone();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(
                        g.iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| sigmoid_scalar(*v)).collect();
        let need = self.needs_grad();
        let y = data.clone();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
            }),
        )
    }

    pub fn softplus(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| softplus_scalar(*v)).collect();
        let need = self.needs_grad();
        let x = self.clone();
        Tensor::from_op(
            "softplus",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(
                        g.iter().zip(x.data()).map(|(g, x)| g * sigmoid_scalar(*x)).collect(),
                    );
                }
            }),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let need = self.needs_grad();
        let y = data.clone();
        Tensor::from_op(
            "exp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.iter().zip(&y).map(|(g, y)| g * y).collect());
                }
            }),
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.abs()).collect();
        let need = self.needs_grad();
        let x = self.clone();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(
                        g.iter()
                            .zip(x.data())
                            .map(|(g, x)| {
                                if *x > 0.0 {
                                    *g
                                } else if *x < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }),
        )
    }

    pub fn recip(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| 1.0 / v).collect();
        let need = self.needs_grad();
        let y = data.clone();
        Tensor::from_op(
            "recip",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.iter().zip(&y).map(|(g, y)| -g * y * y).collect());
                }
            }),
        )
    }

    /// Elementwise power with non-negative base. Exponent 2 uses plain
    /// squaring so hand-computed fixtures reproduce exactly.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        if p == 2.0 {
            return self.mul(self);
        }
        let data: Vec<f64> = self.data().iter().map(|v| v.powf(p)).collect();
        let need = self.needs_grad();
        let x = self.clone();
        Tensor::from_op(
            "powf",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(
                        g.iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                            .collect(),
                    );
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let need = self.needs_grad();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.to_vec());
                }
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let need = self.needs_grad();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.iter().map(|g| g * c).collect());
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Broadcast operations (only the patterns the pipeline needs)
// ---------------------------------------------------------------------------

impl Tensor {
    /// `(N, C) + (C,)`: adds `v` to every row.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        expect_rank("add_row_vector", self, 2)?;
        expect_rank("add_row_vector", v, 1)?;
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if v.shape()[0] != c {
            return Err(Error::Shape {
                op: "add_row_vector",
                detail: format!("rows have {} columns, vector has {}", c, v.shape()[0]),
            });
        }
        let mut data = self.data().to_vec();
        for row in 0..n {
            for col in 0..c {
                data[row * c + col] += v.data()[col];
            }
        }
        let need = (self.needs_grad(), v.needs_grad());
        Tensor::from_op(
            "add_row_vector",
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.to_vec());
                }
                if need.1 {
                    let mut dv = vec![0.0; c];
                    for row in 0..n {
                        for col in 0..c {
                            dv[col] += g[row * c + col];
                        }
                    }
                    slots[1] = Some(dv);
                }
            }),
        )
    }

    /// `(C, H, W) * (H, W)`: multiplies every channel by the same map.
    pub fn mul_spatial(&self, map: &Tensor) -> Result<Tensor> {
        expect_rank("mul_spatial", self, 3)?;
        expect_rank("mul_spatial", map, 2)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if map.shape() != [h, w] {
            return Err(Error::Shape {
                op: "mul_spatial",
                detail: format!("feature {:?} vs map {:?}", self.shape(), map.shape()),
            });
        }
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for px in 0..hw {
                data[ch * hw + px] = self.data()[ch * hw + px] * map.data()[px];
            }
        }
        let need = (self.needs_grad(), map.needs_grad());
        let (x, m) = (self.clone(), map.clone());
        Tensor::from_op(
            "mul_spatial",
            self.shape().to_vec(),
            data,
            vec![self.clone(), map.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    let mut dx = vec![0.0; c * hw];
                    for ch in 0..c {
                        for px in 0..hw {
                            dx[ch * hw + px] = g[ch * hw + px] * m.data()[px];
                        }
                    }
                    slots[0] = Some(dx);
                }
                if need.1 {
                    let mut dm = vec![0.0; hw];
                    for ch in 0..c {
                        for px in 0..hw {
                            dm[px] += g[ch * hw + px] * x.data()[ch * hw + px];
                        }
                    }
                    slots[1] = Some(dm);
                }
            }),
        )
    }

    /// Multiplies every element by a rank-0 tensor.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar_tensor",
                detail: format!("scale must be a scalar, got {:?}", s.shape()),
            });
        }
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|v| v * sv).collect();
        let need = (self.needs_grad(), s.needs_grad());
        let x = self.clone();
        Tensor::from_op(
            "mul_scalar_tensor",
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    slots[0] = Some(g.iter().map(|g| g * sv).collect());
                }
                if need.1 {
                    let ds: f64 = g.iter().zip(x.data()).map(|(g, x)| g * x).sum();
                    slots[1] = Some(vec![ds]);
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tensor {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let need = self.needs_grad();
        Tensor::from_op(
            "sum_all",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(vec![g[0]; n]);
                }
            }),
        )
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::Shape {
                op: "mean_all",
                detail: "empty tensor".into(),
            });
        }
        self.sum_all()?.mul_scalar(1.0 / n as f64)
    }

    /// `(N, C) -> (C,)`: column means.
    pub fn mean_rows(&self) -> Result<Tensor> {
        expect_rank("mean_rows", self, 2)?;
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if n == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                detail: "zero rows".into(),
            });
        }
        let mut data = vec![0.0; c];
        for row in 0..n {
            for col in 0..c {
                data[col] += self.data()[row * c + col];
            }
        }
        let inv = 1.0 / n as f64;
        for v in &mut data {
            *v *= inv;
        }
        let need = self.needs_grad();
        Tensor::from_op(
            "mean_rows",
            vec![c],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    let mut dx = vec![0.0; n * c];
                    for row in 0..n {
                        for col in 0..c {
                            dx[row * c + col] = g[col] * inv;
                        }
                    }
                    slots[0] = Some(dx);
                }
            }),
        )
    }

    /// `(C, H, W) -> (C,)`: per-channel spatial mean.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        expect_rank("mean_spatial", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let hw = h * w;
        if hw == 0 {
            return Err(Error::Shape {
                op: "mean_spatial",
                detail: "empty spatial extent".into(),
            });
        }
        let inv = 1.0 / hw as f64;
        let mut data = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for px in 0..hw {
                acc += self.data()[ch * hw + px];
            }
            data[ch] = acc * inv;
        }
        let need = self.needs_grad();
        Tensor::from_op(
            "mean_spatial",
            vec![c],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    let mut dx = vec![0.0; c * hw];
                    for ch in 0..c {
                        for px in 0..hw {
                            dx[ch * hw + px] = g[ch] * inv;
                        }
                    }
                    slots[0] = Some(dx);
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

/// `C[m,n] += A[m,k] * B[k,n]` with the contraction index ascending per
/// output element.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `C[m,n] += A^T[m,k] * B[k,n]` where `a` is stored as `(k, m)`.
fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for kk in 0..k {
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `C[m,n] += A[m,k] * B^T[k,n]` where `b` is stored as `(n, k)`.
fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

impl Tensor {
    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        expect_rank("matmul", self, 2)?;
        expect_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_kernel(self.data(), other.data(), m, k, n, &mut data);
        let need = (self.needs_grad(), other.needs_grad());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if need.0 {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b.data()[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    slots[0] = Some(da);
                }
                if need.1 {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    matmul_at_kernel(a.data(), g, k, m, n, &mut db);
                    slots[1] = Some(db);
                }
            }),
        )
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        expect_rank("transpose2", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data()[i * n + j];
            }
        }
        let need = self.needs_grad();
        Tensor::from_op(
            "transpose2",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    slots[0] = Some(dx);
                }
            }),
        )
    }

    /// Row-wise softmax of a rank-2 tensor, numerically stabilized by the
    /// row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        expect_rank("softmax_rows", self, 2)?;
        let (n, m) = (self.shape()[0], self.shape()[1]);
        if m == 0 {
            return Err(Error::EmptyContext { op: "softmax_rows" });
        }
        let mut data = vec![0.0; n * m];
        for row in 0..n {
            let xs = &self.data()[row * m..(row + 1) * m];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, x) in data[row * m..(row + 1) * m].iter_mut().zip(xs) {
                let e = (x - mx).exp();
                *o = e;
                denom += e;
            }
            for o in data[row * m..(row + 1) * m].iter_mut() {
                *o /= denom;
            }
        }
        let need = self.needs_grad();
        let y = data.clone();
        Tensor::from_op(
            "softmax_rows",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    let mut dx = vec![0.0; n * m];
                    for row in 0..n {
                        let ys = &y[row * m..(row + 1) * m];
                        let gs = &g[row * m..(row + 1) * m];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for col in 0..m {
                            dx[row * m + col] = ys[col] * (gs[col] - dot);
                        }
                    }
                    slots[0] = Some(dx);
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        let need = self.needs_grad();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    slots[0] = Some(g.to_vec());
                }
            }),
        )
    }

    /// Contiguous slice `[offset, offset+len)` along the first axis.
    pub fn narrow0(&self, offset: usize, len: usize) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::Shape {
                op: "narrow0",
                detail: "cannot narrow a scalar".into(),
            });
        }
        let dim0 = self.shape()[0];
        if offset + len > dim0 {
            return Err(Error::Shape {
                op: "narrow0",
                detail: format!("[{offset}, {}) out of first axis length {dim0}", offset + len),
            });
        }
        let row = self.numel() / dim0.max(1);
        let data = self.data()[offset * row..(offset + len) * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let need = self.needs_grad();
        let total = self.numel();
        Tensor::from_op(
            "narrow0",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                if need {
                    let mut dx = vec![0.0; total];
                    dx[offset * row..(offset + len) * row].copy_from_slice(g);
                    slots[0] = Some(dx);
                }
            }),
        )
    }
}

/// Concatenates tensors along the first axis; trailing axes must agree.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape {
            op: "concat_channels",
            detail: "no tensors to concatenate".into(),
        });
    }
    let tail = &parts[0].shape()[1..];
    let mut dim0 = 0;
    for p in parts {
        if p.rank() == 0 || &p.shape()[1..] != tail {
            return Err(Error::Shape {
                op: "concat_channels",
                detail: format!("incompatible part shape {:?}", p.shape()),
            });
        }
        dim0 += p.shape()[0];
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = dim0;
    let mut data = Vec::with_capacity(numel_of(&shape));
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let needs: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Tensor::from_op(
        "concat_channels",
        shape,
        data,
        parts.to_vec(),
        Box::new(move |g, slots| {
            let mut at = 0;
            for (i, (&sz, &need)) in sizes.iter().zip(&needs).enumerate() {
                if need {
                    slots[i] = Some(g[at..at + sz].to_vec());
                }
                at += sz;
            }
        }),
    )
}

/// Gathers rows of a `(V, C)` table by index; gradients scatter-add back
/// into the table.
pub fn select_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    expect_rank("select_rows", table, 2)?;
    let (v, c) = (table.shape()[0], table.shape()[1]);
    for &i in indices {
        if i >= v {
            return Err(Error::Shape {
                op: "select_rows",
                detail: format!("row {i} out of table height {v}"),
            });
        }
    }
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(&table.data()[i * c..(i + 1) * c]);
    }
    let need = table.needs_grad();
    let idx = indices.to_vec();
    Tensor::from_op(
        "select_rows",
        vec![indices.len(), c],
        data,
        vec![table.clone()],
        Box::new(move |g, slots| {
            if need {
                let mut dt = vec![0.0; v * c];
                for (row, &i) in idx.iter().enumerate() {
                    for col in 0..c {
                        dt[i * c + col] += g[row * c + col];
                    }
                }
                slots[0] = Some(dt);
            }
        }),
    )
}

/// Sums same-shaped tensors element by element in ascending value order.
///
/// Sorting the addends per element makes the result invariant under any
/// permutation of the inputs, bit for bit, which keeps multi-expression
/// fusion deterministic regardless of expression order.
pub fn sorted_sum(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape {
            op: "sorted_sum",
            detail: "no tensors to sum".into(),
        });
    }
    if parts.len() == 1 {
        // Identity; still record a node so gradients flow.
        return parts[0].mul_scalar(1.0);
    }
    for p in &parts[1..] {
        same_shape("sorted_sum", &parts[0], p)?;
    }
    let n = parts[0].numel();
    let mut data = vec![0.0; n];
    let mut vals = vec![0.0; parts.len()];
    for e in 0..n {
        for (v, p) in vals.iter_mut().zip(parts) {
            *v = p.data()[e];
        }
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        data[e] = vals.iter().sum();
    }
    let needs: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
    Tensor::from_op(
        "sorted_sum",
        parts[0].shape().to_vec(),
        data,
        parts.to_vec(),
        Box::new(move |g, slots| {
            for (i, &need) in needs.iter().enumerate() {
                if need {
                    slots[i] = Some(g.to_vec());
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolutions, pooling, resampling
// ---------------------------------------------------------------------------

/// Pointwise (1x1) convolution: `(C_in, H, W) x (C_out, C_in) + (C_out,)`.
///
/// Per output pixel this is exactly the matrix-vector product
/// `out[co] = sum_ci w[co,ci] * x[ci]` with `ci` ascending, and the bias is
/// added after the accumulation — the same floating-point order as a
/// brute-force per-pixel evaluation.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("conv1x1", x, 3)?;
    expect_rank("conv1x1", weight, 2)?;
    expect_rank("conv1x1", bias, 1)?;
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ci2) = (weight.shape()[0], weight.shape()[1]);
    if ci != ci2 || bias.shape()[0] != co {
        return Err(Error::Shape {
            op: "conv1x1",
            detail: format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        });
    }
    let hw = h * w;
    let mut data = vec![0.0; co * hw];
    matmul_kernel(weight.data(), x.data(), co, ci, hw, &mut data);
    for o in 0..co {
        let b = bias.data()[o];
        for px in 0..hw {
            data[o * hw + px] += b;
        }
    }
    let need = (x.needs_grad(), weight.needs_grad(), bias.needs_grad());
    let (xc, wc) = (x.clone(), weight.clone());
    Tensor::from_op(
        "conv1x1",
        vec![co, h, w],
        data,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, slots| {
            if need.0 {
                // dX = W^T * G
                let mut dx = vec![0.0; ci * hw];
                matmul_at_kernel(wc.data(), g, ci, co, hw, &mut dx);
                slots[0] = Some(dx);
            }
            if need.1 {
                // dW = G * X^T
                let mut dw = vec![0.0; co * ci];
                matmul_bt_kernel(g, xc.data(), co, hw, ci, &mut dw);
                slots[1] = Some(dw);
            }
            if need.2 {
                let mut db = vec![0.0; co];
                for (o, db_o) in db.iter_mut().enumerate() {
                    *db_o = g[o * hw..(o + 1) * hw].iter().sum();
                }
                slots[2] = Some(db);
            }
        }),
    )
}

/// Non-overlapping strided convolution (kernel size equals stride), used by
/// the toy visual encoder. `(C_in, H, W) x (C_out, C_in, k, k) -> (C_out,
/// H/k, W/k)` with no padding, so shifting the input by `k` pixels shifts
/// the output by exactly one cell.
pub fn patch_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    expect_rank("patch_conv", x, 3)?;
    expect_rank("patch_conv", weight, 4)?;
    expect_rank("patch_conv", bias, 1)?;
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ci2, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if ci != ci2 || kh != stride || kw != stride || bias.shape()[0] != co {
        return Err(Error::Shape {
            op: "patch_conv",
            detail: format!(
                "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        });
    }
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape {
            op: "patch_conv",
            detail: format!("spatial extent {h}x{w} not divisible by stride {stride}"),
        });
    }
    let (oh, ow) = (h / stride, w / stride);
    let k = stride;
    let mut data = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for a in 0..k {
                        let xrow = (i * k + a) * w + j * k;
                        let wrow = ((o * ci + c) * k + a) * k;
                        for b in 0..k {
                            acc += weight.data()[wrow + b] * x.data()[c * h * w + xrow + b];
                        }
                    }
                }
                data[(o * oh + i) * ow + j] = acc + bias.data()[o];
            }
        }
    }
    let need = (x.needs_grad(), weight.needs_grad(), bias.needs_grad());
    let (xc, wc) = (x.clone(), weight.clone());
    Tensor::from_op(
        "patch_conv",
        vec![co, oh, ow],
        data,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, slots| {
            if need.0 {
                let mut dx = vec![0.0; ci * h * w];
                for o in 0..co {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(o * oh + i) * ow + j];
                            for c in 0..ci {
                                for a in 0..k {
                                    let xrow = (i * k + a) * w + j * k;
                                    let wrow = ((o * ci + c) * k + a) * k;
                                    for b in 0..k {
                                        dx[c * h * w + xrow + b] += gv * wc.data()[wrow + b];
                                    }
                                }
                            }
                        }
                    }
                }
                slots[0] = Some(dx);
            }
            if need.1 {
                let mut dw = vec![0.0; co * ci * k * k];
                for o in 0..co {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(o * oh + i) * ow + j];
                            for c in 0..ci {
                                for a in 0..k {
                                    let xrow = (i * k + a) * w + j * k;
                                    let wrow = ((o * ci + c) * k + a) * k;
                                    for b in 0..k {
                                        dw[wrow + b] += gv * xc.data()[c * h * w + xrow + b];
                                    }
                                }
                            }
                        }
                    }
                }
                slots[1] = Some(dw);
            }
            if need.2 {
                let mut db = vec![0.0; co];
                for (o, db_o) in db.iter_mut().enumerate() {
                    *db_o = g[o * oh * ow..(o + 1) * oh * ow].iter().sum();
                }
                slots[2] = Some(db);
            }
        }),
    )
}

/// 2x2 average pooling, the exact align-corners-false bilinear downsample by
/// a factor of two.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    expect_rank("avg_pool2", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape {
            op: "avg_pool2",
            detail: format!("spatial extent {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut data = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = ch * h * w + 2 * i * w + 2 * j;
                data[(ch * oh + i) * ow + j] =
                    0.25 * (x.data()[base] + x.data()[base + 1] + x.data()[base + w] + x.data()[base + w + 1]);
            }
        }
    }
    let need = x.needs_grad();
    Tensor::from_op(
        "avg_pool2",
        vec![c, oh, ow],
        data,
        vec![x.clone()],
        Box::new(move |g, slots| {
            if need {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = 0.25 * g[(ch * oh + i) * ow + j];
                            let base = ch * h * w + 2 * i * w + 2 * j;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                slots[0] = Some(dx);
            }
        }),
    )
}

/// Per-axis source indices and interpolation weight for a factor-2
/// align-corners-false upsample: output cell `i` samples source coordinate
/// `i/2 - 0.25`, clamped at the borders.
fn upsample2_coeffs(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|i| {
            let src = 0.5 * (i as f64 + 0.5) - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = ((floor + 1.0).max(0.0) as usize).min(n_in - 1);
            let i0 = i0.min(n_in - 1);
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear upsampling with align-corners-false semantics. Only `factor == 2`
/// is supported — the single factor the pipeline uses.
///
/// Interpolation uses the `a + t*(b - a)` form along width, then height, so
/// regions where both neighbors agree reproduce the input value exactly
/// (constant inputs stay constant bit-for-bit, and a 1x1 input replicates).
pub fn resize_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor != 2 {
        return Err(Error::Config(format!(
            "resize_bilinear supports only factor 2, got {factor}"
        )));
    }
    expect_rank("resize_bilinear", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "resize_bilinear",
            detail: "empty spatial extent".into(),
        });
    }
    let (oh, ow) = (2 * h, 2 * w);
    let ys = upsample2_coeffs(h);
    let xs = upsample2_coeffs(w);
    let mut data = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let r0 = {
                    let a = plane[y0 * w + x0];
                    let b = plane[y0 * w + x1];
                    a + tx * (b - a)
                };
                let r1 = {
                    let a = plane[y1 * w + x0];
                    let b = plane[y1 * w + x1];
                    a + tx * (b - a)
                };
                data[(ch * oh + oy) * ow + ox] = r0 + ty * (r1 - r0);
            }
        }
    }
    let need = x.needs_grad();
    let (ys_b, xs_b) = (ys, xs);
    Tensor::from_op(
        "resize_bilinear",
        vec![c, oh, ow],
        data,
        vec![x.clone()],
        Box::new(move |g, slots| {
            if need {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, ty)) in ys_b.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in xs_b.iter().enumerate() {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            dplane[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                            dplane[y0 * w + x1] += gv * (1.0 - ty) * tx;
                            dplane[y1 * w + x0] += gv * ty * (1.0 - tx);
                            dplane[y1 * w + x1] += gv * ty * tx;
                        }
                    }
                }
                slots[0] = Some(dx);
            }
        }),
    )
}
