//! Layers, activations, loss, initialization, and exact manual
//! backpropagation for one-hidden-layer MLPs and the affine+kWTA
//! combination layer.
//!
//! Gradient convention: every backward routine takes the upstream gradient
//! with respect to its own *output* and accumulates parameter gradients
//! additively, so a mini-batch can be backpropagated through several heads
//! before the optimizer consumes the buffers.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before `log` so that rows
/// degenerated by inhibition never produce `-inf` loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// One trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Matrix<F>,
    pub grad: Matrix<F>,
    pub velocity: Matrix<F>,
    pub name: &'static str,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Matrix<F>, name: &'static str) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            velocity: Matrix::zeros(r, c),
            name,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Entries uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)].
pub fn kaiming_uniform_init<F: Scalar>(
    rng: &mut Rng,
    fan_in: usize,
    rows: usize,
    cols: usize,
) -> Result<Matrix<F>> {
    if fan_in == 0 {
        return Err(Error::Domain("kaiming init requires fan_in >= 1".into()));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.uniform(-bound, bound, rows, cols)
}

/// Elementwise max(0, z).
pub fn relu_forward<F: Scalar>(z: &Matrix<F>) -> Matrix<F> {
    z.map(|v| v.max(F::zero()))
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax_row<F: Scalar>(z: &Matrix<F>) -> Matrix<F> {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient through a row-wise softmax: given dL/dp, returns dL/dz where
/// p = softmax(z). Per row: z_grad = p .* (g - <g, p>).
pub fn softmax_backward<F: Scalar>(probs: &Matrix<F>, grad_probs: &Matrix<F>) -> Result<Matrix<F>> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::Shape {
            op: "softmax_backward",
            lhs: probs.shape(),
            rhs: grad_probs.shape(),
        });
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let mut dot = F::zero();
        for (pv, gv) in p.iter().zip(g) {
            dot += *pv * *gv;
        }
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = p[j] * (g[j] - dot);
        }
    }
    Ok(out)
}

/// Boolean record of which positions survived a kWTA selection; routes the
/// backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WinnerMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl WinnerMask {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_winner(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn winners_in_row(&self, r: usize) -> usize {
        self.data[r * self.cols..(r + 1) * self.cols]
            .iter()
            .filter(|&&w| w)
            .count()
    }
}

/// Number of winners for a row of width `cols`: floor(k_frac * cols),
/// clamped to [1, cols] so at least one neuron always survives.
pub fn kwta_winner_count(cols: usize, k_frac: f64) -> usize {
    ((k_frac * cols as f64).floor() as usize).clamp(1, cols)
}

/// Row-wise k-winners-take-all: the largest entries are kept verbatim and
/// all others are set to zero. Ties at the selection boundary break toward
/// the lowest column index.
pub fn kwta_forward<F: Scalar>(z: &Matrix<F>, k_frac: f64) -> Result<(Matrix<F>, WinnerMask)> {
    if !(k_frac > 0.0 && k_frac <= 1.0) {
        return Err(Error::Domain(format!(
            "k_frac must lie in (0, 1], got {k_frac}"
        )));
    }
    if z.cols() == 0 {
        return Err(Error::Domain("kwta_forward on zero-width matrix".into()));
    }
    let n_win = kwta_winner_count(z.cols(), k_frac);
    let mut out = Matrix::zeros(z.rows(), z.cols());
    let mut mask = WinnerMask {
        rows: z.rows(),
        cols: z.cols(),
        data: vec![false; z.rows() * z.cols()],
    };
    let mut order: Vec<usize> = Vec::with_capacity(z.cols());
    for r in 0..z.rows() {
        let row = z.row(r);
        order.clear();
        order.extend(0..z.cols());
        // Descending by value; equal values keep ascending index order.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for &j in order.iter().take(n_win) {
            out.set(r, j, row[j]);
            mask.data[r * z.cols() + j] = true;
        }
    }
    Ok((out, mask))
}

/// Subgradient of kWTA: upstream passes through at winner positions and is
/// zero at loser positions.
pub fn kwta_backward<F: Scalar>(upstream: &Matrix<F>, mask: &WinnerMask) -> Result<Matrix<F>> {
    if upstream.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "kwta_backward",
            lhs: upstream.shape(),
            rhs: mask.shape(),
        });
    }
    let mut out = upstream.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(&mask.data) {
        if !w {
            *v = F::zero();
        }
    }
    Ok(out)
}

fn check_labels(cols: usize, labels: &[usize]) -> Result<()> {
    for &l in labels {
        if l >= cols {
            return Err(Error::Domain(format!(
                "label {l} out of range for {cols} classes"
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of -log(probs[i][label_i]), with probabilities
/// clamped to [`PROB_CLAMP`].
pub fn cross_entropy<F: Scalar>(probs: &Matrix<F>, labels: &[usize]) -> Result<F> {
    if probs.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "cross_entropy: {} probability rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    check_labels(probs.cols(), labels)?;
    let clamp = F::c(PROB_CLAMP);
    let mut total = F::zero();
    for (i, &label) in labels.iter().enumerate() {
        total += -probs.get(i, label).max(clamp).ln();
    }
    Ok(total / F::c(labels.len() as f64))
}

/// Gradient of [`cross_entropy`] with respect to the probabilities:
/// -1/(batch * p) at the label position, zero elsewhere. Entries already
/// below the clamp carry zero gradient, matching the clamped loss.
pub fn cross_entropy_grad<F: Scalar>(probs: &Matrix<F>, labels: &[usize]) -> Result<Matrix<F>> {
    if probs.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "cross_entropy_grad: {} probability rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    check_labels(probs.cols(), labels)?;
    let clamp = F::c(PROB_CLAMP);
    let batch = F::c(labels.len() as f64);
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.get(i, label);
        if p >= clamp {
            grad.set(i, label, -(F::one() / (batch * p)));
        }
    }
    Ok(grad)
}

/// Weights and biases of one sub-network: one hidden layer, ReLU, softmax
/// output head.
#[derive(Debug, Clone)]
pub struct MlpParams<F> {
    pub w1: Param<F>, // hidden x in
    pub b1: Param<F>, // 1 x hidden
    pub w2: Param<F>, // out x hidden
    pub b2: Param<F>, // 1 x out
}

impl<F: Scalar> MlpParams<F> {
    /// Fresh network with Kaiming-uniform weights and zero biases.
    pub fn init(rng: &mut Rng, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            w1: Param::new(kaiming_uniform_init(rng, in_dim, hidden_dim, in_dim)?, "w1"),
            b1: Param::new(Matrix::zeros(1, hidden_dim), "b1"),
            w2: Param::new(
                kaiming_uniform_init(rng, hidden_dim, out_dim, hidden_dim)?,
                "w2",
            ),
            b2: Param::new(Matrix::zeros(1, out_dim), "b2"),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.value.rows()
    }

    pub fn params(&self) -> [&Param<F>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Parameters of the affine layer that combines concatenated sub-network
/// outputs: z = yhat * wz^T + bz.
#[derive(Debug, Clone)]
pub struct CombinerParams<F> {
    pub wz: Param<F>, // out x (M * out)
    pub bz: Param<F>, // 1 x out
}

impl<F: Scalar> CombinerParams<F> {
    /// Weights uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)] (the framework
    /// default for a plain linear layer), biases zero. The tighter spread
    /// matters here: a class row that starts far below the others may never
    /// win a kWTA slot and then never receives gradient.
    pub fn init(rng: &mut Rng, subnet_count: usize, out_dim: usize) -> Result<Self> {
        let fan_in = subnet_count * out_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            wz: Param::new(rng.uniform(-bound, bound, out_dim, fan_in)?, "wz"),
            bz: Param::new(Matrix::zeros(1, out_dim), "bz"),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.wz.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.wz.value.rows()
    }
}

/// Cached activations from one [`mlp_forward`] call, consumed by
/// [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub(crate) x: Matrix<F>,     // batch x in
    pub(crate) z1: Matrix<F>,    // batch x hidden (pre-activation)
    pub(crate) a1: Matrix<F>,    // batch x hidden (post-ReLU)
    pub(crate) probs: Matrix<F>, // batch x out (softmax output)
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    pub fn probs(&self) -> &Matrix<F> {
        &self.probs
    }
}

/// Batch-major affine layer: out[i] = x[i] * w^T + b.
pub(crate) fn affine<F: Scalar>(x: &Matrix<F>, w: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    let mut z = x.matmul_nt(w)?;
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        for (v, bj) in row.iter_mut().zip(b.row(0)) {
            *v += *bj;
        }
    }
    Ok(z)
}

/// Forward pass: softmax(relu(x w1^T + b1) w2^T + b2), batch-major.
pub fn mlp_forward<F: Scalar>(
    params: &MlpParams<F>,
    x: &Matrix<F>,
) -> Result<(Matrix<F>, ForwardTrace<F>)> {
    if x.cols() != params.in_dim() {
        return Err(Error::Shape {
            op: "mlp_forward",
            lhs: x.shape(),
            rhs: params.w1.value.shape(),
        });
    }
    let z1 = affine(x, &params.w1.value, &params.b1.value)?;
    let a1 = relu_forward(&z1);
    let z2 = affine(&a1, &params.w2.value, &params.b2.value)?;
    let probs = softmax_row(&z2);
    let trace = ForwardTrace {
        x: x.clone(),
        z1,
        a1,
        probs: probs.clone(),
    };
    Ok((probs, trace))
}

/// Exact gradients of the traced computation. `grad_probs` is dL/d(probs);
/// parameter gradients accumulate into the buffers and dL/dx is returned.
pub fn mlp_backward<F: Scalar>(
    params: &mut MlpParams<F>,
    trace: &ForwardTrace<F>,
    grad_probs: &Matrix<F>,
) -> Result<Matrix<F>> {
    Ok(mlp_backward_impl(params, trace, grad_probs, true)?.expect("input grad requested"))
}

/// Same as [`mlp_backward`] but optionally skips the dL/dx product, which
/// is the single largest matmul when the input is a wide data batch.
pub fn mlp_backward_impl<F: Scalar>(
    params: &mut MlpParams<F>,
    trace: &ForwardTrace<F>,
    grad_probs: &Matrix<F>,
    want_input_grad: bool,
) -> Result<Option<Matrix<F>>> {
    if trace.x.cols() != params.in_dim()
        || trace.a1.cols() != params.hidden_dim()
        || trace.probs.cols() != params.out_dim()
    {
        return Err(Error::Contract(format!(
            "mlp_backward: trace shapes {:?}/{:?}/{:?} do not match parameters of a {}-{}-{} network",
            trace.x.shape(),
            trace.a1.shape(),
            trace.probs.shape(),
            params.in_dim(),
            params.hidden_dim(),
            params.out_dim()
        )));
    }
    if grad_probs.shape() != trace.probs.shape() {
        return Err(Error::Shape {
            op: "mlp_backward",
            lhs: grad_probs.shape(),
            rhs: trace.probs.shape(),
        });
    }

    // Through the output softmax.
    let dz2 = softmax_backward(&trace.probs, grad_probs)?;

    // Output layer: w2 (out x hidden), dz2 (batch x out), a1 (batch x hidden).
    params.w2.grad.add_assign(&dz2.matmul_tn(&trace.a1)?)?;
    params.b2.grad.add_assign(&dz2.col_sums())?;

    // Into the hidden layer.
    let mut dz1 = dz2.matmul(&params.w2.value)?;
    for (v, &z) in dz1.data_mut().iter_mut().zip(trace.z1.data()) {
        if z <= F::zero() {
            *v = F::zero();
        }
    }

    params.w1.grad.add_assign(&dz1.matmul_tn(&trace.x)?)?;
    params.b1.grad.add_assign(&dz1.col_sums())?;

    if want_input_grad {
        Ok(Some(dz1.matmul(&params.w1.value)?))
    } else {
        Ok(None)
    }
}
