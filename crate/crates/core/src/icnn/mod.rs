//! Input-convex neural networks for learned transport potentials.
//!
//! The conditioning map is parameterized as the x-gradient of a scalar
//! potential `f(x, y)` that is convex in `x` for every fixed `y`. Convexity is
//! enforced architecturally: hidden-to-hidden weights on the convex path are
//! constrained nonnegative and every activation on that path is convex and
//! non-decreasing, so each layer output is a nonnegative combination of convex
//! functions of `x` composed with monotone convex maps.
//!
//! Two architectures are provided:
//!
//! * [`SingleLayerIcnn`] — the workhorse used by the demos,
//!   `f(x, y) = Σ_k w_k (wx_k·x + wy_k·y + b_k)₊²` with `w_k ≥ 0`. Its
//!   parameter gradients are short closed forms, hand-coded for speed.
//! * [`DeepIcnn`] — the general two-track recursion with a convex `z`-track in
//!   `x` and an unconstrained `u`-track in `y`. Parameter gradients of both the
//!   value and the directional map derivative are computed by reverse-mode
//!   sweeps over the stored forward pass (reverse-over-forward for the latter).
//!
//! Both implement [`Potential`], so they plug into
//! [`transport`](crate::variational::transport) and
//! [`minmax_objective`](crate::icnn::train::minmax_objective) interchangeably
//! with the quadratic family.
//!
//! Activations use the subgradient-zero convention at kinks: derivative
//! callbacks return 0 exactly at the kink, so gradients are well-defined
//! everywhere even though the map is only piecewise smooth.

mod adam;
mod checkpoint;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{
    minmax_objective, train, write_loss_trace, TraceRow, TrainConfig, TrainOutput,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::variational::Potential;
use crate::{Error, Result};

/// Scalar activation for network layers.
///
/// Every variant is convex and non-decreasing, so any of them is admissible on
/// the convexity-carrying `z`-track; the enum deliberately contains nothing
/// else. Derivatives at the ReLU kink use the subgradient 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `t ↦ max(t, 0)²` — smooth (C¹), used on the input layer.
    SquaredRelu,
    /// `t ↦ max(t, 0)`.
    Relu,
    /// `t ↦ t`.
    Identity,
}

impl Activation {
    /// Activation value.
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::SquaredRelu => {
                let p = t.max(0.0);
                p * p
            }
            Activation::Relu => t.max(0.0),
            Activation::Identity => t,
        }
    }

    /// First derivative (subgradient 0 at kinks).
    pub fn d1(self, t: f64) -> f64 {
        match self {
            Activation::SquaredRelu => 2.0 * t.max(0.0),
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative (0 at kinks and wherever undefined).
    pub fn d2(self, t: f64) -> f64 {
        match self {
            Activation::SquaredRelu => {
                if t > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    /// Stable name used by the checkpoint format.
    pub fn name(self) -> &'static str {
        match self {
            Activation::SquaredRelu => "squared-relu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    /// Inverse of [`Activation::name`].
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "squared-relu" => Ok(Activation::SquaredRelu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Checkpoint {
                context: format!("unknown activation `{other}`"),
            }),
        }
    }
}

/// Network shape selector for [`train`] and the checkpoint format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IcnnArchitecture {
    /// One hidden layer of squared-ReLU units with nonnegative output weights.
    SingleLayer {
        /// Number of hidden units.
        units: usize,
    },
    /// Two-track network; `hidden` lists the z-track widths before the final
    /// scalar layer.
    Deep {
        /// Hidden z-track widths, e.g. `[32, 32]`.
        hidden: Vec<usize>,
    },
}

/// Common interface the optimizer needs: a potential with a flat parameter
/// vector, parameter gradients of the value and of directional derivatives of
/// its map, and a projection onto the convexity constraint set.
///
/// The flat layout is an implementation detail of each architecture, but it is
/// fixed and shared by [`params`](TrainableIcnn::params),
/// [`add_scaled`](TrainableIcnn::add_scaled) and the two accumulators, which
/// is what the finite-difference tests below pin down.
pub trait TrainableIcnn: Potential {
    /// Total number of scalar parameters.
    fn param_count(&self) -> usize;

    /// Flatten all parameters into one vector.
    fn params(&self) -> Vec<f64>;

    /// In-place update `θ ← θ + scale · delta` in flat coordinates.
    fn add_scaled(&mut self, delta: &[f64], scale: f64);

    /// Project onto the constraint set by clamping nonnegativity-constrained
    /// weights at zero. Call after every gradient update.
    fn project(&mut self);

    /// Accumulate `weight · ∂f(x, y)/∂θ` into `out`.
    fn accumulate_value_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()>;

    /// Accumulate `weight · ∂[∇ₓf(x, y)ᵀ r]/∂θ` into `out`.
    ///
    /// This is the parameter gradient of the map evaluated against a fixed
    /// direction `r`, the quantity the inner maximization differentiates.
    fn accumulate_map_dot_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        r: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()>;
}

// ---------------------------------------------------------------------------
// Single hidden layer
// ---------------------------------------------------------------------------

/// `f(x, y) = Σ_k w_k (wx_k·x + wy_k·y + b_k)₊²` with `w_k ≥ 0`.
///
/// Convex in `x` for every `y`: each unit is the square of a positive part of
/// an affine function, hence convex, and the sum has nonnegative weights.
/// Flat parameter order: `[w | wx row-major | wy row-major | bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleLayerIcnn {
    w: DVector<f64>,
    wx: DMatrix<f64>,
    wy: DMatrix<f64>,
    bias: DVector<f64>,
}

impl SingleLayerIcnn {
    /// Build from explicit tensors, validating shapes, finiteness and the
    /// nonnegativity of `w`.
    pub fn new(
        w: DVector<f64>,
        wx: DMatrix<f64>,
        wy: DMatrix<f64>,
        bias: DVector<f64>,
    ) -> Result<Self> {
        let units = w.len();
        if units == 0 {
            return Err(Error::InvalidConfig {
                context: "single-layer network needs at least one unit".into(),
            });
        }
        if wx.nrows() != units || wy.nrows() != units || bias.len() != units {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "unit count mismatch: w has {units}, wx {}, wy {}, bias {}",
                    wx.nrows(),
                    wy.nrows(),
                    bias.len()
                ),
            });
        }
        if wx.ncols() == 0 {
            return Err(Error::InvalidConfig {
                context: "state dimension must be positive".into(),
            });
        }
        crate::ensure_finite_slice(w.as_slice(), "single-layer weights")?;
        crate::ensure_finite_slice(wx.as_slice(), "single-layer weights")?;
        crate::ensure_finite_slice(wy.as_slice(), "single-layer weights")?;
        crate::ensure_finite_slice(bias.as_slice(), "single-layer weights")?;
        let net = Self { w, wx, wy, bias };
        net.check_convexity()?;
        Ok(net)
    }

    /// Random initialization: `wx, wy, bias ~ N(0, 1)·K^{-1/2}` and
    /// `w = |N(0, 1)|·K^{-1}`, so unit pre-activations and the summed output
    /// stay O(1) as the width `K` grows.
    pub fn init<R: Rng>(units: usize, dim_x: usize, dim_y: usize, rng: &mut R) -> Result<Self> {
        if units == 0 || dim_x == 0 {
            return Err(Error::InvalidConfig {
                context: "single-layer init needs units ≥ 1 and dim_x ≥ 1".into(),
            });
        }
        let k = units as f64;
        let scale = k.sqrt().recip();
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let wx = DMatrix::from_fn(units, dim_x, |_, _| normal() * scale);
        let wy = DMatrix::from_fn(units, dim_y, |_, _| normal() * scale);
        let bias = DVector::from_fn(units, |_, _| normal() * scale);
        let w = DVector::from_fn(units, |_, _| normal().abs() / k);
        Self::new(w, wx, wy, bias)
    }

    /// Number of hidden units.
    pub fn units(&self) -> usize {
        self.w.len()
    }

    /// State dimension `n`.
    pub fn dim_x(&self) -> usize {
        self.wx.ncols()
    }

    /// Observation dimension `m`.
    pub fn dim_y(&self) -> usize {
        self.wy.ncols()
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
        vec![
            ("w", self.w.len(), 1, self.w.as_slice().to_vec()),
            ("wx", self.wx.nrows(), self.wx.ncols(), row_major(&self.wx)),
            ("wy", self.wy.nrows(), self.wy.ncols(), row_major(&self.wy)),
            ("bias", self.bias.len(), 1, self.bias.as_slice().to_vec()),
        ]
    }

    fn check_convexity(&self) -> Result<()> {
        if let Some(k) = (0..self.w.len()).find(|&k| self.w[k] < 0.0) {
            return Err(Error::ConvexityViolated {
                context: format!("output weight w[{k}] = {} is negative", self.w[k]),
            });
        }
        Ok(())
    }

    fn check_point(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim_x() || y.len() != self.dim_y() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "network expects x ∈ R^{}, y ∈ R^{}; got x ∈ R^{}, y ∈ R^{}",
                    self.dim_x(),
                    self.dim_y(),
                    x.len(),
                    y.len()
                ),
            });
        }
        self.check_convexity()
    }

    /// Pre-activations `s_k = wx_k·x + wy_k·y + b_k`.
    fn preactivations(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut s = self.bias.clone();
        s.gemv(1.0, &self.wx, x, 1.0);
        s.gemv(1.0, &self.wy, y, 1.0);
        s
    }

    // Flat layout offsets: [w | wx | wy | bias].
    fn off_wx(&self) -> usize {
        self.units()
    }

    fn off_wy(&self) -> usize {
        self.off_wx() + self.units() * self.dim_x()
    }

    fn off_bias(&self) -> usize {
        self.off_wy() + self.units() * self.dim_y()
    }
}

impl Potential for SingleLayerIcnn {
    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_point(x, y)?;
        let s = self.preactivations(x, y);
        let mut total = 0.0;
        for k in 0..self.units() {
            let p = s[k].max(0.0);
            total += self.w[k] * p * p;
        }
        Ok(total)
    }

    fn grad_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x, y)?;
        let s = self.preactivations(x, y);
        let mut grad = DVector::zeros(self.dim_x());
        for k in 0..self.units() {
            let c = self.w[k] * 2.0 * s[k].max(0.0);
            if c != 0.0 {
                grad.axpy(c, &self.wx.row(k).transpose(), 1.0);
            }
        }
        Ok(grad)
    }
}

impl TrainableIcnn for SingleLayerIcnn {
    fn param_count(&self) -> usize {
        self.units() * (2 + self.dim_x() + self.dim_y())
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(self.w.as_slice());
        for k in 0..self.units() {
            for j in 0..self.dim_x() {
                flat.push(self.wx[(k, j)]);
            }
        }
        for k in 0..self.units() {
            for j in 0..self.dim_y() {
                flat.push(self.wy[(k, j)]);
            }
        }
        flat.extend_from_slice(self.bias.as_slice());
        flat
    }

    fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.param_count(), "flat update length");
        let (n, m, units) = (self.dim_x(), self.dim_y(), self.units());
        let (off_wx, off_wy, off_b) = (self.off_wx(), self.off_wy(), self.off_bias());
        for k in 0..units {
            self.w[k] += scale * delta[k];
            for j in 0..n {
                self.wx[(k, j)] += scale * delta[off_wx + k * n + j];
            }
            for j in 0..m {
                self.wy[(k, j)] += scale * delta[off_wy + k * m + j];
            }
            self.bias[k] += scale * delta[off_b + k];
        }
    }

    fn project(&mut self) {
        for k in 0..self.units() {
            if self.w[k] < 0.0 {
                self.w[k] = 0.0;
            }
        }
    }

    fn accumulate_value_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_point(x, y)?;
        assert_eq!(out.len(), self.param_count(), "flat gradient length");
        let (n, m) = (self.dim_x(), self.dim_y());
        let (off_wx, off_wy, off_b) = (self.off_wx(), self.off_wy(), self.off_bias());
        let s = self.preactivations(x, y);
        for k in 0..self.units() {
            let p = s[k].max(0.0);
            out[k] += weight * p * p;
            // d/d(unit affine parameters) routes through σ'(s_k) = 2 s_k₊.
            let c = weight * self.w[k] * 2.0 * p;
            if c == 0.0 {
                continue;
            }
            for j in 0..n {
                out[off_wx + k * n + j] += c * x[j];
            }
            for j in 0..m {
                out[off_wy + k * m + j] += c * y[j];
            }
            out[off_b + k] += c;
        }
        Ok(())
    }

    fn accumulate_map_dot_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        r: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_point(x, y)?;
        if r.len() != self.dim_x() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "direction has dimension {}, expected {}",
                    r.len(),
                    self.dim_x()
                ),
            });
        }
        assert_eq!(out.len(), self.param_count(), "flat gradient length");
        let (n, m) = (self.dim_x(), self.dim_y());
        let (off_wx, off_wy, off_b) = (self.off_wx(), self.off_wy(), self.off_bias());
        let s = self.preactivations(x, y);
        // ∇ₓf·r = Σ_k w_k σ'(s_k) (wx_k·r) with σ(t) = t₊², σ' = 2t₊, σ'' = 2·1{t>0}.
        for k in 0..self.units() {
            let p = s[k].max(0.0);
            let d1 = 2.0 * p;
            let d2 = if s[k] > 0.0 { 2.0 } else { 0.0 };
            let wxr: f64 = (0..n).map(|j| self.wx[(k, j)] * r[j]).sum();
            out[k] += weight * d1 * wxr;
            let c_kink = weight * self.w[k] * d2 * wxr;
            let c_lin = weight * self.w[k] * d1;
            for j in 0..n {
                out[off_wx + k * n + j] += c_kink * x[j] + c_lin * r[j];
            }
            if c_kink != 0.0 {
                for j in 0..m {
                    out[off_wy + k * m + j] += c_kink * y[j];
                }
                out[off_b + k] += c_kink;
            }
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut flat = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            flat.push(m[(i, j)]);
        }
    }
    flat
}

// ---------------------------------------------------------------------------
// General two-track architecture
// ---------------------------------------------------------------------------

/// One layer of the convexity-carrying z-track:
/// `z_{l+1} = σ_l(W^z_l z_l + W^u_l u_l + W^x_l x + b_l)`.
///
/// For layer 0 the `wz` block is empty (`rows × 0`). For `l ≥ 1` every entry
/// of `wz` must be nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ZLayer {
    /// Nonnegative recurrence weights on the previous z (empty on layer 0).
    pub wz: DMatrix<f64>,
    /// Weights on the observation track value `u_l`.
    pub wu: DMatrix<f64>,
    /// Direct weights on the state `x`.
    pub wx: DMatrix<f64>,
    /// Bias.
    pub b: DVector<f64>,
    /// Layer activation; must be convex and non-decreasing, which every
    /// [`Activation`] variant is.
    pub act: Activation,
}

/// One layer of the unconstrained observation track:
/// `u_{l+1} = σ̃_l(W̃_l u_l + b̃_l)` with `u_0 = y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ULayer {
    /// Track weights (unconstrained).
    pub wt: DMatrix<f64>,
    /// Track bias.
    pub bt: DVector<f64>,
    /// Track activation (unconstrained).
    pub act: Activation,
}

/// General input-convex network with `L` z-layers and `L − 1` u-layers.
///
/// The final z-layer has a single output row; [`Potential::eval`] returns it.
/// Flat parameter order: z-layers in depth order with tensors
/// `[wz | wu | wx | b]` (row-major), then u-layers with `[wt | bt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepIcnn {
    z_layers: Vec<ZLayer>,
    u_layers: Vec<ULayer>,
    dim_x: usize,
    dim_y: usize,
}

/// Stored forward pass of a [`DeepIcnn`]: layer inputs and pre-activations,
/// reused by the reverse sweeps.
struct DeepCache {
    /// `us[l]` = u-track value consumed by z-layer `l` (`us[0] = y`).
    us: Vec<DVector<f64>>,
    /// `ts[j]` = pre-activation of u-layer `j`.
    ts: Vec<DVector<f64>>,
    /// `zs[l]` = z-track input to layer `l` (`zs[0]` empty).
    zs: Vec<DVector<f64>>,
    /// `ss[l]` = pre-activation of z-layer `l`.
    ss: Vec<DVector<f64>>,
}

impl DeepIcnn {
    /// Build from explicit layers, validating shape consistency, finiteness,
    /// scalar output and nonnegativity of the z-recurrence weights.
    pub fn new(z_layers: Vec<ZLayer>, u_layers: Vec<ULayer>, dim_x: usize) -> Result<Self> {
        if z_layers.is_empty() {
            return Err(Error::InvalidConfig {
                context: "network needs at least one z-layer".into(),
            });
        }
        if u_layers.len() + 1 != z_layers.len() {
            return Err(Error::InvalidConfig {
                context: format!(
                    "{} z-layers require {} u-layers, got {}",
                    z_layers.len(),
                    z_layers.len() - 1,
                    u_layers.len()
                ),
            });
        }
        if dim_x == 0 {
            return Err(Error::InvalidConfig {
                context: "state dimension must be positive".into(),
            });
        }
        let dim_y = z_layers[0].wu.ncols();
        let net = Self {
            z_layers,
            u_layers,
            dim_x,
            dim_y,
        };
        net.validate()?;
        Ok(net)
    }

    /// Random initialization with z-track widths `hidden` followed by the
    /// scalar output layer. Layer 0 uses squared ReLU, intermediate layers
    /// ReLU and the output layer the identity; the u-track starts as the
    /// identity map on `y` (`W̃ = I`, `b̃ = 0`) so the observation enters every
    /// level undistorted until training reshapes it.
    ///
    /// Affine blocks draw `N(0, 1)·fan_in^{-1/2}` entries; the constrained
    /// `wz` blocks draw `|N(0, 1)|·fan_in^{-1}` so the positive recurrence
    /// does not inflate magnitudes with depth.
    pub fn init<R: Rng>(dim_x: usize, dim_y: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig {
                context: "hidden widths must be positive".into(),
            });
        }
        let mut widths = Vec::with_capacity(hidden.len() + 1);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let depth = widths.len();
        let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };

        let mut z_layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let rows = widths[l];
            let prev = if l == 0 { 0 } else { widths[l - 1] };
            let fan_in = (prev + dim_x + dim_y).max(1) as f64;
            let scale = fan_in.sqrt().recip();
            let wz = DMatrix::from_fn(rows, prev, |_, _| normal(rng).abs() / fan_in);
            let wu = DMatrix::from_fn(rows, dim_y, |_, _| normal(rng) * scale);
            let wx = DMatrix::from_fn(rows, dim_x, |_, _| normal(rng) * scale);
            let b = DVector::from_fn(rows, |_, _| normal(rng) * scale);
            let act = if l == 0 {
                Activation::SquaredRelu
            } else if l + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            };
            z_layers.push(ZLayer { wz, wu, wx, b, act });
        }
        let u_layers = (0..depth - 1)
            .map(|_| ULayer {
                wt: DMatrix::identity(dim_y, dim_y),
                bt: DVector::zeros(dim_y),
                act: Activation::Identity,
            })
            .collect();
        Self::new(z_layers, u_layers, dim_x)
    }

    /// Z-track widths including the final scalar layer.
    pub fn widths(&self) -> Vec<usize> {
        self.z_layers.iter().map(|l| l.b.len()).collect()
    }

    /// State dimension `n`.
    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    /// Observation dimension `m`.
    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    /// Immutable layer access for serialization.
    pub fn layers(&self) -> (&[ZLayer], &[ULayer]) {
        (&self.z_layers, &self.u_layers)
    }

    fn validate(&self) -> Result<()> {
        let depth = self.z_layers.len();
        let mut u_dim = self.dim_y;
        let mut prev_rows = 0usize;
        for (l, layer) in self.z_layers.iter().enumerate() {
            let rows = layer.b.len();
            if rows == 0 {
                return Err(Error::InvalidConfig {
                    context: format!("z-layer {l} has zero width"),
                });
            }
            let want_prev = if l == 0 { 0 } else { prev_rows };
            if layer.wz.nrows() != rows && !(l == 0 && layer.wz.is_empty()) {
                return Err(Error::DimensionMismatch {
                    context: format!("z-layer {l}: wz row count {}", layer.wz.nrows()),
                });
            }
            if layer.wz.ncols() != want_prev {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "z-layer {l}: wz has {} columns, expected {want_prev}",
                        layer.wz.ncols()
                    ),
                });
            }
            if layer.wu.nrows() != rows || layer.wu.ncols() != u_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("z-layer {l}: wu shape {}×{}", layer.wu.nrows(), layer.wu.ncols()),
                });
            }
            if layer.wx.nrows() != rows || layer.wx.ncols() != self.dim_x {
                return Err(Error::DimensionMismatch {
                    context: format!("z-layer {l}: wx shape {}×{}", layer.wx.nrows(), layer.wx.ncols()),
                });
            }
            for v in layer.wz.iter().chain(layer.wu.iter()).chain(layer.wx.iter()) {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("z-layer {l} weights"),
                    });
                }
            }
            crate::ensure_finite_slice(layer.b.as_slice(), "z-layer bias")?;
            if l > 0 {
                if let Some(neg) = layer.wz.iter().find(|v| **v < 0.0) {
                    return Err(Error::ConvexityViolated {
                        context: format!("z-layer {l} recurrence weight {neg} is negative"),
                    });
                }
            }
            if l + 1 < depth {
                let u_layer = &self.u_layers[l];
                if u_layer.wt.ncols() != u_dim || u_layer.wt.nrows() != u_layer.bt.len() {
                    return Err(Error::DimensionMismatch {
                        context: format!(
                            "u-layer {l}: wt shape {}×{} with bias length {}",
                            u_layer.wt.nrows(),
                            u_layer.wt.ncols(),
                            u_layer.bt.len()
                        ),
                    });
                }
                for v in u_layer.wt.iter() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("u-layer {l} weights"),
                        });
                    }
                }
                crate::ensure_finite_slice(u_layer.bt.as_slice(), "u-layer bias")?;
                u_dim = u_layer.bt.len();
            }
            prev_rows = rows;
        }
        if prev_rows != 1 {
            return Err(Error::InvalidConfig {
                context: format!("final z-layer must be scalar, has width {prev_rows}"),
            });
        }
        Ok(())
    }

    fn check_point(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim_x || y.len() != self.dim_y {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "network expects x ∈ R^{}, y ∈ R^{}; got x ∈ R^{}, y ∈ R^{}",
                    self.dim_x,
                    self.dim_y,
                    x.len(),
                    y.len()
                ),
            });
        }
        self.validate()
    }

    /// Forward pass storing everything the reverse sweeps need.
    fn forward(&self, x: &DVector<f64>, y: &DVector<f64>) -> DeepCache {
        let depth = self.z_layers.len();
        let mut us = Vec::with_capacity(depth);
        let mut ts = Vec::with_capacity(depth - 1);
        us.push(y.clone());
        for u_layer in &self.u_layers {
            let t = &u_layer.wt * us.last().expect("u-track nonempty") + &u_layer.bt;
            us.push(t.map(|v| u_layer.act.apply(v)));
            ts.push(t);
        }
        let mut zs = Vec::with_capacity(depth);
        let mut ss = Vec::with_capacity(depth);
        zs.push(DVector::zeros(0));
        for (l, layer) in self.z_layers.iter().enumerate() {
            let mut s = layer.b.clone();
            if l > 0 {
                s.gemv(1.0, &layer.wz, &zs[l], 1.0);
            }
            s.gemv(1.0, &layer.wu, &us[l], 1.0);
            s.gemv(1.0, &layer.wx, x, 1.0);
            if l + 1 < depth {
                zs.push(s.map(|v| layer.act.apply(v)));
            }
            ss.push(s);
        }
        DeepCache { us, ts, zs, ss }
    }

    /// Flat slice lengths per z-layer tensor block, in flatten order.
    fn z_block_len(layer: &ZLayer) -> usize {
        layer.wz.len() + layer.wu.len() + layer.wx.len() + layer.b.len()
    }
}

impl Potential for DeepIcnn {
    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_point(x, y)?;
        let cache = self.forward(x, y);
        let last = self.z_layers.len() - 1;
        Ok(self.z_layers[last].act.apply(cache.ss[last][0]))
    }

    fn grad_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x, y)?;
        let cache = self.forward(x, y);
        // Reverse sweep: λ_{l} = ∂f/∂z_l; every layer also feeds x directly.
        let mut grad = DVector::zeros(self.dim_x);
        let mut lambda = DVector::from_element(1, 1.0);
        for l in (0..self.z_layers.len()).rev() {
            let layer = &self.z_layers[l];
            let ds = DVector::from_fn(lambda.len(), |i, _| lambda[i] * layer.act.d1(cache.ss[l][i]));
            grad.gemv_tr(1.0, &layer.wx, &ds, 1.0);
            if l > 0 {
                let mut next = DVector::zeros(layer.wz.ncols());
                next.gemv_tr(1.0, &layer.wz, &ds, 0.0);
                lambda = next;
            }
        }
        Ok(grad)
    }
}

impl TrainableIcnn for DeepIcnn {
    fn param_count(&self) -> usize {
        let z: usize = self.z_layers.iter().map(DeepIcnn::z_block_len).sum();
        let u: usize = self
            .u_layers
            .iter()
            .map(|l| l.wt.len() + l.bt.len())
            .sum();
        z + u
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.z_layers {
            flat.extend(row_major(&layer.wz));
            flat.extend(row_major(&layer.wu));
            flat.extend(row_major(&layer.wx));
            flat.extend_from_slice(layer.b.as_slice());
        }
        for layer in &self.u_layers {
            flat.extend(row_major(&layer.wt));
            flat.extend_from_slice(layer.bt.as_slice());
        }
        flat
    }

    fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.param_count(), "flat update length");
        let mut off = 0;
        let add_matrix = |m: &mut DMatrix<f64>, off: &mut usize| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] += scale * delta[*off];
                    *off += 1;
                }
            }
        };
        for layer in &mut self.z_layers {
            add_matrix(&mut layer.wz, &mut off);
            add_matrix(&mut layer.wu, &mut off);
            add_matrix(&mut layer.wx, &mut off);
            for i in 0..layer.b.len() {
                layer.b[i] += scale * delta[off];
                off += 1;
            }
        }
        for layer in &mut self.u_layers {
            add_matrix(&mut layer.wt, &mut off);
            for i in 0..layer.bt.len() {
                layer.bt[i] += scale * delta[off];
                off += 1;
            }
        }
        debug_assert_eq!(off, delta.len());
    }

    fn project(&mut self) {
        for layer in self.z_layers.iter_mut().skip(1) {
            for v in layer.wz.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    fn accumulate_value_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_point(x, y)?;
        assert_eq!(out.len(), self.param_count(), "flat gradient length");
        let cache = self.forward(x, y);
        let depth = self.z_layers.len();

        // z-track reverse sweep; ν_l collects the adjoint of u_l.
        let mut nus: Vec<DVector<f64>> =
            cache.us.iter().map(|u| DVector::zeros(u.len())).collect();
        let mut z_offsets = Vec::with_capacity(depth);
        let mut off = 0;
        for layer in &self.z_layers {
            z_offsets.push(off);
            off += DeepIcnn::z_block_len(layer);
        }
        let u_base = off;

        let mut lambda = DVector::from_element(1, 1.0);
        for l in (0..depth).rev() {
            let layer = &self.z_layers[l];
            let ds = DVector::from_fn(lambda.len(), |i, _| lambda[i] * layer.act.d1(cache.ss[l][i]));
            let mut pos = z_offsets[l];
            // wz block (row-major), then wu, wx, b — same order as params().
            for i in 0..layer.wz.nrows() {
                for j in 0..layer.wz.ncols() {
                    out[pos] += weight * ds[i] * cache.zs[l][j];
                    pos += 1;
                }
            }
            for i in 0..layer.wu.nrows() {
                for j in 0..layer.wu.ncols() {
                    out[pos] += weight * ds[i] * cache.us[l][j];
                    pos += 1;
                }
            }
            for i in 0..layer.wx.nrows() {
                for j in 0..layer.wx.ncols() {
                    out[pos] += weight * ds[i] * x[j];
                    pos += 1;
                }
            }
            for i in 0..layer.b.len() {
                out[pos] += weight * ds[i];
                pos += 1;
            }
            nus[l].gemv_tr(1.0, &layer.wu, &ds, 1.0);
            if l > 0 {
                let mut next = DVector::zeros(layer.wz.ncols());
                next.gemv_tr(1.0, &layer.wz, &ds, 0.0);
                lambda = next;
            }
        }

        // u-track reverse sweep, consuming the collected ν adjoints from the
        // deepest usage down to u_0 = y.
        let mut u_offsets = Vec::with_capacity(self.u_layers.len());
        let mut pos = u_base;
        for layer in &self.u_layers {
            u_offsets.push(pos);
            pos += layer.wt.len() + layer.bt.len();
        }
        for j in (0..self.u_layers.len()).rev() {
            let layer = &self.u_layers[j];
            let nu = nus[j + 1].clone();
            let dt = DVector::from_fn(nu.len(), |i, _| nu[i] * layer.act.d1(cache.ts[j][i]));
            let mut pos = u_offsets[j];
            for i in 0..layer.wt.nrows() {
                for jj in 0..layer.wt.ncols() {
                    out[pos] += weight * dt[i] * cache.us[j][jj];
                    pos += 1;
                }
            }
            for i in 0..layer.bt.len() {
                out[pos] += weight * dt[i];
                pos += 1;
            }
            nus[j].gemv_tr(1.0, &layer.wt, &dt, 1.0);
        }
        Ok(())
    }

    fn accumulate_map_dot_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        r: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_point(x, y)?;
        if r.len() != self.dim_x {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "direction has dimension {}, expected {}",
                    r.len(),
                    self.dim_x
                ),
            });
        }
        assert_eq!(out.len(), self.param_count(), "flat gradient length");
        let cache = self.forward(x, y);
        let depth = self.z_layers.len();

        // Forward tangent in direction r (u-track does not depend on x):
        // ṡ_l = W^z_l ż_l + W^x_l r, ż_{l+1} = σ'(s_l) ⊙ ṡ_l, and the target
        // scalar is h = ż_L = ∇ₓf·r.
        let mut z_dots: Vec<DVector<f64>> = Vec::with_capacity(depth);
        let mut s_dots: Vec<DVector<f64>> = Vec::with_capacity(depth);
        z_dots.push(DVector::zeros(0));
        for (l, layer) in self.z_layers.iter().enumerate() {
            let mut s_dot = DVector::zeros(layer.b.len());
            if l > 0 {
                s_dot.gemv(1.0, &layer.wz, &z_dots[l], 0.0);
            }
            s_dot.gemv(1.0, &layer.wx, r, 1.0);
            if l + 1 < depth {
                let z_dot =
                    DVector::from_fn(s_dot.len(), |i, _| layer.act.d1(cache.ss[l][i]) * s_dot[i]);
                z_dots.push(z_dot);
            }
            s_dots.push(s_dot);
        }

        // Reverse sweep over the augmented (value, tangent) system. λ is the
        // adjoint of z_l, μ of ż_l; σ'' terms couple the tangent back into the
        // primal adjoint.
        let mut nus: Vec<DVector<f64>> =
            cache.us.iter().map(|u| DVector::zeros(u.len())).collect();
        let mut z_offsets = Vec::with_capacity(depth);
        let mut off = 0;
        for layer in &self.z_layers {
            z_offsets.push(off);
            off += DeepIcnn::z_block_len(layer);
        }
        let u_base = off;

        let mut lambda = DVector::from_element(1, 0.0);
        let mut mu = DVector::from_element(1, 1.0);
        for l in (0..depth).rev() {
            let layer = &self.z_layers[l];
            let ds = DVector::from_fn(lambda.len(), |i, _| {
                lambda[i] * layer.act.d1(cache.ss[l][i])
                    + mu[i] * layer.act.d2(cache.ss[l][i]) * s_dots[l][i]
            });
            let ds_dot = DVector::from_fn(mu.len(), |i, _| mu[i] * layer.act.d1(cache.ss[l][i]));
            let mut pos = z_offsets[l];
            for i in 0..layer.wz.nrows() {
                for j in 0..layer.wz.ncols() {
                    out[pos] += weight * (ds[i] * cache.zs[l][j] + ds_dot[i] * z_dots[l][j]);
                    pos += 1;
                }
            }
            for i in 0..layer.wu.nrows() {
                for j in 0..layer.wu.ncols() {
                    out[pos] += weight * ds[i] * cache.us[l][j];
                    pos += 1;
                }
            }
            for i in 0..layer.wx.nrows() {
                for j in 0..layer.wx.ncols() {
                    out[pos] += weight * (ds[i] * x[j] + ds_dot[i] * r[j]);
                    pos += 1;
                }
            }
            for i in 0..layer.b.len() {
                out[pos] += weight * ds[i];
                pos += 1;
            }
            nus[l].gemv_tr(1.0, &layer.wu, &ds, 1.0);
            if l > 0 {
                let mut next_lambda = DVector::zeros(layer.wz.ncols());
                next_lambda.gemv_tr(1.0, &layer.wz, &ds, 0.0);
                let mut next_mu = DVector::zeros(layer.wz.ncols());
                next_mu.gemv_tr(1.0, &layer.wz, &ds_dot, 0.0);
                lambda = next_lambda;
                mu = next_mu;
            }
        }

        let mut u_offsets = Vec::with_capacity(self.u_layers.len());
        let mut pos = u_base;
        for layer in &self.u_layers {
            u_offsets.push(pos);
            pos += layer.wt.len() + layer.bt.len();
        }
        for j in (0..self.u_layers.len()).rev() {
            let layer = &self.u_layers[j];
            let nu = nus[j + 1].clone();
            let dt = DVector::from_fn(nu.len(), |i, _| nu[i] * layer.act.d1(cache.ts[j][i]));
            let mut pos = u_offsets[j];
            for i in 0..layer.wt.nrows() {
                for jj in 0..layer.wt.ncols() {
                    out[pos] += weight * dt[i] * cache.us[j][jj];
                    pos += 1;
                }
            }
            for i in 0..layer.bt.len() {
                out[pos] += weight * dt[i];
                pos += 1;
            }
            nus[j].gemv_tr(1.0, &layer.wt, &dt, 1.0);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Architecture-erased wrapper
// ---------------------------------------------------------------------------

/// A trained potential of either architecture; what [`train`] returns and the
/// checkpoint format stores.
#[derive(Debug, Clone, PartialEq)]
pub enum IcnnPotential {
    /// Single hidden layer.
    Single(SingleLayerIcnn),
    /// General two-track network.
    Deep(DeepIcnn),
}

impl IcnnPotential {
    /// Fresh random network of the given architecture.
    pub fn init<R: Rng>(
        arch: &IcnnArchitecture,
        dim_x: usize,
        dim_y: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match arch {
            IcnnArchitecture::SingleLayer { units } => Ok(IcnnPotential::Single(
                SingleLayerIcnn::init(*units, dim_x, dim_y, rng)?,
            )),
            IcnnArchitecture::Deep { hidden } => Ok(IcnnPotential::Deep(DeepIcnn::init(
                dim_x, dim_y, hidden, rng,
            )?)),
        }
    }

    /// State dimension `n`.
    pub fn dim_x(&self) -> usize {
        match self {
            IcnnPotential::Single(net) => net.dim_x(),
            IcnnPotential::Deep(net) => net.dim_x(),
        }
    }

    /// Observation dimension `m`.
    pub fn dim_y(&self) -> usize {
        match self {
            IcnnPotential::Single(net) => net.dim_y(),
            IcnnPotential::Deep(net) => net.dim_y(),
        }
    }
}

impl Potential for IcnnPotential {
    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        match self {
            IcnnPotential::Single(net) => net.eval(x, y),
            IcnnPotential::Deep(net) => net.eval(x, y),
        }
    }

    fn grad_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            IcnnPotential::Single(net) => net.grad_x(x, y),
            IcnnPotential::Deep(net) => net.grad_x(x, y),
        }
    }
}

impl TrainableIcnn for IcnnPotential {
    fn param_count(&self) -> usize {
        match self {
            IcnnPotential::Single(net) => net.param_count(),
            IcnnPotential::Deep(net) => net.param_count(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            IcnnPotential::Single(net) => net.params(),
            IcnnPotential::Deep(net) => net.params(),
        }
    }

    fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        match self {
            IcnnPotential::Single(net) => net.add_scaled(delta, scale),
            IcnnPotential::Deep(net) => net.add_scaled(delta, scale),
        }
    }

    fn project(&mut self) {
        match self {
            IcnnPotential::Single(net) => net.project(),
            IcnnPotential::Deep(net) => net.project(),
        }
    }

    fn accumulate_value_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            IcnnPotential::Single(net) => net.accumulate_value_grad(x, y, weight, out),
            IcnnPotential::Deep(net) => net.accumulate_value_grad(x, y, weight, out),
        }
    }

    fn accumulate_map_dot_grad(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        r: &DVector<f64>,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            IcnnPotential::Single(net) => net.accumulate_map_dot_grad(x, y, r, weight, out),
            IcnnPotential::Deep(net) => net.accumulate_map_dot_grad(x, y, r, weight, out),
        }
    }
}
