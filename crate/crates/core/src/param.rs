//! Width- and depth-dependent coefficients for each parameterization.
//!
//! Every multiplier, variance and learning-rate factor used by the network
//! and optimizer is read from here. Layer indices follow the convention
//! `0` = read-in, `1..L` = residual branches, `L` = read-out.

use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Standard parameterization: unit multipliers, `1/fan_in` variances.
    Sp,
    /// Maximal update parameterization without depth scaling.
    MuP,
    /// muP with residual branches scaled by `1/sqrt(L)`.
    MuPSqrtL,
    /// muP with residual branches scaled by `L^-alpha`, `alpha >= 1/2`.
    MuPDepthAlpha(f64),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Sp => "sp",
            Scheme::MuP => "mup",
            Scheme::MuPSqrtL => "mup_sqrtl",
            Scheme::MuPDepthAlpha(_) => "mup_alpha",
        }
    }

    /// Parse a serialized scheme name. `mup_alpha` takes its exponent from
    /// `alpha`.
    pub fn parse(name: &str, alpha: Option<f64>) -> Result<Self> {
        match name.trim() {
            "sp" => Ok(Scheme::Sp),
            "mup" => Ok(Scheme::MuP),
            "mup_sqrtl" => Ok(Scheme::MuPSqrtL),
            "mup_alpha" => {
                let a = alpha.ok_or_else(|| Error::Config("mup_alpha requires alpha".into()))?;
                Ok(Scheme::MuPDepthAlpha(a))
            }
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }

    pub fn is_mup(&self) -> bool {
        !matches!(self, Scheme::Sp)
    }

    /// Depth exponent of the residual branch multiplier, if any.
    fn depth_exponent(&self) -> f64 {
        match self {
            Scheme::Sp | Scheme::MuP => 0.0,
            Scheme::MuPSqrtL => 0.5,
            Scheme::MuPDepthAlpha(a) => *a,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What the read-out vector is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutInput {
    /// `f = (beta_L / gamma) w . phi(h)`
    Activation,
    /// `f = (beta_L / gamma) w . h`; makes the top gradient field independent
    /// of the activation derivative.
    Stream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamConfig {
    /// Width N.
    pub width: usize,
    /// Number of residual blocks L.
    pub depth: usize,
    /// Input dimension D.
    pub input_dim: usize,
    /// Layers per residual block K.
    pub layers_per_block: usize,
    pub gamma0: f64,
    pub eta0: f64,
    pub scheme: Scheme,
    pub activation: Activation,
    /// Initialize the last matrix of every block to zero.
    pub zero_block_readout: bool,
    /// Constant prefactor on the residual branch multiplier.
    pub branch_multiplier: f64,
    pub train_readin: bool,
    pub train_readout: bool,
    pub readout_input: ReadoutInput,
}

impl ParamConfig {
    pub fn new(width: usize, depth: usize, input_dim: usize, scheme: Scheme) -> Self {
        Self {
            width,
            depth,
            input_dim,
            layers_per_block: 1,
            gamma0: 1.0,
            eta0: 0.1,
            scheme,
            activation: Activation::Relu,
            zero_block_readout: false,
            branch_multiplier: 1.0,
            train_readin: true,
            train_readout: true,
            readout_input: ReadoutInput::Activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.depth == 0 || self.input_dim == 0 || self.layers_per_block == 0 {
            return bad("width, depth, input_dim and layers_per_block must all be >= 1");
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad("gamma0 must be positive");
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be positive");
        }
        if let Scheme::MuPDepthAlpha(a) = self.scheme {
            if !(a >= 0.5 && a.is_finite()) {
                return bad("mup_alpha requires alpha >= 1/2");
            }
        }
        if !(self.branch_multiplier >= 0.0 && self.branch_multiplier.is_finite()) {
            return bad("branch_multiplier must be finite and non-negative");
        }
        Ok(())
    }

    fn n(&self) -> f64 {
        self.width as f64
    }

    fn l(&self) -> f64 {
        self.depth as f64
    }

    fn d(&self) -> f64 {
        self.input_dim as f64
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.depth {
            Err(Error::Precondition(format!(
                "layer {layer} outside [0, {}]",
                self.depth
            )))
        } else {
            Ok(())
        }
    }

    /// Branch multiplier `beta_l`.
    pub fn branch_scale(&self, layer: usize) -> Result<f64> {
        self.check_layer(layer)?;
        Ok(if layer == 0 {
            self.readin_scale()
        } else if layer == self.depth {
            self.readout_scale()
        } else {
            self.hidden_scale()
        })
    }

    pub fn readin_scale(&self) -> f64 {
        if self.scheme.is_mup() {
            self.d().powf(-0.5)
        } else {
            1.0
        }
    }

    pub fn readout_scale(&self) -> f64 {
        if self.scheme.is_mup() {
            self.n().powf(-0.5)
        } else {
            1.0
        }
    }

    /// Multiplier on every residual branch, including the branch that
    /// feeds the read-out when `L = 1`.
    pub fn hidden_scale(&self) -> f64 {
        let base = if self.scheme.is_mup() {
            self.l().powf(-self.scheme.depth_exponent()) * self.n().powf(-0.5)
        } else {
            1.0
        };
        self.branch_multiplier * base
    }

    /// Coupling between consecutive layers inside a block (K > 1).
    pub fn internal_scale(&self) -> f64 {
        if self.scheme.is_mup() {
            self.n().powf(-0.5)
        } else {
            1.0
        }
    }

    /// Output multiplier `gamma`.
    pub fn output_scale(&self) -> f64 {
        if self.scheme.is_mup() {
            self.gamma0 * self.n().sqrt()
        } else {
            1.0
        }
    }

    /// Initialization variance `sigma_l^2`.
    pub fn weight_variance(&self, layer: usize) -> Result<f64> {
        self.check_layer(layer)?;
        Ok(self.variance_unchecked(layer == 0))
    }

    pub(crate) fn variance_unchecked(&self, readin: bool) -> f64 {
        match (self.scheme.is_mup(), readin) {
            (true, _) => 1.0,
            (false, true) => 1.0 / self.d(),
            (false, false) => 1.0 / self.n(),
        }
    }

    /// Learning rate `eta(t)` for a base rate `eta0(t)`.
    pub fn effective_lr(&self, base: f64) -> f64 {
        let g2n = self.gamma0 * self.gamma0 * self.n();
        match self.scheme {
            Scheme::Sp => base,
            Scheme::MuP | Scheme::MuPSqrtL => base * g2n,
            Scheme::MuPDepthAlpha(a) => base * g2n * self.l().powf(2.0 * a - 1.0),
        }
    }

    /// `eta / eta0`; also the prefactor that turns raw parameter-gradient
    /// inner products into the neural tangent kernel.
    pub fn lr_factor(&self) -> f64 {
        self.effective_lr(1.0)
    }

    /// Scale relating the stored gradient fields to `df/dh`:
    /// `g = (N gamma0) df/dh`.
    pub fn gradient_field_scale(&self) -> f64 {
        self.n() * self.gamma0
    }
}
