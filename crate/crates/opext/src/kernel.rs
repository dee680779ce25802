//! Radial kernel families, their scaled evaluations and ambient gradients,
//! and native-space smoothness metadata.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("radial argument must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error("point dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("shape parameter must be positive, got {0}")]
    NonPositiveShape(f64),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
}

/// Matern smoothness order, restricted to the half-integer cases with
/// closed-form radial functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternOrder {
    /// nu = 1/2 (exponential kernel)
    Half,
    /// nu = 3/2
    ThreeHalves,
    /// nu = 5/2
    FiveHalves,
}

impl MaternOrder {
    pub fn nu(self) -> f64 {
        match self {
            MaternOrder::Half => 0.5,
            MaternOrder::ThreeHalves => 1.5,
            MaternOrder::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Gaussian,
    Matern(MaternOrder),
    /// Wendland smoothness k in {0,1,2}; the internal exponent is derived
    /// from the ambient dimension and never stored.
    Wendland { k: u8, ambient_dim: usize },
}

/// A radial kernel family with its shape (inverse length-scale) parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecWire", into = "KernelSpecWire")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
}

/// Flat JSON shape used by CLI configs: {family, nu_or_k, sigma, ambient_dim}.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelSpecWire {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu_or_k: Option<f64>,
    sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ambient_dim: Option<usize>,
}

impl From<KernelSpec> for KernelSpecWire {
    fn from(s: KernelSpec) -> Self {
        match s.family {
            KernelFamily::Gaussian => KernelSpecWire {
                family: "gaussian".into(),
                nu_or_k: None,
                sigma: s.sigma,
                ambient_dim: None,
            },
            KernelFamily::Matern(order) => KernelSpecWire {
                family: "matern".into(),
                nu_or_k: Some(order.nu()),
                sigma: s.sigma,
                ambient_dim: None,
            },
            KernelFamily::Wendland { k, ambient_dim } => KernelSpecWire {
                family: "wendland".into(),
                nu_or_k: Some(k as f64),
                sigma: s.sigma,
                ambient_dim: Some(ambient_dim),
            },
        }
    }
}

impl TryFrom<KernelSpecWire> for KernelSpec {
    type Error = String;
    fn try_from(w: KernelSpecWire) -> Result<Self, String> {
        if w.sigma <= 0.0 {
            return Err(format!("sigma must be positive, got {}", w.sigma));
        }
        let family = match w.family.to_ascii_lowercase().as_str() {
            "gaussian" => KernelFamily::Gaussian,
            "matern" => {
                let nu = w.nu_or_k.ok_or("matern requires nu_or_k")?;
                let order = if (nu - 0.5).abs() < 1e-12 {
                    MaternOrder::Half
                } else if (nu - 1.5).abs() < 1e-12 {
                    MaternOrder::ThreeHalves
                } else if (nu - 2.5).abs() < 1e-12 {
                    MaternOrder::FiveHalves
                } else {
                    return Err(format!("unsupported matern nu {nu}"));
                };
                KernelFamily::Matern(order)
            }
            "wendland" => {
                let k = w.nu_or_k.ok_or("wendland requires nu_or_k")? as u8;
                if k > 2 {
                    return Err(format!("unsupported wendland k {k}"));
                }
                KernelFamily::Wendland { k, ambient_dim: w.ambient_dim.unwrap_or(3) }
            }
            other => return Err(format!("unknown kernel family {other}")),
        };
        Ok(KernelSpec { family, sigma: w.sigma })
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma: f64) -> Result<Self, KernelError> {
        if sigma <= 0.0 {
            return Err(KernelError::NonPositiveShape(sigma));
        }
        if let KernelFamily::Wendland { k, ambient_dim } = family {
            if k > 2 || ambient_dim == 0 {
                return Err(KernelError::InvalidParams(format!(
                    "wendland k={k} d={ambient_dim}"
                )));
            }
        }
        Ok(KernelSpec { family, sigma })
    }

    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec::new(KernelFamily::Gaussian, sigma).unwrap()
    }

    pub fn matern(order: MaternOrder, sigma: f64) -> Self {
        KernelSpec::new(KernelFamily::Matern(order), sigma).unwrap()
    }

    pub fn wendland(k: u8, ambient_dim: usize, sigma: f64) -> Self {
        KernelSpec::new(KernelFamily::Wendland { k, ambient_dim }, sigma).unwrap()
    }

    /// Short human label, used in benchmark tables.
    pub fn label(&self) -> String {
        match self.family {
            KernelFamily::Gaussian => format!("Gaussian s={}", self.sigma),
            KernelFamily::Matern(o) => format!("Matern nu={} s={}", o.nu(), self.sigma),
            KernelFamily::Wendland { k, .. } => format!("Wendland k={} s={:.3}", k, self.sigma),
        }
    }

    /// Wendland internal exponent l = floor(d/2) + 1 + k.
    fn wendland_l(k: u8, d: usize) -> f64 {
        (d / 2 + 1 + k as usize) as f64
    }

    /// Unscaled radial function Phi(r) from the family's closed form.
    pub fn eval_phi(&self, r: f64) -> Result<f64, KernelError> {
        if r < 0.0 {
            return Err(KernelError::NegativeRadius(r));
        }
        Ok(match self.family {
            KernelFamily::Gaussian => (-r * r).exp(),
            KernelFamily::Matern(MaternOrder::Half) => (-r).exp(),
            KernelFamily::Matern(MaternOrder::ThreeHalves) => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern(MaternOrder::FiveHalves) => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + 5.0 / 3.0 * r * r) * (-s).exp()
            }
            KernelFamily::Wendland { k, ambient_dim } => {
                if r >= 1.0 {
                    return Ok(0.0);
                }
                let l = Self::wendland_l(k, ambient_dim);
                let base = 1.0 - r;
                match k {
                    0 => base.powf(l),
                    1 => base.powf(l + 1.0) * ((l + 1.0) * r + 1.0),
                    2 => {
                        base.powf(l + 2.0)
                            * ((l + 1.0) * (l + 3.0) * r * r + 3.0 * (l + 2.0) * r + 3.0)
                    }
                    _ => unreachable!(),
                }
            }
        })
    }

    /// Derivative Phi'(r) of the radial function.
    pub fn eval_phi_prime(&self, r: f64) -> Result<f64, KernelError> {
        if r < 0.0 {
            return Err(KernelError::NegativeRadius(r));
        }
        Ok(match self.family {
            KernelFamily::Gaussian => -2.0 * r * (-r * r).exp(),
            KernelFamily::Matern(MaternOrder::Half) => -(-r).exp(),
            KernelFamily::Matern(MaternOrder::ThreeHalves) => {
                -3.0 * r * (-(3f64.sqrt()) * r).exp()
            }
            KernelFamily::Matern(MaternOrder::FiveHalves) => {
                -(5.0 / 3.0) * r * (1.0 + 5f64.sqrt() * r) * (-(5f64.sqrt()) * r).exp()
            }
            KernelFamily::Wendland { k, ambient_dim } => {
                if r >= 1.0 {
                    return Ok(0.0);
                }
                let l = Self::wendland_l(k, ambient_dim);
                let base = 1.0 - r;
                match k {
                    0 => -l * base.powf(l - 1.0),
                    1 => -(l + 1.0) * (l + 2.0) * r * base.powf(l),
                    2 => {
                        -(l + 3.0) * (l + 4.0)
                            * r
                            * base.powf(l + 1.0)
                            * ((l + 1.0) * r + 1.0)
                    }
                    _ => unreachable!(),
                }
            }
        })
    }

    /// k(x, y) = Phi(sigma ||x - y||).
    pub fn eval_kernel(&self, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
        if x.len() != y.len() {
            return Err(KernelError::DimensionMismatch(x.len(), y.len()));
        }
        let r = dist(x, y);
        self.eval_phi(self.sigma * r)
    }

    /// Gradient of k with respect to x. At x = y the symmetric limit 0 is
    /// returned for every family (Matern nu=1/2 has a kink there).
    pub fn grad_kernel(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != y.len() {
            return Err(KernelError::DimensionMismatch(x.len(), y.len()));
        }
        let r = dist(x, y);
        if r == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let dphi = self.eval_phi_prime(self.sigma * r)?;
        let scale = dphi * self.sigma / r;
        Ok(x.iter().zip(y).map(|(a, b)| scale * (a - b)).collect())
    }

    /// Native-space Sobolev orders for ambient dimension d and manifold
    /// dimension m. Gaussian has no norm-equivalent Sobolev order.
    pub fn native_space(&self, d: usize, m: usize) -> NativeSpaceInfo {
        assert!(m >= 1 && m <= d);
        let ambient_order = match self.family {
            KernelFamily::Gaussian => None,
            KernelFamily::Matern(order) => Some((d as f64 + 2.0 * order.nu()) / 2.0),
            KernelFamily::Wendland { k, .. } => Some((d as f64 + 2.0 * k as f64 + 1.0) / 2.0),
        };
        let manifold_order = ambient_order.map(|s| s - (d as f64 - m as f64) / 2.0);
        NativeSpaceInfo { ambient_order, manifold_order, ambient_dim: d, manifold_dim: m }
    }
}

/// Sobolev-order bookkeeping for a kernel's native space, ambient and
/// restricted to an m-dimensional manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NativeSpaceInfo {
    pub ambient_order: Option<f64>,
    pub manifold_order: Option<f64>,
    pub ambient_dim: usize,
    pub manifold_dim: usize,
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}
