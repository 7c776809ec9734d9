//! Run configuration read from TOML.

use crate::error::{Error, Result};
use crate::geometry::{ConvexDomain, Shape};
use crate::math::Vec3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Ball { radius: f64 },
    Ellipsoid { semi_axes: Vec3 },
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::Ball { radius: 1.0 }
    }
}

impl DomainSpec {
    pub fn build(&self) -> ConvexDomain {
        match *self {
            DomainSpec::Ball { radius } => ConvexDomain::new(Shape::Ellipsoid { semi_axes: [radius; 3] }),
            DomainSpec::Ellipsoid { semi_axes } => ConvexDomain::ellipsoid(semi_axes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Cells along the longest bounding-box axis.
    pub n_x: usize,
    /// Velocity nodes per axis.
    pub n_v: usize,
    pub v_max: f64,
    /// Order of the wall quadrature; derived from `n_x` when absent.
    pub wall_order: Option<usize>,
    /// Largest lattice component of the plane-sum directions.
    pub radon_max_component: i32,
    /// Polar and azimuthal nodes of the angular collision quadrature.
    pub angular: [usize; 2],
    pub poisson_tol: f64,
    pub poisson_max_iter: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_x: 16,
            n_v: 24,
            v_max: 6.0,
            wall_order: None,
            radon_max_component: 1,
            angular: [8, 16],
            poisson_tol: 1e-10,
            poisson_max_iter: 20_000,
        }
    }
}

impl GridSpec {
    /// Wall quadrature order with polar spacing about two spatial cells.
    pub fn wall_order_for(&self, extent: f64) -> usize {
        self.wall_order.unwrap_or_else(|| {
            let h = extent / self.n_x as f64;
            ((std::f64::consts::PI / (2.0 * h)).ceil() as usize).max(4)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSpec {
    /// Exponent of the sup-norm weight `e^{theta |v|^2}`.
    pub theta: f64,
    /// Exponent of the Sobolev weight.
    pub theta_tilde: f64,
    /// Mollification time of the kinetic weight.
    pub epsilon: f64,
    pub beta: f64,
    pub p: f64,
    /// Switches the collision operator off (pure Vlasov transport).
    pub collisions: bool,
}

impl Default for PhysicsSpec {
    fn default() -> Self {
        PhysicsSpec { theta: 0.1, theta_tilde: 0.05, epsilon: 0.05, beta: 0.6, p: 4.0, collisions: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarchSpec {
    pub t_end: f64,
    /// Time step; `min(0.05, 0.5 h_x / v_max)` when absent.
    pub dt: Option<f64>,
    /// Number of steps; overrides `t_end` when present.
    pub steps: Option<usize>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for MarchSpec {
    fn default() -> Self {
        MarchSpec { t_end: 0.5, dt: None, steps: None, picard_tol: 1e-6, picard_max_iter: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum InitSpec {
    #[default]
    Maxwellian,
    /// `F = mu (1 + amplitude psi_mode(x, v))`.
    Perturbed { amplitude: f64, mode: u32 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSpec {
    pub out_dir: PathBuf,
    /// Potential snapshots every this many steps; 0 disables them.
    pub snapshot_every: usize,
}

impl Default for IoSpec {
    fn default() -> Self {
        IoSpec { out_dir: PathBuf::from("out"), snapshot_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub grid: GridSpec,
    pub physics: PhysicsSpec,
    pub march: MarchSpec,
    pub init: InitSpec,
    pub io: IoSpec,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ParseError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// All violated constraints, joined into one error.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConstraintViolation { which: v.join("; ") })
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, what: &str| {
            if !ok {
                out.push(what.to_string());
            }
        };
        let ph = &self.physics;
        need(ph.theta_tilde > 0.0, "theta_tilde > 0");
        need(ph.theta_tilde < ph.theta, "theta_tilde < theta");
        need(ph.theta < 0.25, "theta < 1/4");
        need(ph.p > 3.0 && ph.p < 6.0, "3 < p < 6");
        need(ph.beta > 1.0 - 2.0 / ph.p, "beta > 1 - 2/p");
        need(ph.beta < 2.0 / 3.0, "beta < 2/3");
        need(ph.epsilon > 0.0, "epsilon > 0");
        let g = &self.grid;
        need(g.n_x >= 4, "n_x >= 4");
        need(g.n_v >= 4, "n_v >= 4");
        need(g.v_max > 0.0, "v_max > 0");
        need(g.poisson_tol > 0.0, "poisson_tol > 0");
        let m = &self.march;
        need(m.t_end >= 0.0, "t_end >= 0");
        need(m.dt.is_none_or(|dt| dt > 0.0), "dt > 0");
        need(m.picard_tol > 0.0, "picard_tol > 0");
        need(m.picard_max_iter >= 1, "picard_max_iter >= 1");
        match self.domain {
            DomainSpec::Ball { radius } => need(radius > 0.0, "radius > 0"),
            DomainSpec::Ellipsoid { semi_axes } => need(semi_axes.iter().all(|&a| a > 0.0), "semi_axes > 0"),
        }
        if let InitSpec::Perturbed { amplitude, .. } = self.init {
            need(amplitude.abs() < 0.5, "|amplitude| < 1/2");
        }
        out
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ParseError(format!("{}: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_physics(f: impl FnOnce(&mut PhysicsSpec)) -> Result<()> {
        let mut c = RunConfig::default();
        f(&mut c.physics);
        c.validate()
    }

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn rejects_out_of_range_physics() {
        let err = with_physics(|p| p.beta = 0.9).unwrap_err();
        assert!(matches!(&err, Error::ConstraintViolation { which } if which.contains("beta < 2/3")));
        assert!(with_physics(|p| p.theta = 0.5).is_err());
        assert!(with_physics(|p| p.theta_tilde = 0.2).is_err());
        assert!(with_physics(|p| p.beta = 0.4).is_err());
        assert!(with_physics(|p| p.p = 7.0).is_err());
        assert!(with_physics(|p| p.epsilon = 0.0).is_err());
        assert_eq!(with_physics(|p| p.beta = 0.9).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn parses_sections() {
        let c = RunConfig::from_toml(
            r#"
            seed = 7
            [domain]
            kind = "ellipsoid"
            semi_axes = [1.0, 0.8, 0.6]
            [init]
            kind = "perturbed"
            amplitude = 0.01
            mode = 1
            [march]
            steps = 3
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.init, InitSpec::Perturbed { amplitude: 0.01, mode: 1 });
        assert_eq!(c.march.steps, Some(3));
        assert!(matches!(RunConfig::from_toml("[grid]\nbogus = 1"), Err(Error::ParseError(_))));
    }
}
