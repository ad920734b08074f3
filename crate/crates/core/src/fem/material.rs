use crate::error::{Error, Result};
use crate::scalar::Real;

/// Measured mass of the phantom block in grams.
pub const PHANTOM_MASS_G: f64 = 104.01;

/// Isotropic linear-elastic material in mm/g/s units, so stresses are in Pa.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialParams<T: Real> {
    pub young_modulus: T,
    pub poisson_ratio: T,
    /// g/mm³
    pub density: T,
}

impl<T: Real> MaterialParams<T> {
    /// Material whose density spreads `mass` grams uniformly over `volume` mm³.
    pub fn from_mass(young_modulus: T, poisson_ratio: T, mass: T, volume: T) -> Self {
        Self {
            young_modulus,
            poisson_ratio,
            density: mass / volume,
        }
    }

    /// Phantom defaults: ν = 0.45 and the measured block mass over `volume`.
    pub fn phantom(young_modulus: T, volume: T) -> Self {
        Self::from_mass(young_modulus, T::lit(0.45), T::lit(PHANTOM_MASS_G), volume)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poisson_ratio >= T::lit(0.5) {
            return Err(Error::SingularMaterial(self.poisson_ratio.as_f64()));
        }
        if !(self.young_modulus > T::zero()) || !self.young_modulus.is_finite() {
            return Err(Error::Config(format!("young modulus must be positive, got {}", self.young_modulus)));
        }
        if !(self.poisson_ratio >= T::zero()) {
            return Err(Error::Config(format!("poisson ratio must be in [0, 0.5), got {}", self.poisson_ratio)));
        }
        if !(self.density > T::zero()) || !self.density.is_finite() {
            return Err(Error::Config(format!("density must be positive, got {}", self.density)));
        }
        Ok(())
    }
}

/// Lamé parameters `(λ, μ)`.
pub fn lame_parameters<T: Real>(m: &MaterialParams<T>) -> Result<(T, T)> {
    m.validate()?;
    let (e, nu) = (m.young_modulus, m.poisson_ratio);
    let one = T::one();
    let two = T::lit(2.0);
    Ok((e * nu / ((one + nu) * (one - two * nu)), e / (two * (one + nu))))
}
