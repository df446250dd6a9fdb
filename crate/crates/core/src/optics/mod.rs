//! Three-layer skin model: physiological parameters and wavelength to
//! per-layer absorption and shared scattering.

pub mod real;
pub mod spectra;

use serde::{Deserialize, Serialize};

use crate::domain::{BioParams, StaticParam, N_PARAMS, N_STATIC};
use crate::error::{PpgError, Result};
pub use real::{Dual, Real};
pub use spectra::{Chromophore, Curve, Spectra};

pub const N_LAYERS: usize = 3;

/// Index of dermis blood-volume scaling in a per-timestep parameter vector.
pub const DBV2: usize = N_STATIC;
/// Index of subcutis blood-volume scaling in a per-timestep parameter vector.
pub const DBV3: usize = N_STATIC + 1;

/// Fixed layer composition (volume fractions, 0..1) and thickness in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub thickness: f64,
    pub water: f64,
    pub lipid: f64,
    pub collagen: f64,
    pub melanin: bool,
    pub blood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinModel {
    pub layers: [Layer; N_LAYERS],
    pub g: f64,
    pub n: f64,
}

impl Default for SkinModel {
    fn default() -> Self {
        let layer = |name: &str, thickness, water, lipid, collagen, melanin, blood| Layer {
            name: name.to_string(),
            thickness,
            water,
            lipid,
            collagen,
            melanin,
            blood,
        };
        Self {
            layers: [
                layer("epidermis", 0.2, 0.60, 0.35, 0.0, true, false),
                layer("dermis", 1.5, 0.70, 0.05, 0.25, false, true),
                layer("subcutis", 18.3, 0.10, 0.90, 0.0, false, true),
            ],
            g: 0.9,
            n: 1.4,
        }
    }
}

impl SkinModel {
    pub fn with_thicknesses(mut self, t: [f64; N_LAYERS]) -> Self {
        for (l, d) in self.layers.iter_mut().zip(t) {
            l.thickness = d;
        }
        self
    }

    pub fn thicknesses(&self) -> [f64; N_LAYERS] {
        [self.layers[0].thickness, self.layers[1].thickness, self.layers[2].thickness]
    }

    /// Geometry used to build the alternate surrogate for skin misspecification.
    pub fn misspecified() -> Self {
        Self::default().with_thicknesses([0.15, 1.5, 18.35])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalProps<R = f64> {
    pub mu_a: [R; N_LAYERS],
    pub mu_s: R,
    pub g: f64,
    pub n: f64,
}

/// Oxygenated and deoxygenated blood volume fractions.
///
/// Saturations in percent, `bv` as a fraction; arterial blood is a quarter
/// of the total and scales with `dbv`, venous blood is static.
pub fn blood_concentrations<R: Real>(sa: R, dsv: R, bv: R, dbv: R) -> Result<(R, R)> {
    let sv = sa - dsv;
    if sv.value() < 0.0 {
        return Err(PpgError::Invalid(format!("venous saturation SA - dSV = {} is negative", sv.value())));
    }
    let art = bv * dbv * 0.25;
    let ven = bv * 0.75;
    let sa = sa / 100.0;
    let sv = sv / 100.0;
    let c_oxy = art * sa + ven * sv;
    let c_deoxy = art * (-sa + 1.0) + ven * (-sv + 1.0);
    Ok((c_oxy, c_deoxy))
}

/// Vessel packing correction of blood absorption.
///
/// `v * (1 - exp(-(mu/v) * vd)) / vd`, written with `expm1` so the small-`vd`
/// limit tends to `mu` without cancellation.
pub fn vessel_correction<R: Real>(mu_blood: R, v: R, vd: R) -> Result<R> {
    if !(v.value() > 0.0 && vd.value() > 0.0) || mu_blood.value() < 0.0 {
        return Err(PpgError::Invalid(format!(
            "vessel correction needs mu >= 0, v > 0, VD > 0 (got {}, {}, {})",
            mu_blood.value(),
            v.value(),
            vd.value()
        )));
    }
    let x = -(mu_blood / v) * vd;
    Ok(-(v * x.expm1()) / vd)
}

/// Power-law reduced scattering converted to the scattering coefficient.
pub fn scattering<R: Real>(a: R, sp: R, lambda: f64, g: f64) -> R {
    // (lambda/1000)^-SP = exp(-SP ln(lambda/1000))
    a * (-(sp * (lambda / 1000.0).ln())).exp() / (1.0 - g)
}

/// Per-layer absorption for one time step; `eps` indexed by [`Chromophore`].
pub fn absorption<R: Real>(theta: &[R; N_PARAMS], eps: &[f64; 6], model: &SkinModel) -> Result<[R; N_LAYERS]> {
    let p = |s: StaticParam| theta[s as usize];
    let blood = [
        None,
        Some((p(StaticParam::Bv2), theta[DBV2], p(StaticParam::Vd2))),
        Some((p(StaticParam::Bv3), theta[DBV3], p(StaticParam::Vd3))),
    ];
    let mut out = [R::cst(0.0); N_LAYERS];
    for ((o, layer), blood) in out.iter_mut().zip(&model.layers).zip(blood) {
        let fixed = eps[Chromophore::Water as usize] * layer.water
            + eps[Chromophore::Lipid as usize] * layer.lipid
            + eps[Chromophore::Collagen as usize] * layer.collagen;
        let mut mu = R::cst(fixed);
        if layer.melanin {
            mu = mu + p(StaticParam::Mel) / 100.0 * eps[Chromophore::Melanin as usize];
        }
        if let (true, Some((bv, dbv, vd))) = (layer.blood, blood) {
            let bv = bv / 100.0;
            let (c_oxy, c_deoxy) = blood_concentrations(p(StaticParam::Sa), p(StaticParam::Dsv), bv, dbv)?;
            let mu_blood = c_oxy * eps[Chromophore::HbO2 as usize] + c_deoxy * eps[Chromophore::Hb as usize];
            mu = mu + vessel_correction(mu_blood, bv * dbv, vd)?;
        }
        *o = mu;
    }
    Ok(out)
}

/// Tissue optics at one wavelength for one per-timestep parameter vector.
pub fn f_b<R: Real>(
    theta: &[R; N_PARAMS],
    lambda: f64,
    spectra: &Spectra,
    model: &SkinModel,
) -> Result<OpticalProps<R>> {
    let eps = spectra.at(lambda)?;
    Ok(OpticalProps {
        mu_a: absorption(theta, &eps, model)?,
        mu_s: scattering(theta[StaticParam::A as usize], theta[StaticParam::Sp as usize], lambda, model.g),
        g: model.g,
        n: model.n,
    })
}

/// Jacobian rows `[mu_a1, mu_a2, mu_a3, mu_s]` with respect to the 11 inputs.
pub type Jacobian = [[f64; N_PARAMS]; 4];

pub fn f_b_jacobian(
    theta: &[f64; N_PARAMS],
    lambda: f64,
    spectra: &Spectra,
    model: &SkinModel,
) -> Result<(OpticalProps, Jacobian)> {
    let mut dual = [Dual::<N_PARAMS>::constant(0.0); N_PARAMS];
    for (i, d) in dual.iter_mut().enumerate() {
        *d = Dual::var(theta[i], i);
    }
    let o = f_b(&dual, lambda, spectra, model)?;
    let props = OpticalProps { mu_a: [o.mu_a[0].v, o.mu_a[1].v, o.mu_a[2].v], mu_s: o.mu_s.v, g: o.g, n: o.n };
    Ok((props, [o.mu_a[0].d, o.mu_a[1].d, o.mu_a[2].d, o.mu_s.d]))
}

/// Statics plus both dynamics at time index `t`.
pub fn theta_at(bio: &BioParams, t: usize) -> [f64; N_PARAMS] {
    let mut th = [0.0; N_PARAMS];
    th[..N_STATIC].copy_from_slice(bio.statics.as_slice());
    th[DBV2] = bio.dbv2[t];
    th[DBV3] = bio.dbv3[t];
    th
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blood_concentration_edges() {
        let (o, d) = blood_concentrations(100.0, 0.0, 0.04, 1.0).unwrap();
        assert!((o - 0.04).abs() < 1e-15 && d.abs() < 1e-15);
        let (o, d) = blood_concentrations(0.0, 0.0, 0.04, 1.0).unwrap();
        assert!(o.abs() < 1e-15 && (d - 0.04).abs() < 1e-15);
        assert!(blood_concentrations(10.0, 20.0, 0.04, 1.0).is_err());
    }

    #[test]
    fn scattering_examples() {
        assert!((scattering(0.5, 1.4, 1000.0, 0.9) - 5.0).abs() < 1e-12);
        let a = scattering(0.7, 1.0, 800.0, 0.9);
        let b = scattering(0.7, 1.0, 400.0, 0.9);
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn vessel_correction_limits_and_errors() {
        let full = 2.0;
        let tiny = vessel_correction(full, 0.02, 1e-9).unwrap();
        assert!((tiny - full).abs() / full < 1e-6);
        // saturated exponent
        let sat = vessel_correction(100.0, 0.02, 5.0).unwrap();
        assert!((sat - 0.02 / 5.0).abs() < 1e-12);
        assert!(vessel_correction(1.0, 0.0, 0.03).is_err());
        assert!(vessel_correction(1.0, 0.02, -0.01).is_err());
    }

    #[test]
    fn single_chromophore_weighted_sum() {
        let model = SkinModel {
            layers: [
                Layer {
                    name: "a".into(),
                    thickness: 1.0,
                    water: 0.5,
                    lipid: 0.0,
                    collagen: 0.0,
                    melanin: false,
                    blood: false,
                },
                Layer {
                    name: "b".into(),
                    thickness: 1.0,
                    water: 0.0,
                    lipid: 0.0,
                    collagen: 0.0,
                    melanin: false,
                    blood: false,
                },
                Layer {
                    name: "c".into(),
                    thickness: 1.0,
                    water: 0.0,
                    lipid: 0.0,
                    collagen: 0.0,
                    melanin: false,
                    blood: false,
                },
            ],
            g: 0.9,
            n: 1.4,
        };
        let mut eps = [0.0; 6];
        eps[Chromophore::Water as usize] = 2.0;
        let theta = [1.0; N_PARAMS];
        let mu = absorption(&theta, &eps, &model).unwrap();
        assert_eq!(mu, [1.0, 0.0, 0.0]);
    }
}
