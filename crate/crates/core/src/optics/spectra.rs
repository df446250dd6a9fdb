//! Chromophore absorption spectra in mm^-1 per unit volume fraction.
//!
//! CSV format, one file per chromophore (`hbo2.csv`, `hb.csv`, `water.csv`,
//! `lipid.csv`, `collagen.csv`, `melanin.csv`): a header row followed by
//! `lambda_nm,epsilon` rows with strictly increasing wavelengths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PpgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chromophore {
    HbO2 = 0,
    Hb,
    Water,
    Lipid,
    Collagen,
    Melanin,
}

impl Chromophore {
    pub const ALL: [Chromophore; 6] = [Self::HbO2, Self::Hb, Self::Water, Self::Lipid, Self::Collagen, Self::Melanin];

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::HbO2 => "hbo2",
            Self::Hb => "hb",
            Self::Water => "water",
            Self::Lipid => "lipid",
            Self::Collagen => "collagen",
            Self::Melanin => "melanin",
        }
    }
}

/// Sampled curve with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub lambda: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Curve {
    pub fn new(lambda: Vec<f64>, eps: Vec<f64>) -> Result<Self> {
        if lambda.len() != eps.len() || lambda.len() < 2 {
            return Err(PpgError::Invalid("spectrum needs >= 2 matching samples".into()));
        }
        if lambda.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PpgError::Invalid("spectrum wavelengths must be strictly increasing".into()));
        }
        if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(PpgError::Invalid("spectrum values must be finite and >= 0".into()));
        }
        Ok(Self { lambda, eps })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lambda[0], self.lambda[self.lambda.len() - 1])
    }

    pub fn at(&self, lambda: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(lambda >= lo && lambda <= hi) {
            return Err(PpgError::WavelengthOutOfRange(lambda, lo, hi));
        }
        let i = self.lambda.partition_point(|&l| l <= lambda).clamp(1, self.lambda.len() - 1);
        let (l0, l1) = (self.lambda[i - 1], self.lambda[i]);
        let w = (lambda - l0) / (l1 - l0);
        Ok(self.eps[i - 1] * (1.0 - w) + self.eps[i] * w)
    }

    fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let (mut lambda, mut eps) = (Vec::new(), Vec::new());
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| PpgError::Row {
                        what: "spectrum CSV",
                        row: i + 2,
                        detail: "expected 2 columns".into(),
                    })?
                    .parse::<f64>()
                    .map_err(|e| PpgError::Row { what: "spectrum CSV", row: i + 2, detail: e.to_string() })
            };
            lambda.push(parse(0)?);
            eps.push(parse(1)?);
        }
        Self::new(lambda, eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectra {
    pub curves: Vec<Curve>,
}

/// Wavelength window every spectra set must cover.
pub const LAMBDA_RANGE: (f64, f64) = (470.0, 1000.0);

impl Spectra {
    pub fn new(curves: Vec<Curve>) -> Result<Self> {
        if curves.len() != Chromophore::ALL.len() {
            return Err(PpgError::Invalid(format!("expected 6 spectra, got {}", curves.len())));
        }
        for (c, k) in curves.iter().zip(Chromophore::ALL) {
            let (lo, hi) = c.range();
            if lo > LAMBDA_RANGE.0 || hi < LAMBDA_RANGE.1 {
                return Err(PpgError::Invalid(format!(
                    "{} spectrum covers [{lo}, {hi}] nm, need [{}, {}]",
                    k.file_stem(),
                    LAMBDA_RANGE.0,
                    LAMBDA_RANGE.1
                )));
            }
        }
        Ok(Self { curves })
    }

    pub fn from_csv_dir(dir: &Path) -> Result<Self> {
        let curves = Chromophore::ALL
            .iter()
            .map(|k| {
                let p = dir.join(format!("{}.csv", k.file_stem()));
                if !p.exists() {
                    return Err(PpgError::MissingAsset(p.display().to_string()));
                }
                Curve::from_csv(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(curves)
    }

    pub fn write_csv_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (c, k) in self.curves.iter().zip(Chromophore::ALL) {
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", k.file_stem())))?;
            w.write_record(["lambda_nm", "epsilon"])?;
            for (l, e) in c.lambda.iter().zip(&c.eps) {
                w.write_record([l.to_string(), e.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn curve(&self, k: Chromophore) -> &Curve {
        &self.curves[k as usize]
    }

    /// All six coefficients at `lambda`, indexed by [`Chromophore`].
    pub fn at(&self, lambda: f64) -> Result<[f64; 6]> {
        let mut out = [0.0; 6];
        for (o, c) in out.iter_mut().zip(&self.curves) {
            *o = c.at(lambda)?;
        }
        Ok(out)
    }

    /// Smooth stand-in spectra on a 1 nm grid over 470-1000 nm.
    ///
    /// Hemoglobin curves are log-linear interpolations through coarse anchor
    /// points shaped like whole-blood absorption (Soret tail, Q bands,
    /// red deoxy dominance, isosbestic point near 800 nm); melanin follows
    /// a `lambda^-3.33` power law. Qualitatively realistic, not reference data.
    pub fn synthetic() -> Self {
        let grid: Vec<f64> = (470..=1000).map(f64::from).collect();
        let from_anchors = |anchors: &[(f64, f64)]| {
            let eps = grid.iter().map(|&l| log_interp(anchors, l)).collect();
            Curve::new(grid.clone(), eps).expect("synthetic spectrum is valid")
        };
        let melanin = Curve::new(grid.clone(), grid.iter().map(|&l| 6.6e11 * l.powf(-3.33) / 10.0).collect())
            .expect("synthetic spectrum is valid");
        Self::new(vec![
            from_anchors(HBO2),
            from_anchors(HB),
            from_anchors(WATER),
            from_anchors(LIPID),
            from_anchors(COLLAGEN),
            melanin,
        ])
        .expect("synthetic spectra cover the window")
    }
}

fn log_interp(anchors: &[(f64, f64)], l: f64) -> f64 {
    let i = anchors.partition_point(|a| a.0 <= l).clamp(1, anchors.len() - 1);
    let (l0, e0) = anchors[i - 1];
    let (l1, e1) = anchors[i];
    let w = ((l - l0) / (l1 - l0)).clamp(0.0, 1.0);
    (e0.ln() * (1.0 - w) + e1.ln() * w).exp()
}

// mm^-1 for whole blood at full saturation / full desaturation
const HBO2: &[(f64, f64)] = &[
    (470.0, 17.8),
    (480.0, 14.3),
    (500.0, 11.2),
    (510.0, 10.8),
    (520.0, 13.0),
    (530.0, 21.4),
    (542.0, 28.6),
    (550.0, 23.1),
    (560.0, 17.5),
    (570.0, 23.9),
    (576.0, 29.8),
    (580.0, 26.9),
    (590.0, 7.7),
    (600.0, 1.72),
    (610.0, 0.81),
    (620.0, 0.51),
    (640.0, 0.24),
    (660.0, 0.172),
    (680.0, 0.146),
    (700.0, 0.156),
    (750.0, 0.278),
    (800.0, 0.438),
    (850.0, 0.568),
    (900.0, 0.643),
    (920.0, 0.657),
    (940.0, 0.651),
    (1000.0, 0.571),
];

const HB: &[(f64, f64)] = &[
    (470.0, 8.67),
    (480.0, 7.81),
    (500.0, 11.2),
    (510.0, 13.8),
    (520.0, 17.0),
    (530.0, 21.0),
    (540.0, 25.0),
    (555.0, 29.3),
    (560.0, 28.7),
    (570.0, 24.2),
    (580.0, 19.9),
    (590.0, 15.2),
    (600.0, 7.88),
    (620.0, 3.49),
    (640.0, 2.33),
    (660.0, 1.73),
    (680.0, 1.29),
    (700.0, 0.963),
    (730.0, 0.591),
    (750.0, 0.754),
    (760.0, 0.831),
    (780.0, 0.550),
    (800.0, 0.409),
    (850.0, 0.371),
    (900.0, 0.408),
    (940.0, 0.372),
    (1000.0, 0.215),
];

const WATER: &[(f64, f64)] = &[
    (470.0, 1.6e-5),
    (500.0, 2.6e-5),
    (550.0, 5.7e-5),
    (600.0, 2.3e-4),
    (650.0, 3.4e-4),
    (700.0, 6.0e-4),
    (740.0, 2.6e-3),
    (760.0, 2.6e-3),
    (800.0, 2.0e-3),
    (850.0, 4.3e-3),
    (900.0, 6.8e-3),
    (940.0, 2.7e-2),
    (970.0, 4.5e-2),
    (1000.0, 3.6e-2),
];

const LIPID: &[(f64, f64)] = &[
    (470.0, 2.0e-2),
    (500.0, 1.0e-2),
    (550.0, 5.0e-3),
    (600.0, 3.0e-3),
    (700.0, 1.0e-3),
    (760.0, 2.0e-3),
    (800.0, 1.0e-3),
    (900.0, 5.0e-3),
    (930.0, 1.0e-1),
    (960.0, 2.0e-2),
    (1000.0, 8.0e-3),
];

const COLLAGEN: &[(f64, f64)] = &[
    (470.0, 5.0e-2),
    (500.0, 3.0e-2),
    (550.0, 1.5e-2),
    (600.0, 8.0e-3),
    (700.0, 4.0e-3),
    (800.0, 3.0e-3),
    (900.0, 5.0e-3),
    (930.0, 1.0e-2),
    (1000.0, 1.5e-2),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spectra_have_expected_shape() {
        let s = Spectra::synthetic();
        let at = |l| s.at(l).unwrap();
        assert!(at(660.0)[Chromophore::Hb as usize] > 5.0 * at(660.0)[Chromophore::HbO2 as usize]);
        assert!(at(940.0)[Chromophore::HbO2 as usize] > at(940.0)[Chromophore::Hb as usize]);
        assert!(at(525.0)[Chromophore::HbO2 as usize] > 10.0);
        assert!(at(500.0)[Chromophore::Melanin as usize] > at(900.0)[Chromophore::Melanin as usize]);
        assert!(s.at(469.0).is_err());
    }

    #[test]
    fn linear_interpolation_between_samples() {
        let c = Curve::new(vec![500.0, 510.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(c.at(505.0).unwrap(), 2.0);
        assert_eq!(c.at(510.0).unwrap(), 3.0);
        assert!(Curve::new(vec![510.0, 500.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Spectra::synthetic();
        s.write_csv_dir(dir.path()).unwrap();
        let back = Spectra::from_csv_dir(dir.path()).unwrap();
        for (a, b) in s.curves.iter().zip(&back.curves) {
            assert_eq!(a.lambda, b.lambda);
            for (x, y) in a.eps.iter().zip(&b.eps) {
                assert!((x - y).abs() <= 1e-15 * x.abs());
            }
        }
        std::fs::remove_file(dir.path().join("lipid.csv")).unwrap();
        assert!(matches!(Spectra::from_csv_dir(dir.path()), Err(PpgError::MissingAsset(_))));
    }
}
