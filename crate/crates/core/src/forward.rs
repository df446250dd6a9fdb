//! Physiological parameters to noiseless sensor readings, as plain code and
//! as a differentiable graph.

use rand::Rng;

use ppgen_nn::{CustomOp, Graph, Tensor, Var};

use crate::domain::{BioParams, ParamSpace, PulseTensor, N_PARAMS};
use crate::error::{PpgError, Result};
use crate::hemodynamics::DynamicsPrior;
use crate::optics::{self, Jacobian, SkinModel, Spectra, N_LAYERS};
use crate::sensor::{mix_leds, SensorConfig, SensorMode};
use crate::surrogate::SurrogateModel;

#[derive(Debug, Clone)]
pub struct Simulator {
    pub space: ParamSpace,
    pub spectra: Spectra,
    pub skin: SkinModel,
    pub surrogate: SurrogateModel,
    pub sensor: SensorConfig,
    pub dynamics: DynamicsPrior,
}

impl Simulator {
    pub fn new(
        space: ParamSpace,
        spectra: Spectra,
        skin: SkinModel,
        surrogate: SurrogateModel,
        sensor: SensorConfig,
    ) -> Self {
        Self { space, spectra, skin, surrogate, sensor, dynamics: DynamicsPrior::default() }
    }

    pub fn receivers(&self) -> usize {
        self.surrogate.n_out
    }

    pub fn channels(&self) -> usize {
        self.sensor.n_channels()
    }

    pub fn timesteps(&self) -> usize {
        self.space.timesteps
    }

    /// Same simulator with another surrogate (e.g. a different skin geometry).
    pub fn with_surrogate(&self, surrogate: SurrogateModel, skin: SkinModel) -> Self {
        Self { surrogate, skin, ..self.clone() }
    }

    /// Statics from the prior, dynamics from a Windkessel draw.
    pub fn sample_theta(&self, rng: &mut impl Rng) -> Result<BioParams> {
        let statics = self.space.sample_static_prior(rng);
        let (dbv2, dbv3) = self.dynamics.sample(rng, self.timesteps())?;
        BioParams::new(statics, dbv2, dbv3)
    }

    /// Surrogate inputs ordered time-major, then wavelength.
    pub fn optics_rows(&self, bio: &BioParams) -> Result<Vec<([f64; N_LAYERS], f64)>> {
        let mut rows = Vec::with_capacity(bio.timesteps() * self.sensor.grid.len());
        for t in 0..bio.timesteps() {
            let theta = optics::theta_at(bio, t);
            for &lambda in &self.sensor.grid {
                let p = optics::f_b(&theta, lambda, &self.spectra, &self.skin)?;
                rows.push((p.mu_a, p.mu_s));
            }
        }
        Ok(rows)
    }

    /// Detected fractions per receiver and grid wavelength, `(R, grid, T)`.
    pub fn spectral_pulse(&self, bio: &BioParams) -> Result<PulseTensor> {
        let (r_n, l_n, t_n) = (self.receivers(), self.sensor.grid.len(), bio.timesteps());
        let pred = self.surrogate.predict_batch(&self.optics_rows(bio)?);
        let mut values = vec![0.0; r_n * l_n * t_n];
        for (row, p) in pred.chunks(r_n).enumerate() {
            let (t, l) = (row / l_n, row % l_n);
            for (r, v) in p.iter().enumerate() {
                values[(r * l_n + l) * t_n + t] = *v;
            }
        }
        let labels = self.sensor.grid.iter().map(|l| format!("nm{l:.0}")).collect();
        PulseTensor::new(r_n, l_n, t_n, values, labels)
    }

    /// Noiseless sensor pulse `(R, N, T)`.
    pub fn forward_pulse(&self, bio: &BioParams) -> Result<PulseTensor> {
        mix_leds(&self.spectral_pulse(bio)?, &self.sensor)
    }

    /// Graph version of [`forward_pulse`](Self::forward_pulse) for a batch:
    /// `statics (B, 9)`, `dynamics (B, 2, T)` to pulses `(B, R, N, T)`.
    pub fn forward_graph(&self, g: &mut Graph, statics: Var, dynamics: Var) -> Result<Var> {
        let ds = g.shape(dynamics).to_vec();
        if ds.len() != 3 || ds[1] != 2 {
            return Err(PpgError::Invalid(format!("dynamics must be (B, 2, T), got {ds:?}")));
        }
        let (b, t) = (ds[0], ds[2]);
        let s = g.expand_last(statics, t);
        let theta = g.concat(&[s, dynamics])?;
        let theta = g.permute(theta, &[0, 2, 1])?;
        let props = self.optics_map(g, theta)?;
        let f = self.surrogate.forward_graph(g, props)?;

        let (r_n, l_n) = (self.receivers(), self.sensor.grid.len());
        let f = g.reshape(f, &[b, t, l_n, r_n])?;
        let f = g.permute(f, &[0, 3, 1, 2])?;
        if self.sensor.mode == SensorMode::WideSpectrum {
            return Ok(g.permute(f, &[0, 1, 3, 2])?);
        }
        let n = self.channels();
        let f = g.reshape(f, &[b * r_n * t, l_n])?;
        let w = g.input(Tensor::new(&[l_n, n], self.sensor.mixing_matrix()));
        let f = g.dense(f, w, None)?;
        let f = g.reshape(f, &[b, r_n, t, n])?;
        Ok(g.permute(f, &[0, 1, 3, 2])?)
    }

    /// Custom node: `theta (B, T, 11)` to surrogate inputs `(B*T*grid, 4)`,
    /// differentiated with exact forward-mode Jacobians.
    fn optics_map(&self, g: &mut Graph, theta: Var) -> Result<Var> {
        let l_n = self.sensor.grid.len();
        let values = g.value(theta).data().to_vec();
        let n_theta = values.len() / N_PARAMS;
        let mut out = Vec::with_capacity(n_theta * l_n * 4);
        let mut jac = Vec::with_capacity(n_theta * l_n);
        for th in values.chunks_exact(N_PARAMS) {
            let th: [f64; N_PARAMS] = th.try_into().expect("chunk of N_PARAMS");
            for &lambda in &self.sensor.grid {
                let (p, j) = optics::f_b_jacobian(&th, lambda, &self.spectra, &self.skin)?;
                out.extend_from_slice(&[p.mu_a[0], p.mu_a[1], p.mu_a[2], p.mu_s]);
                jac.push(j);
            }
        }
        let output = Tensor::new(&[n_theta * l_n, 4], out);
        Ok(g.custom(&[theta], output, Box::new(OpticsMap { jac, per_theta: l_n })))
    }
}

struct OpticsMap {
    jac: Vec<Jacobian>,
    per_theta: usize,
}

impl CustomOp for OpticsMap {
    fn name(&self) -> &'static str {
        "optics_map"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let mut grad = vec![0.0; inputs[0].len()];
        for (row, (go, j)) in grad_out.data().chunks_exact(4).zip(&self.jac).enumerate() {
            let gi = &mut grad[(row / self.per_theta) * N_PARAMS..][..N_PARAMS];
            for (k, gk) in gi.iter_mut().enumerate() {
                *gk += go[0] * j[0][k] + go[1] * j[1][k] + go[2] * j[2][k] + go[3] * j[3][k];
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), grad))]
    }
}
