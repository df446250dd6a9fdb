use rand::Rng;
use serde::{Deserialize, Serialize};

use ppgen_nn::{Conv1d, ConvTranspose1d, Graph, Linear, ParamStore, Var};

use crate::error::{PpgError, Result};

/// Per-timestep linear stack applied before the U-Net (wide-spectrum inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output widths of the four encoder blocks and the bottleneck.
    pub enc: [usize; 5],
    /// Output widths of the four decoder blocks.
    pub dec: [usize; 4],
    pub static_hidden: Vec<usize>,
    pub embedding: Option<EmbeddingConfig>,
    pub smooth_sigma: f64,
    pub smooth_size: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            enc: [8, 8, 4, 2, 4],
            dec: [4, 8, 8, 8],
            static_hidden: vec![150, 62, 31],
            embedding: None,
            smooth_sigma: 5.7,
            smooth_size: 19,
        }
    }

    pub fn paper() -> Self {
        Self { enc: [32, 32, 16, 8, 16], dec: [16, 32, 32, 32], ..Self::desk() }
    }

    pub fn with_embedding(mut self, hidden: Vec<usize>, dim: usize) -> Self {
        self.embedding = Some(EmbeddingConfig { hidden, dim });
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv1d::new(store, &format!("{name}.a"), cin, cout, 3, 1, 1, rng),
            b: Conv1d::new(store, &format!("{name}.b"), cout, cout, 3, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.a.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.b.forward(g, store, h)?;
        Ok(g.relu(h))
    }
}

/// U-Net over time with a static head on pooled encoder features and a
/// dynamic head on the smoothed decoder output. Outputs are unbounded latents.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub in_channels: usize,
    pub timesteps: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    embed: Vec<Linear>,
    enc: Vec<ConvBlock>,
    up: Vec<ConvTranspose1d>,
    dec: Vec<ConvBlock>,
    p1: Conv1d,
    p2: Conv1d,
    head: Vec<Linear>,
}

impl Encoder {
    pub fn new(
        config: &EncoderConfig,
        in_channels: usize,
        timesteps: usize,
        n_static: usize,
        n_dynamic: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !timesteps.is_multiple_of(16) || timesteps == 0 {
            return Err(PpgError::Config(format!("encoder needs T divisible by 16, got {timesteps}")));
        }
        let mut embed = Vec::new();
        let mut width = in_channels;
        if let Some(e) = &config.embedding {
            for (i, &h) in e.hidden.iter().chain(std::iter::once(&e.dim)).enumerate() {
                embed.push(Linear::new(store, &format!("embed.{i}"), width, h, rng));
                width = h;
            }
        }
        let c = config.enc;
        let mut enc = Vec::with_capacity(5);
        for (i, &out) in c.iter().enumerate() {
            enc.push(ConvBlock::new(store, &format!("enc.{i}"), width, out, rng));
            width = out;
        }
        let mut up = Vec::with_capacity(4);
        let mut dec = Vec::with_capacity(4);
        for (i, &out) in config.dec.iter().enumerate() {
            let skip = c[3 - i];
            up.push(ConvTranspose1d::new(store, &format!("up.{i}"), width, out, 2, 2, rng));
            dec.push(ConvBlock::new(store, &format!("dec.{i}"), out + skip, out, rng));
            width = out;
        }
        let p1 = Conv1d::new(store, "dyn.p1", width, width, 5, 4, 2, rng);
        let p2 = Conv1d::new(store, "dyn.p2", width, n_dynamic, 5, 2, 1, rng);
        let mut head = Vec::new();
        let mut hw: usize = c.iter().sum();
        for (i, &h) in config.static_hidden.iter().chain(std::iter::once(&n_static)).enumerate() {
            head.push(Linear::new(store, &format!("static.{i}"), hw, h, rng));
            hw = h;
        }
        Ok(Self {
            config: config.clone(),
            in_channels,
            timesteps,
            n_static,
            n_dynamic,
            embed,
            enc,
            up,
            dec,
            p1,
            p2,
            head,
        })
    }

    /// `x (B, C, T)` to static latents `(B, n_static)` and dynamic latents
    /// `(B, n_dynamic, T)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != self.in_channels || xs[2] != self.timesteps {
            return Err(PpgError::Invalid(format!(
                "encoder expects (B, {}, {}), got {xs:?}",
                self.in_channels, self.timesteps
            )));
        }
        let (b, t) = (xs[0], xs[2]);
        let mut h = x;
        if !self.embed.is_empty() {
            h = g.permute(h, &[0, 2, 1])?;
            h = g.reshape(h, &[b * t, self.in_channels])?;
            let last = self.embed.len() - 1;
            for (i, l) in self.embed.iter().enumerate() {
                h = l.forward(g, store, h)?;
                if i < last {
                    h = g.relu(h);
                }
            }
            let d = self.embed[last].fan_out;
            h = g.reshape(h, &[b, t, d])?;
            h = g.permute(h, &[0, 2, 1])?;
        }

        let mut skips = Vec::with_capacity(5);
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                h = g.max_pool1d(h)?;
            }
            h = block.forward(g, store, h)?;
            skips.push(h);
        }
        for (i, (up, block)) in self.up.iter().zip(&self.dec).enumerate() {
            h = up.forward(g, store, h)?;
            h = g.concat(&[h, skips[3 - i]])?;
            h = block.forward(g, store, h)?;
        }

        let s = g.gaussian_smooth(h, self.config.smooth_sigma, self.config.smooth_size)?;
        let d = self.p1.forward(g, store, s)?;
        let d = g.relu(d);
        let dynamic = self.p2.forward(g, store, d)?;

        let pooled: Vec<Var> = skips.iter().map(|v| g.mean_last(*v)).collect();
        let mut z = g.concat(&pooled)?;
        let last = self.head.len() - 1;
        for (i, l) in self.head.iter().enumerate() {
            z = l.forward(g, store, z)?;
            if i < last {
                z = g.relu(z);
            }
        }
        Ok((z, dynamic))
    }
}
