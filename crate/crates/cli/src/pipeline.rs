//! Staged experiment runs: lut -> surrogate -> dataset -> npe -> hai -> evaluate.
//!
//! Every stage output is keyed by a hash of its inputs, which include the
//! content hashes of the upstream artifacts it reads. A stage whose artifacts
//! already exist and verify is skipped.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ppgen::dataset::{generate_clean, generate_observations, Dataset};
use ppgen::forward::Simulator;
use ppgen::inference::{
    evaluate, infer, learn_misspec, pretrain_npe, train_real_only, EvalReport, HaiReport, MisspecModel, NpeModel,
};
use ppgen::rng;
use ppgen::sensor::{MisspecKind, MisspecPlan, NoiseName};
use ppgen::surrogate::{build_lut, lut_bounds, train_surrogate, Lut, LutConfig, SurrogateModel};
use ppgen_nn::{Tensor, TensorFile};

use crate::config::{Assets, ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::store::{sha256_hex, write_atomic, ArtifactRef, Store};
use crate::tables;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Lut,
    Surrogate,
    Dataset,
    Npe,
    Hai,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lut => "lut",
            Self::Surrogate => "surrogate",
            Self::Dataset => "dataset",
            Self::Npe => "npe",
            Self::Hai => "hai",
            Self::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub name: String,
    pub key: String,
    pub tags: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRef>,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// Hash of everything but wall-clock times and skip flags, so an
    /// identical rerun reproduces it.
    pub fn digest(&self) -> Result<String> {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.seconds = 0.0;
            s.skipped = false;
        }
        Ok(sha256_hex(&serde_json::to_vec(&m)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)?;
        serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn record(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn of_stage(&self, stage: Stage) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(move |s| s.stage == stage)
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(&json!({ "version": CODE_VERSION, "config": cfg }))?))
}

pub fn misspec_to_file(m: &MisspecModel, report: Option<&HaiReport>) -> TensorFile {
    let mut f = TensorFile::new(json!({ "kind": "misspec", "report": report }));
    f.push("beta", Tensor::new(&[m.receivers, m.channels], m.beta.clone()));
    f
}

pub fn misspec_from_file(f: &TensorFile) -> Result<MisspecModel> {
    if f.meta["kind"] != "misspec" {
        return Err(CliError::Usage("not a misspecification file".into()));
    }
    let t = f.get("beta")?;
    let &[r, n] = t.shape() else {
        return Err(CliError::Usage("beta must be (receivers, channels)".into()));
    };
    Ok(MisspecModel { receivers: r, channels: n, beta: t.data().to_vec() })
}

/// Per-replicate seed for a labeled consumer.
pub fn replicate_seed(base: u64, replicate: u64, label: &str) -> u64 {
    rng::derive(rng::derive_index(base, replicate), label)
}

fn tag(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

struct Output {
    name: String,
    ext: &'static str,
}

fn out(name: impl Into<String>, ext: &'static str) -> Output {
    Output { name: name.into(), ext }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    store: &'a Store,
    assets: Assets,
    assets_digest: String,
    manifest: RunManifest,
    path: std::path::PathBuf,
}

/// Run every stage up to and including `until`.
pub fn run_pipeline(cfg: &ExperimentConfig, store: &Store, until: Stage) -> Result<RunManifest> {
    cfg.validate()?;
    let assets = cfg.assets()?;
    let config_hash = config_hash(cfg)?;
    let path = store.manifest_path(&config_hash);
    let assets_digest = sha256_hex(&serde_json::to_vec(&assets)?);
    let manifest = RunManifest {
        config_hash,
        code_version: CODE_VERSION.to_string(),
        status: RunStatus::Running,
        config: cfg.clone(),
        stages: Vec::new(),
    };
    let mut run = Runner { cfg, store, assets, assets_digest, manifest, path };
    run.manifest.save(&run.path)?;
    match run.execute(until) {
        Ok(()) => {
            run.manifest.status = RunStatus::Complete;
            run.manifest.save(&run.path)?;
            Ok(run.manifest)
        }
        Err(e) => {
            let stage = match &e {
                CliError::Stage { stage, .. } => stage.clone(),
                _ => "pipeline".to_string(),
            };
            let error = match &e {
                CliError::Stage { source, .. } => source.to_string(),
                other => other.to_string(),
            };
            run.manifest.status = RunStatus::Failed { stage, error };
            run.manifest.save(&run.path)?;
            Err(e)
        }
    }
}

/// Upstream artifacts a stage reads, resolved lazily.
#[derive(Clone)]
struct Upstream {
    surrogate: ArtifactRef,
    obs_surrogate: Option<ArtifactRef>,
}

impl<'a> Runner<'a> {
    fn stage(
        &mut self,
        stage: Stage,
        name: String,
        tags: BTreeMap<String, String>,
        inputs: Value,
        outputs: Vec<Output>,
        produce: impl FnOnce(&Self) -> Result<Vec<Vec<u8>>>,
    ) -> Result<Vec<ArtifactRef>> {
        let wrap = |e: CliError| CliError::Stage { stage: name.clone(), source: Box::new(e) };
        let key = sha256_hex(
            &serde_json::to_vec(&json!({ "stage": stage, "name": name, "version": CODE_VERSION, "inputs": inputs }))
                .map_err(|e| wrap(e.into()))?,
        );
        let start = Instant::now();
        let found = outputs
            .iter()
            .map(|o| self.store.lookup(&o.name, &key, o.ext))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let (artifacts, skipped) = if found.iter().all(Option::is_some) {
            (found.into_iter().flatten().collect(), true)
        } else {
            log::info!("{name}: running");
            let bytes = produce(self).map_err(wrap)?;
            let refs = outputs
                .iter()
                .zip(&bytes)
                .map(|(o, b)| self.store.put(&o.name, &key, o.ext, b))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            (refs, false)
        };
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{name}: {} in {seconds:.1} s", if skipped { "skipped" } else { "done" });
        self.manifest.stages.push(StageRecord {
            stage,
            name,
            key,
            tags,
            artifacts: artifacts.clone(),
            seconds,
            skipped,
        });
        self.manifest.save(&self.path)?;
        Ok(artifacts)
    }

    fn load_dataset(&self, r: &ArtifactRef) -> Result<Dataset> {
        Ok(Dataset::from_tensor_file(&self.store.read_tensors(r)?)?)
    }

    fn load_npe(&self, r: &ArtifactRef) -> Result<NpeModel> {
        Ok(NpeModel::from_tensor_file(&self.store.read_tensors(r)?)?)
    }

    fn simulator(&self, surrogate: &ArtifactRef, perturbed: bool) -> Result<Simulator> {
        let model = SurrogateModel::from_tensor_file(&self.store.read_tensors(surrogate)?)?;
        let a = &self.assets;
        Ok(Simulator::new(a.space.clone(), a.spectra.clone(), Assets::skin(perturbed), model, a.sensor.clone()))
    }

    fn lut_config(&self, perturbed: bool) -> LutConfig {
        let mut c = self.cfg.lut.clone().for_skin(&Assets::skin(perturbed));
        c.seed =
            replicate_seed(self.cfg.lut.seed, self.cfg.asset_seed, if perturbed { "lut-perturbed" } else { "lut" });
        c
    }

    /// Lookup table and surrogate for one skin geometry.
    fn optics(&mut self, perturbed: bool, until: Stage) -> Result<Option<ArtifactRef>> {
        let suffix = if perturbed { "perturbed" } else { "nominal" };
        let skin = Assets::skin(perturbed);
        let lut_cfg = self.lut_config(perturbed);
        let grid = &self.assets.sensor.grid;
        let range = (grid[0], grid[grid.len() - 1]);
        let bounds = lut_bounds(&self.assets.space, &self.assets.spectra, &skin, range, 1.0)?;
        let name = format!("lut-{suffix}");
        let lut = self.stage(
            Stage::Lut,
            name.clone(),
            tag(&[("skin", suffix.into())]),
            json!({ "config": lut_cfg, "bounds": bounds }),
            vec![out(name, "ppgt")],
            |_| {
                let mut sim = lut_cfg.simulator();
                sim.prepare(&bounds.mu_s_grid(lut_cfg.n_mu_s))?;
                Ok(vec![build_lut(&lut_cfg, bounds, &sim)?.to_tensor_file().to_bytes()])
            },
        )?;
        if until == Stage::Lut {
            return Ok(None);
        }
        let mut sur_cfg = self.cfg.surrogate.clone();
        sur_cfg.seed = replicate_seed(sur_cfg.seed, self.cfg.asset_seed, &format!("surrogate-{suffix}"));
        let name = format!("surrogate-{suffix}");
        let lut_ref = lut[0].clone();
        let sur = self.stage(
            Stage::Surrogate,
            name.clone(),
            tag(&[("skin", suffix.into())]),
            json!({ "config": sur_cfg, "lut": lut_ref.sha256 }),
            vec![out(name, "ppgt")],
            |run| {
                let lut = Lut::from_tensor_file(&run.store.read_tensors(&lut_ref)?)?;
                let (model, report) = train_surrogate(&lut, &sur_cfg)?;
                let mut f = model.to_tensor_file();
                f.meta["report"] = serde_json::to_value(&report)?;
                Ok(vec![f.to_bytes()])
            },
        )?;
        Ok(Some(sur[0].clone()))
    }

    fn execute(&mut self, until: Stage) -> Result<()> {
        let cfg = self.cfg;
        let nominal = self.optics(false, until)?;
        let perturbed =
            if cfg.kinds.iter().any(|k| k.needs_skin_surrogate()) { self.optics(true, until)? } else { None };
        let Some(surrogate) = nominal else { return Ok(()) };
        if until == Stage::Surrogate {
            return Ok(());
        }
        let up = Upstream { surrogate, obs_surrogate: perturbed };
        for &seed in &cfg.seeds {
            self.replicate(seed, &up, until)?;
        }
        Ok(())
    }

    fn dataset(&mut self, seed: u64, role: &str, kind: Option<MisspecKind>, up: &Upstream) -> Result<ArtifactRef> {
        let cfg = self.cfg;
        let (n, plan) = match (role, kind) {
            ("train", _) => (cfg.data.train, None),
            ("val", _) => (cfg.data.val, None),
            ("fit", Some(k)) => (cfg.data.obs, Some(MisspecPlan::new(k, cfg.noise))),
            (_, Some(k)) => (cfg.data.test, Some(MisspecPlan::new(k, cfg.noise))),
            _ => unreachable!("observation sets carry a kind"),
        };
        let perturbed = plan.is_some_and(|p| p.obs_skin);
        let sur =
            if perturbed { up.obs_surrogate.clone().expect("perturbed surrogate built") } else { up.surrogate.clone() };
        let data_seed = match kind {
            None => replicate_seed(seed, 0, role),
            Some(k) => replicate_seed(seed, 0, &format!("{k}-{role}")),
        };
        let name = match kind {
            None => format!("data-s{seed}-{role}"),
            Some(k) => format!("data-s{seed}-{k}-{role}"),
        };
        let mut tags = vec![("seed", seed.to_string()), ("role", role.to_string())];
        if let Some(k) = kind {
            tags.push(("kind", k.to_string()));
        }
        let inputs = json!({
            "n": n, "seed": data_seed, "plan": plan, "surrogate": sur.sha256, "assets": self.assets_digest,
        });
        let refs = self.stage(Stage::Dataset, name.clone(), tag(&tags), inputs, vec![out(name, "ppgt")], |run| {
            let sim = run.simulator(&sur, perturbed)?;
            let data = match plan {
                None => generate_clean(&sim, n, data_seed)?,
                Some(p) => generate_observations(&sim, &p, n, data_seed)?,
            };
            let meta = json!({ "seed": seed, "role": role, "plan": plan });
            Ok(vec![data.to_tensor_file(meta)?.to_bytes()])
        })?;
        Ok(refs[0].clone())
    }

    fn replicate(&mut self, seed: u64, up: &Upstream, until: Stage) -> Result<()> {
        let cfg = self.cfg;
        let train = self.dataset(seed, "train", None, up)?;
        let val = self.dataset(seed, "val", None, up)?;
        let mut obs = BTreeMap::new();
        for &k in &cfg.kinds {
            let fit = self.dataset(seed, "fit", Some(k), up)?;
            let test = self.dataset(seed, "test", Some(k), up)?;
            obs.insert(k, (fit, test));
        }
        if until == Stage::Dataset {
            return Ok(());
        }

        let mut noises: Vec<NoiseName> = cfg.kinds.iter().map(|&k| MisspecPlan::new(k, cfg.noise).sim_noise).collect();
        noises.sort();
        noises.dedup();
        let mut npe_cfg = cfg.npe_config();
        npe_cfg.seed = replicate_seed(npe_cfg.seed, seed, "npe");
        let mut npes = BTreeMap::new();
        for noise in noises {
            let name = format!("npe-s{seed}-{noise}");
            let inputs = json!({ "config": npe_cfg, "train": train.sha256, "val": val.sha256, "noise": noise });
            let (tr, va, c) = (train.clone(), val.clone(), npe_cfg.clone());
            let tags = tag(&[("seed", seed.to_string()), ("noise", noise.to_string())]);
            let refs = self.stage(Stage::Npe, name.clone(), tags, inputs, vec![out(name, "ppgt")], |run| {
                let (train, val) = (run.load_dataset(&tr)?, run.load_dataset(&va)?);
                let (model, report) = pretrain_npe(&run.assets.space, &train, &val, noise.level(), &c)?;
                let mut f = model.to_tensor_file(&run.assets.space);
                f.meta["report"] = serde_json::to_value(&report)?;
                Ok(vec![f.to_bytes()])
            })?;
            npes.insert(noise, refs[0].clone());
        }
        if until == Stage::Npe {
            return Ok(());
        }

        let mut hai_cfg = cfg.hai.clone();
        hai_cfg.seed = replicate_seed(hai_cfg.seed, seed, "hai");
        // (npe, beta) per kind and method; Sim-only uses the pretrained NPE uncorrected
        let mut fitted: BTreeMap<(MisspecKind, Method), (ArtifactRef, Option<ArtifactRef>)> = BTreeMap::new();
        for &k in &cfg.kinds {
            let npe = npes[&MisspecPlan::new(k, cfg.noise).sim_noise].clone();
            let fit = obs[&k].0.clone();
            let tags = tag(&[("seed", seed.to_string()), ("kind", k.to_string())]);
            let common = json!({ "config": hai_cfg, "obs": fit.sha256, "surrogate": up.surrogate.sha256, "assets": self.assets_digest });
            if cfg.methods.contains(&Method::Hai) {
                let name = format!("hai-s{seed}-{k}");
                let inputs = json!({ "common": common, "npe": npe.sha256 });
                let (n, f, s, c) = (npe.clone(), fit.clone(), up.surrogate.clone(), hai_cfg.clone());
                let refs =
                    self.stage(Stage::Hai, name.clone(), tags.clone(), inputs, vec![out(name, "ppgt")], |run| {
                        let model = run.load_npe(&n)?;
                        let obs = run.load_dataset(&f)?;
                        let sim = run.simulator(&s, false)?;
                        let (m, report) = learn_misspec(&model, &obs.pulses, &sim, &c)?;
                        Ok(vec![misspec_to_file(&m, Some(&report)).to_bytes()])
                    })?;
                fitted.insert((k, Method::Hai), (npe.clone(), Some(refs[0].clone())));
            }
            if cfg.methods.contains(&Method::RealOnly) {
                let name = format!("real-only-s{seed}-{k}");
                let encoder = npe_cfg.encoder.clone();
                let inputs = json!({ "common": common, "encoder": encoder });
                let (f, s, c) = (fit.clone(), up.surrogate.clone(), hai_cfg.clone());
                let outputs = vec![out(format!("{name}-npe"), "ppgt"), out(format!("{name}-beta"), "ppgt")];
                let refs = self.stage(Stage::Hai, name, tags.clone(), inputs, outputs, |run| {
                    let obs = run.load_dataset(&f)?;
                    let sim = run.simulator(&s, false)?;
                    let (model, m, report) = train_real_only(&run.assets.space, &obs.pulses, &sim, &encoder, &c)?;
                    let mut nf = model.to_tensor_file(&run.assets.space);
                    nf.meta["report"] = serde_json::to_value(&report)?;
                    Ok(vec![nf.to_bytes(), misspec_to_file(&m, Some(&report)).to_bytes()])
                })?;
                fitted.insert((k, Method::RealOnly), (refs[0].clone(), Some(refs[1].clone())));
            }
            if cfg.methods.contains(&Method::SimOnly) {
                fitted.insert((k, Method::SimOnly), (npe, None));
            }
        }
        if until == Stage::Hai {
            return Ok(());
        }

        for ((k, method), (npe, beta)) in fitted {
            let test = obs[&k].1.clone();
            let name = format!("eval-s{seed}-{k}-{method}");
            let tags = tag(&[("seed", seed.to_string()), ("kind", k.to_string()), ("method", method.to_string())]);
            let inputs = json!({
                "npe": npe.sha256, "beta": beta.as_ref().map(|b| &b.sha256), "test": test.sha256, "method": method,
            });
            self.stage(Stage::Evaluate, name.clone(), tags, inputs, vec![out(name, "csv")], |run| {
                let model = run.load_npe(&npe)?;
                let data = run.load_dataset(&test)?;
                let (r, n, _) = model.shape();
                let m = match &beta {
                    Some(b) => misspec_from_file(&run.store.read_tensors(b)?)?,
                    None => MisspecModel::zeros(r, n),
                };
                Ok(vec![tables::eval_csv_bytes(&evaluate_set(&data, &model, &m)?)?])
            })?;
        }
        Ok(())
    }
}

/// Posterior means of a labeled set scored against its labels.
pub fn evaluate_set(data: &Dataset, npe: &NpeModel, misspec: &MisspecModel) -> Result<EvalReport> {
    let est: Vec<_> = infer(&data.pulses, npe, misspec)?.into_iter().map(|p| p.mean).collect();
    Ok(evaluate(&est, &data.thetas)?)
}
