//! All trainable weights of the pipeline plus the fixed geometry they run on.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skyalign_tensor::io::{load_checkpoint, save_checkpoint};
use skyalign_tensor::{ParamId, ParamStore};

use crate::config::Config;
use crate::correlation::SearchGeometry;
use crate::error::{Error, Result};
use crate::geometry::Pose3DoF;
use crate::optimizer::OptimizerParams;
use crate::synthesis::{SynthesisGeometry, SynthesisParams};

#[derive(Debug)]
pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    pub synth: SynthesisParams,
    pub opt: OptimizerParams,
    /// Loss balancing weights.
    pub lambda1: ParamId,
    pub lambda2: ParamId,
    pub geom: SynthesisGeometry,
}

impl Model {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        if cfg.identity_encoder {
            return Err(Error::Config("identity_encoder has no trainable model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let synth = SynthesisParams::new(&mut store, cfg, &mut rng)?;
        let opt = OptimizerParams::new(&mut store, cfg, &mut rng)?;
        let lambda1 = store.add_full("lambda1", &[1], cfg.lambda1_init)?;
        let lambda2 = store.add_full("lambda2", &[1], cfg.lambda2_init)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            synth,
            opt,
            lambda1,
            lambda2,
            geom: SynthesisGeometry::new(cfg)?,
        })
    }

    /// Builds the architecture for `cfg` and loads weights from a checkpoint
    /// directory; names and shapes must match.
    pub fn load(cfg: &Config, dir: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        let saved = load_checkpoint(dir)?;
        m.store.load_from(&saved)?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(dir, &self.store)?)
    }

    /// Correlation template and search window, centered on the prior's
    /// translation.
    pub fn search_geometry(&self, prior: &Pose3DoF) -> Result<SearchGeometry> {
        search_geometry(&self.cfg, self.cfg.correlation_level().max(1), prior)
    }

    pub fn lambdas(&self) -> (f64, f64) {
        (self.store.get(self.lambda1).data()[0], self.store.get(self.lambda2).data()[0])
    }
}

/// Search geometry at exponent `e` for a config.
pub fn search_geometry(cfg: &Config, e: usize, prior: &Pose3DoF) -> Result<SearchGeometry> {
    let sat = cfg.satellite()?.at_level(e)?;
    let off = (
        (-prior.t_z / sat.alpha).round() as isize,
        (-prior.t_x / sat.alpha).round() as isize,
    );
    SearchGeometry::new(&sat, cfg.template_m, cfg.search_range_m, off)
}
