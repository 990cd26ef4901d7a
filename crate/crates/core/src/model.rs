//! The trainable model: parameter store plus the sub-networks that read from it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AudioConfig, AudioEncoder, LatentConfig, LatentVolume};
use crate::error::{Error, Result};
use crate::fields::{DeformConfig, DeformField, FieldConfig, Pose, SemanticField};
use crate::numerics::{checkpoint, Init, ParamStore};
use crate::renderer::{RenderConfig, SceneBox};

/// Samples per ray for the coarse and fine passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Samples {
    pub coarse: usize,
    pub fine: usize,
}

impl Default for Samples {
    fn default() -> Self {
        Self { coarse: 32, fine: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub field: FieldConfig,
    /// `None` disables the deformation field entirely.
    pub deform: Option<DeformConfig>,
    /// `None` disables the anchored latent features.
    pub latent: Option<LatentConfig>,
    pub audio: AudioConfig,
    pub background_class: usize,
    pub samples: Samples,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            deform: Some(DeformConfig::default()),
            latent: Some(LatentConfig::default()),
            audio: AudioConfig::default(),
            background_class: 0,
            samples: Samples::default(),
        }
    }
}

/// Scene facts the model needs besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub scene_box: SceneBox,
    /// Anchor positions in world coordinates.
    pub anchors: Vec<[f64; 3]>,
    /// Head pose of frame 0.
    pub canonical: Pose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelDescription {
    config: ModelConfig,
    scene: SceneInfo,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub scene: SceneInfo,
    pub store: ParamStore,
    pub field: SemanticField,
    pub deform: Option<DeformField>,
    pub audio: AudioEncoder,
    pub latent: Option<LatentVolume>,
}

impl Model {
    pub fn new(config: ModelConfig, scene: SceneInfo, init: Init, seed: u64) -> Result<Self> {
        if config.background_class >= config.field.classes {
            return Err(Error::Contract(format!(
                "background class {} outside {} classes",
                config.background_class, config.field.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let latent_dim = config.latent.as_ref().map_or(0, |l| l.code_dim);
        let field = SemanticField::new(
            &mut store,
            config.field,
            config.audio.feature_dim,
            latent_dim,
            init,
            &mut rng,
        )?;
        let deform = config
            .deform
            .map(|d| DeformField::new(&mut store, d, init, &mut rng))
            .transpose()?;
        let audio = AudioEncoder::new(&mut store, config.audio, init, &mut rng)?;
        let latent = match &config.latent {
            Some(lc) => {
                let anchors = scene
                    .anchors
                    .iter()
                    .map(|a| scene.scene_box.normalize(*a))
                    .collect();
                Some(LatentVolume::new(&mut store, lc.clone(), anchors, init, &mut rng)?)
            }
            None => None,
        };
        Ok(Self {
            config,
            scene,
            store,
            field,
            deform,
            audio,
            latent,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.field.classes
    }

    pub fn render_config(&self, near: f64, far: f64, chunk: usize) -> RenderConfig {
        RenderConfig {
            n_coarse: self.config.samples.coarse,
            n_fine: self.config.samples.fine,
            near,
            far,
            chunk,
        }
    }

    pub fn description(&self) -> serde_json::Value {
        serde_json::to_value(ModelDescription {
            config: self.config.clone(),
            scene: self.scene.clone(),
        })
        .expect("model description serializes")
    }

    pub fn save(&self, path: &Path) -> Result<checkpoint::Manifest> {
        checkpoint::save(path, &self.store, self.description())
    }

    /// Rebuild the architecture described in the manifest and load its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(path)?;
        let desc: ModelDescription = serde_json::from_value(manifest.model.clone())
            .map_err(|e| Error::json(path, e))?;
        let mut model = Model::new(desc.config, desc.scene, Init::Zeros, 0)?;
        checkpoint::load_into(path, &mut model.store)?;
        Ok(model)
    }
}
