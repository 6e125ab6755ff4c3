use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use voxpart_autodiff::{checkpoint, Tensor};

use crate::ae::{AeConfig, Autoencoder, STRIDE};
use crate::camera::Camera;
use crate::config::RunConfig;
use crate::decoder::{DecoderConfig, PartDecoder};
use crate::error::{Error, Result};
use crate::image::{PartMap, RgbImage};
use crate::render::render_image;
use crate::unet::{UNet, UNetConfig};

use super::fit::FIELD_CHANNELS;

/// Version tag written next to model checkpoints.
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.tnsr";

/// Architecture of the autoencoder, denoiser and part decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub version: u32,
    pub resolution: usize,
    pub shift: f64,
    pub ae_width: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub parts: usize,
    pub code_width: usize,
    pub heads: usize,
    pub window: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let cfg = ModelConfig {
            version: FORMAT_VERSION,
            resolution: c.get("field.resolution")?,
            shift: c.get("field.b_shift")?,
            ae_width: c.get("ae.width")?,
            unet_base: c.get("unet.base_width")?,
            unet_mults: c.get_list("unet.mults")?,
            time_dim: c.get("unet.time_dim")?,
            cond_dim: c.get("unet.cond_dim")?,
            parts: c.get("decoder.K")?,
            code_width: c.get("decoder.D")?,
            heads: c.get("decoder.heads")?,
            window: c.get("decoder.sa_window")?,
            hidden: c.get("decoder.hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % STRIDE != 0 || self.resolution == 0 {
            return Err(Error::Config(format!(
                "field.resolution {} must be a positive multiple of {STRIDE}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn field_dims(&self) -> [usize; 3] {
        [self.resolution; 3]
    }

    /// Latent shape `[C_l, r/4, r/4, r/4]`; latent and field channels agree.
    pub fn latent_shape(&self) -> Vec<usize> {
        let l = self.resolution / STRIDE;
        vec![FIELD_CHANNELS, l, l, l]
    }

    fn ae(&self) -> AeConfig {
        AeConfig {
            field_channels: FIELD_CHANNELS,
            latent_channels: FIELD_CHANNELS,
            width: self.ae_width,
        }
    }

    fn unet(&self) -> UNetConfig {
        let l = self.resolution / STRIDE;
        UNetConfig {
            latent_channels: FIELD_CHANNELS,
            latent_dims: [l; 3],
            base_width: self.unet_base,
            mults: self.unet_mults.clone(),
            time_dim: self.time_dim,
            part_dim: self.parts * self.code_width,
            cond_dim: self.cond_dim,
            cond_hidden: 2 * self.time_dim,
        }
    }

    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            field_channels: FIELD_CHANNELS,
            parts: self.parts,
            width: self.code_width,
            heads: self.heads,
            window: self.window,
            hidden: self.hidden,
        }
    }
}

/// The trained components, saved and loaded together.
pub struct Model {
    pub cfg: ModelConfig,
    pub ae: Autoencoder,
    pub unet: UNet,
    pub decoder: PartDecoder,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ae = Autoencoder::new(cfg.ae(), rng);
        let unet = UNet::new(cfg.unet(), rng)?;
        let decoder = PartDecoder::new(cfg.decoder(), rng)?;
        Ok(Model { cfg, ae, unet, decoder })
    }

    /// Writes `model.json` and the parameter file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_vec_pretty(&self.cfg).map_err(|e| Error::invalid(e.to_string()))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        let all: Vec<(&str, &Tensor)> = self
            .ae
            .params
            .iter()
            .chain(self.unet.params.iter())
            .chain(self.decoder.params.iter())
            .collect();
        checkpoint::save(dir.join(PARAMS_FILE), &all)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: ModelConfig = serde_json::from_slice(&text).map_err(|source| Error::Json {
            path: cfg_path.clone(),
            source,
        })?;
        if cfg.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} does not match supported version {FORMAT_VERSION}",
                cfg.version
            )));
        }
        let named = checkpoint::load(dir.join(PARAMS_FILE))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::new(cfg, &mut rng)?;
        model.ae.load_named(&named)?;
        model.unet.load_named(&named)?;
        model.decoder.load_named(&named)?;
        Ok(model)
    }

    /// Decoder-mode render of a generated field: colour on white and part labels.
    pub fn render_view(&self, field_hat: &Tensor, camera: &Camera, samples: usize) -> Result<(RgbImage, PartMap)> {
        let s = field_hat.shape();
        let dims = [s[1], s[2], s[3]];
        let dec = &self.decoder;
        let shift = self.cfg.shift;
        // Refined features do not depend on the rays, so compute them once.
        let refined = {
            let tape = voxpart_autodiff::Tape::new();
            let p = dec.params.bind_frozen(&tape);
            let r = dec.refine(&p, tape.constant(field_hat.clone()))?;
            let out = (*r.value()).clone();
            out
        };
        let (img, labels) = render_image(camera, samples, dims, |tape, batch| {
            let p = dec.params.bind_frozen(tape);
            dec.render(&p, tape.constant(field_hat.clone()), tape.constant(refined.clone()), batch, shift)
        })?;
        let (w, h) = (camera.width, camera.height);
        let parts = PartMap {
            width: w,
            height: h,
            labels: labels.unwrap_or_else(|| vec![crate::image::BACKGROUND_LABEL; w * h]),
        };
        Ok((img, parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            version: FORMAT_VERSION,
            resolution: 8,
            shift: -2.0,
            ae_width: 4,
            unet_base: 4,
            unet_mults: vec![1, 2],
            time_dim: 8,
            cond_dim: 0,
            parts: 2,
            code_width: 8,
            heads: 2,
            window: 4,
            hidden: 8,
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let (a, b) = (m.decoder.part_code(), back.decoder.part_code());
        assert!(a.max_abs_diff(b) < 1e-6);

        let mut cfg = tiny_config();
        cfg.version = 99;
        fs::write(dir.path().join(CONFIG_FILE), serde_json::to_vec(&cfg).unwrap()).unwrap();
        let err = Model::load(dir.path()).err().unwrap().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
