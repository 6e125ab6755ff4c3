//! Line-oriented `key = value` configuration with declared keys.
//!
//! Layers are merged in order defaults < file < environment < flags. Every
//! key must be declared in [`KEYS`]; anything else is rejected so typos fail
//! loudly instead of silently falling back to a default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable consulted for a config path when `--config` is absent.
pub const CONFIG_ENV: &str = "VOXPART_CONFIG";
/// Prefix for per-key environment overrides, e.g. `VOXPART_FIT__ITERATIONS`.
pub const ENV_PREFIX: &str = "VOXPART_";

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for all randomness"),
    ("threads", "0", "worker threads (0 = all cores)"),
    ("data.templates", "stool,table,lamp,plane-toy", "scene templates, cycled over objects"),
    ("data.objects", "8", "training objects"),
    ("data.test_objects", "0", "extra held-out objects for evaluation"),
    ("data.views", "40", "training views per object"),
    ("data.heldout_views", "10", "held-out views per object"),
    ("data.image_size", "64", "render width and height in pixels"),
    ("field.resolution", "24", "voxel grid extent per axis"),
    ("field.b_shift", "-2.0", "density activation shift"),
    ("render.samples", "48", "samples per ray"),
    ("fit.iterations", "1000", "field fitting steps per object"),
    ("fit.rays_per_step", "2048", "rays per fitting step"),
    ("fit.lr", "0.1", "field learning rate"),
    ("fit.tv_weight", "1e-6", "total-variation weight during fitting"),
    ("fit.optimizer", "adam", "optimizer for field grids"),
    ("ae.width", "8", "autoencoder base channel width"),
    ("ae.beta", "1e-4", "KL weight"),
    ("ae.lr", "2e-3", "autoencoder learning rate"),
    ("ae.steps", "2000", "autoencoder pretraining steps"),
    ("ae.batch", "1", "fields per autoencoder step"),
    ("unet.base_width", "16", "UNet base channel width"),
    ("unet.mults", "1,2,4", "UNet channel multipliers per level"),
    ("unet.time_dim", "32", "time embedding dimension"),
    ("unet.cond_dim", "0", "optional conditioning embedding size (0 disables)"),
    ("unet.cond_drop", "0.1", "probability of replacing the embedding by the null embedding"),
    ("decoder.K", "4", "number of parts"),
    ("decoder.D", "32", "part code and refined feature width"),
    ("decoder.heads", "4", "attention heads"),
    ("decoder.sa_window", "4", "self-attention window edge in voxels (0 = full)"),
    ("decoder.hidden", "32", "hidden width of the colour and part heads"),
    ("diffusion.steps", "20", "sampler steps"),
    ("diffusion.t_min", "1e-3", "lower clamp for t"),
    ("diffusion.guidance_scale", "1.0", "classifier-free guidance scale"),
    ("diffusion.schedule", "uniform", "sampler time schedule"),
    ("train.iterations", "2000", "joint training steps"),
    ("train.warmup_iters", "400", "steps before the part decoder starts training"),
    ("train.rays_per_step", "512", "rays per joint step"),
    ("train.views_per_step", "4", "views sampled per joint step"),
    ("train.optimizer", "adam", "optimizer for UNet and decoder"),
    ("train.lr_unet", "1e-3", "UNet learning rate"),
    ("train.lr_decoder", "1e-3", "decoder learning rate"),
    ("train.tv_weight", "1e-4", "total-variation weight on the decoded field"),
    ("train.z_weight", "1e-4", "part code norm penalty weight"),
    ("train.skip_alignment", "normalized", "gradient-skip resampling rule"),
    ("train.checkpoint_every", "500", "steps between checkpoints (0 = end only)"),
    ("train.snapshot_every", "0", "steps between render snapshots (0 = never)"),
    ("sample.count", "4", "shapes per sample command"),
    ("sample.views", "8", "turntable views per sample"),
    ("interp.frames", "5", "interpolation frames"),
    ("metrics.points", "512", "points per cloud"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Merged configuration. Values are kept as strings and parsed on access.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Parses config text; `#` starts a comment, blank lines are ignored.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `VOXPART_<KEY>` variables; dots become `__`, case-insensitive.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            if rest == "CONFIG" {
                continue;
            }
            let wanted = rest.to_ascii_lowercase().replace("__", ".");
            match KEYS.iter().find(|(k, _, _)| k.to_ascii_lowercase() == wanted) {
                Some((k, _, _)) => self.set(k, &value)?,
                None => return Err(Error::Config(format!("unknown key in environment variable {name}"))),
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("undeclared key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse element `{s}`")))
            })
            .collect()
    }

    /// Serialises every key in declaration order; `merge_str` reads it back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{k} = {}\n", self.values[*k]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_round_trip() {
        let mut c = RunConfig::default();
        c.merge_str("fit.lr = 0.5\n# comment\n\nseed=3 # trailing").unwrap();
        c.merge_env([("VOXPART_FIT__LR".to_string(), "0.25".to_string())]).unwrap();
        assert_eq!(c.get::<f64>("fit.lr").unwrap(), 0.25);
        c.set_pair("fit.lr=0.125").unwrap();
        assert_eq!(c.get::<f64>("fit.lr").unwrap(), 0.125);
        assert_eq!(c.get::<u64>("seed").unwrap(), 3);
        let mut back = RunConfig::default();
        back.merge_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("fit.lrr", "1").is_err());
        let err = c.merge_str("ok\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(c.merge_env([("VOXPART_NOPE".to_string(), "1".to_string())]).is_err());
        assert!(c.merge_env([("HOME".to_string(), "/".to_string())]).is_ok());
    }

    #[test]
    fn typed_access() {
        let c = RunConfig::default();
        assert_eq!(c.get_list::<usize>("unet.mults").unwrap(), vec![1, 2, 4]);
        assert_eq!(c.get::<usize>("decoder.K").unwrap(), 4);
        assert!(c.get::<usize>("fit.lr").is_err());
        assert!(c.raw("nope").is_err());
    }
}
