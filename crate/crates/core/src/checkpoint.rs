//! Checkpoints: a text manifest naming each tensor with its shape and byte
//! offset, one little-endian `f32` blob, and the run configuration.
//!
//! ```text
//! format = stpfnet-checkpoint-1
//! step = 200
//! rng_seed = 0x9e3779b97f4a7c15
//! rng_word_pos = 3200
//! [tensors]
//! enc_q.stage1.down.weight = 16x1x3x3 @ 0
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Stpfnet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const CONFIG: &str = "config.toml";
const FORMAT: &str = "stpfnet-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer updates applied so far.
    pub step: usize,
    /// Clip-sampler seed and position.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Parameters, rounded to `f32` precision.
    pub params: ParamStore,
}

fn round_f32(store: &ParamStore) -> ParamStore {
    let mut out = store.clone();
    for v in out.values_mut() {
        *v = v.map(|x| f64::from(x as f32));
    }
    out
}

impl Checkpoint {
    /// Captures `model`. Parameters are rounded to the on-disk precision here,
    /// so a model rebuilt from this value and one loaded from disk agree
    /// bit for bit.
    pub fn new(model: &Stpfnet, config: &RunConfig, step: usize, rng_seed: u64, rng_word_pos: u128) -> Self {
        Self {
            config: config.clone(),
            step,
            rng_seed,
            rng_word_pos,
            params: round_f32(&model.params),
        }
    }

    /// Rebuilds the network and installs the stored parameters.
    pub fn model(&self) -> Result<Stpfnet> {
        let mut model = Stpfnet::new(&self.config.model, self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::validation(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in self.params.iter() {
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| Error::validation(format!("checkpoint tensor {name} is not part of the model")))?;
            if model.params.get(id).shape() != value.shape() {
                return Err(Error::validation(format!("checkpoint tensor {name} has the wrong shape")));
            }
            model.params.set(id, value.clone());
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!(
            "format = {FORMAT}\nstep = {}\nrng_seed = {:#018x}\nrng_word_pos = {}\n[tensors]\n",
            self.step, self.rng_seed, self.rng_word_pos
        );
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 4);
        for (name, value) in self.params.iter() {
            let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{name} = {} @ {}", dims.join("x"), blob.len());
            for &x in value.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let write = |file: &str, bytes: &[u8]| {
            let p = dir.join(file);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(MANIFEST, manifest.as_bytes())?;
        write(BLOB, &blob)?;
        write(CONFIG, self.config.to_toml().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |file: &str| {
            let p = dir.join(file);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest_path = dir.join(MANIFEST);
        let bad = |msg: String| Error::format(&manifest_path, msg);
        let manifest = String::from_utf8(read(MANIFEST)?).map_err(|_| bad("not UTF-8".into()))?;
        let blob = read(BLOB)?;
        let config_text = String::from_utf8(read(CONFIG)?).map_err(|_| Error::format(dir.join(CONFIG), "not UTF-8"))?;
        let config = RunConfig::from_toml(&config_text).map_err(|e| Error::format(dir.join(CONFIG), e.to_string()))?;

        let mut header = std::collections::BTreeMap::new();
        let mut params = ParamStore::new();
        let mut in_tensors = false;
        for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line == "[tensors]" {
                in_tensors = true;
                continue;
            }
            let (key, value) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if !in_tensors {
                header.insert(key.to_string(), value.to_string());
                continue;
            }
            let (dims, offset) = value.split_once(" @ ").ok_or_else(|| bad(format!("malformed tensor entry {line:?}")))?;
            let shape = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| bad(format!("bad shape in {line:?}")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
            let n: usize = shape.iter().product();
            let bytes = blob
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("{key} extends past the end of {BLOB}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            params.add(key, Tensor::new(shape, data)?);
        }
        let field = |name: &str| header.get(name).ok_or_else(|| bad(format!("missing header field {name}")));
        if field("format")? != FORMAT {
            return Err(bad(format!("unsupported format {}", field("format")?)));
        }
        let seed = field("rng_seed")?;
        Ok(Self {
            config,
            step: field("step")?.parse().map_err(|_| bad("bad step".into()))?,
            rng_seed: u64::from_str_radix(seed.trim_start_matches("0x"), 16).map_err(|_| bad("bad rng_seed".into()))?,
            rng_word_pos: field("rng_word_pos")?.parse().map_err(|_| bad("bad rng_word_pos".into()))?,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::model::ModelConfig;

    fn small_config() -> RunConfig {
        RunConfig {
            seed: 4,
            model: ModelConfig {
                encoder: EncoderConfig {
                    in_channels: 1,
                    stage_channels: vec![4, 8, 16],
                },
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small_config();
        let model = Stpfnet::new(&cfg.model, cfg.seed).unwrap();
        let ck = Checkpoint::new(&model, &cfg, 17, 0xdead_beef, 1234);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.model().unwrap();
        for (a, b) in rebuilt.params.values().iter().zip(ck.params.values()) {
            assert!(a.bitwise_eq(b));
        }
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("enc_q.stage1.down.weight = 4x1x3x3 @ 0\n"));
        assert!(manifest.contains("rng_seed = 0x00000000deadbeef\n"));
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let cfg = small_config();
        let model = Stpfnet::new(&cfg.model, cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(&model, &cfg, 0, 0, 0).save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn architecture_mismatch_detected() {
        let cfg = small_config();
        let model = Stpfnet::new(&cfg.model, cfg.seed).unwrap();
        let mut ck = Checkpoint::new(&model, &cfg, 0, 0, 0);
        ck.config.model.msff = false;
        assert!(ck.model().is_err());
    }
}
