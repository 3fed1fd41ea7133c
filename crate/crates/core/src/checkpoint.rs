//! Self-describing binary checkpoint container shared by every component.
//!
//! Layout: magic `BVCK`, format version, a length-prefixed JSON header
//! (component name, config echo, parameter names/shapes, extras, optimizer
//! presence), then raw little-endian f64 data: parameters in declaration
//! order, followed by Adam first/second moments when present.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::params::{Arr, ParamStore};

const MAGIC: &[u8; 4] = b"BVCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    component: String,
    config: Config,
    params: Vec<ParamMeta>,
    extra: serde_json::Value,
    optimizer_step: Option<u64>,
}

pub struct OptimizerBlob {
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

pub struct Checkpoint {
    pub component: String,
    pub config: Config,
    pub params: Vec<(String, Arr)>,
    pub extra: serde_json::Value,
    pub optimizer: Option<OptimizerBlob>,
}

pub fn save(
    path: &Path,
    component: &str,
    config: &Config,
    store: &ParamStore,
    extra: serde_json::Value,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let header = Header {
        component: component.to_string(),
        config: config.clone(),
        params: store
            .ids()
            .map(|id| ParamMeta {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
        extra,
        optimizer_step: optimizer.map(|o| o.step),
    };
    let meta = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;
    for id in store.ids() {
        for x in store.value(id).iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    if let Some(adam) = optimizer {
        let (m, v) = adam.state();
        for arr in m.iter().chain(v.iter()) {
            for x in arr.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::CheckpointMissing(path.to_path_buf()));
    }
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    file.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    let meta_len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut meta = vec![0u8; meta_len];
    file.read_exact(&mut meta)?;
    let header: Header = serde_json::from_slice(&meta)?;
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;

    let mut offset = 0usize;
    let mut take_array = |shape: &[usize]| -> Result<Arr> {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > body.len() {
            return Err(Error::Checkpoint(format!("{}: truncated data", path.display())));
        }
        let vals: Vec<f64> = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        Ok(ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape consistent"))
    };

    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        params.push((p.name.clone(), take_array(&p.shape)?));
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut m = Vec::with_capacity(header.params.len());
            let mut v = Vec::with_capacity(header.params.len());
            for p in &header.params {
                m.push(take_array(&p.shape)?);
            }
            for p in &header.params {
                v.push(take_array(&p.shape)?);
            }
            Some(OptimizerBlob { step, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        component: header.component,
        config: header.config,
        params,
        extra: header.extra,
        optimizer,
    })
}

impl Checkpoint {
    /// Overwrite a freshly constructed store (same architecture) with the
    /// saved values. Names must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint {} vs model {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn expect_component(&self, want: &str) -> Result<()> {
        if self.component != want {
            return Err(Error::Checkpoint(format!(
                "expected a `{want}` checkpoint, found `{}`",
                self.component
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params;
    use rand::SeedableRng;

    #[test]
    fn round_trip_params_and_optimizer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("enc.w", params::xavier(&mut rng, &[3, 4], 3, 4));
        store.add("enc.b", params::uniform(&mut rng, &[1, 4], -1.0, 1.0));
        let mut adam = Adam::new(&store, 1e-3, 0.9, 0.98, 1e-9, 10);
        adam.step = 7;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bvck");
        let cfg = Config::default();
        save(&path, "demo", &cfg, &store, serde_json::json!({"k": 1}), Some(&adam)).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.component, "demo");
        assert_eq!(ck.params.len(), 2);
        assert_eq!(ck.optimizer.as_ref().unwrap().step, 7);
        assert_eq!(ck.extra["k"], 1);

        let mut store2 = ParamStore::new();
        store2.add("enc.w", params::zeros(&[3, 4]));
        store2.add("enc.b", params::zeros(&[1, 4]));
        ck.apply_to(&mut store2).unwrap();
        assert_eq!(store.checksum(), store2.checksum());
    }

    #[test]
    fn missing_file_is_checkpoint_missing() {
        let err = load(Path::new("/nonexistent/x.bvck"));
        assert!(matches!(err, Err(Error::CheckpointMissing(_))));
    }
}
