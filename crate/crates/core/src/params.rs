//! Layer-structured model parameters with role tags, and the on-disk
//! checkpoint format.
//!
//! A checkpoint is two files sharing a stem:
//!
//! * `<stem>.manifest`: plain text, one line per tensor:
//!   `layer <name> <role> <tier> <tensor-index> <dim>x<dim>...`, preceded by a
//!   `satlearn-checkpoint v1` header line.
//! * `<stem>.bin`: every tensor's values as little-endian `f64`, in manifest
//!   order, with no padding.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Shared parameters.
    Body,
    /// Source-task head (the contrastive head).
    HeadS,
    /// Target-task head (the satisfaction head).
    HeadT,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Body => "body",
            Role::HeadS => "head_s",
            Role::HeadT => "head_t",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Role::Body),
            "head_s" => Ok(Role::HeadS),
            "head_t" => Ok(Role::HeadT),
            other => Err(Error::Format(format!("unknown role `{other}`"))),
        }
    }
}

/// Learning-rate tier: the turn encoder gets its own base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LrTier {
    Encoder,
    Other,
}

impl fmt::Display for LrTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrTier::Encoder => "encoder",
            LrTier::Other => "other",
        })
    }
}

impl FromStr for LrTier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(LrTier::Encoder),
            "other" => Ok(LrTier::Other),
            other => Err(Error::Format(format!("unknown lr tier `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub role: Role,
    pub tier: LrTier,
    pub tensors: Vec<Tensor>,
}

impl Layer {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Address of one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: usize,
    pub tensor: usize,
}

impl ParamKey {
    pub fn new(layer: usize, tensor: usize) -> Self {
        Self { layer, tensor }
    }
}

/// Ordered layers; one layer is one block for layer-wise coordinate descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.tensors.is_empty() {
                return Err(Error::Contract(format!(
                    "layer `{}` has no tensors",
                    l.name
                )));
            }
            if l.name.is_empty() || l.name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid layer name `{}`", l.name)));
            }
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Contract(format!("duplicate layer `{}`", l.name)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor {
        &self.layers[key.layer].tensors[key.tensor]
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor {
        &mut self.layers[key.layer].tensors[key.tensor]
    }

    /// Resolves names of the form `layer/index`.
    pub fn key_by_name(&self, name: &str) -> Option<ParamKey> {
        let (layer, idx) = name.rsplit_once('/')?;
        let l = self.layer_index(layer)?;
        let t: usize = idx.parse().ok()?;
        (t < self.layers[l].tensors.len()).then_some(ParamKey::new(l, t))
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.tensors.len()).map(move |t| ParamKey::new(l, t)))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn layers_with_role(&self, role: Role) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.role == role)
    }

    /// True when both sets have the same layer names, roles, tiers and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.role == b.role
                    && a.tier == b.tier
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors
                        .iter()
                        .zip(&b.tensors)
                        .all(|(x, y)| x.shape() == y.shape())
            })
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("manifest"), stem.with_extension("bin"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, bin) = Self::paths(stem);
        let mut text = String::from("satlearn-checkpoint v1\n");
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for layer in &self.layers {
            for (i, t) in layer.tensors.iter().enumerate() {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                text.push_str(&format!(
                    "layer {} {} {} {} {}\n",
                    layer.name,
                    layer.role,
                    layer.tier,
                    i,
                    dims.join("x")
                ));
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(manifest, text)?;
        fs::write(bin, bytes)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParamSet::save`]. Manifest lines
    /// starting with `#` are comments.
    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, bin) = Self::paths(stem);
        let text = fs::read_to_string(manifest)?;
        let bytes = fs::read(bin)?;
        let mut lines = text.lines();
        if lines.next() != Some("satlearn-checkpoint v1") {
            return Err(Error::Format("missing checkpoint header".into()));
        }
        let mut layers: Vec<Layer> = Vec::new();
        let mut offset = 0usize;
        for line in lines.filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 || f[0] != "layer" {
                return Err(Error::Format(format!("bad manifest line `{line}`")));
            }
            let role: Role = f[2].parse()?;
            let tier: LrTier = f[3].parse()?;
            let idx: usize = f[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad tensor index in `{line}`")))?;
            let shape = f[5]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?;
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(Error::Format("checkpoint data truncated".into()));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            offset = end;
            let tensor = Tensor::new(shape, data)?;
            match layers.last_mut() {
                Some(l) if l.name == f[1] => {
                    if l.role != role || l.tier != tier || l.tensors.len() != idx {
                        return Err(Error::Format(format!("inconsistent entry `{line}`")));
                    }
                    l.tensors.push(tensor);
                }
                _ => {
                    if idx != 0 {
                        return Err(Error::Format(format!(
                            "layer must start at index 0: `{line}`"
                        )));
                    }
                    layers.push(Layer {
                        name: f[1].to_string(),
                        role,
                        tier,
                        tensors: vec![tensor],
                    });
                }
            }
        }
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint data".into()));
        }
        ParamSet::new(layers)
    }

    /// Loads a checkpoint and checks it matches `template` layer for layer.
    pub fn load_matching(stem: &Path, template: &ParamSet) -> Result<Self> {
        let loaded = Self::load(stem)?;
        if !loaded.same_structure(template) {
            return Err(Error::Format(
                "checkpoint layers, roles or shapes do not match the model".into(),
            ));
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        ParamSet::new(vec![
            Layer {
                name: "a".into(),
                role: Role::Body,
                tier: LrTier::Encoder,
                tensors: vec![
                    Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
                    Tensor::vector(vec![0.1]),
                ],
            },
            Layer {
                name: "h".into(),
                role: Role::HeadT,
                tier: LrTier::Other,
                tensors: vec![Tensor::vector(vec![f64::MIN_POSITIVE, 7.0])],
            },
        ])
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let p = sample();
        p.save(&stem).unwrap();
        let q = ParamSet::load_matching(&stem, &p).unwrap();
        assert_eq!(p, q);

        let manifest = stem.with_extension("manifest");
        let mut text = std::fs::read_to_string(&manifest).unwrap();
        text.push_str("# config 0123abcd\n");
        std::fs::write(&manifest, text).unwrap();
        assert_eq!(ParamSet::load(&stem).unwrap(), p);
    }

    #[test]
    fn load_rejects_role_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let p = sample();
        p.save(&stem).unwrap();
        let mut other = p.clone();
        other.layers_mut()[1].role = Role::HeadS;
        assert!(ParamSet::load_matching(&stem, &other).is_err());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let p = sample();
        p.save(&stem).unwrap();
        let mut other = p.clone();
        other.layers_mut()[0].tensors[1] = Tensor::vector(vec![0.0, 0.0]);
        assert!(ParamSet::load_matching(&stem, &other).is_err());
    }

    #[test]
    fn key_by_name() {
        let p = sample();
        assert_eq!(p.key_by_name("a/1"), Some(ParamKey::new(0, 1)));
        assert_eq!(p.key_by_name("a/2"), None);
        assert_eq!(p.key_by_name("zzz/0"), None);
    }

    #[test]
    fn rejects_duplicate_layers() {
        let mut layers = sample().layers().to_vec();
        layers.push(layers[0].clone());
        assert!(ParamSet::new(layers).is_err());
    }
}
