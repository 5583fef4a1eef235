//! Model configuration, named parameter storage and the full forward pass.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsd::{self, AttentionVars, FeatureSequence, GspVars};
use crate::heads::{self, ClsVars};
use crate::numeric::io::{read_tensor, write_tensor};
use crate::numeric::{Tape, Tensor, Var};

pub const MODALITIES: [&str; 3] = ["audio", "visual", "face"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of each raw feature track.
    pub input_dim: usize,
    /// Shared embedding width `d`.
    pub dim: usize,
    pub heads: usize,
    pub class_count: usize,
    pub gsp_kernel: usize,
    pub cls_kernel: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            dim: 32,
            heads: 4,
            class_count: 2,
            gsp_kernel: 3,
            cls_kernel: 1,
            architecture: Architecture::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dim == 0 || self.class_count == 0 {
            return Err(Error::Config("input_dim, dim and class_count must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide dim {}",
                self.heads, self.dim
            )));
        }
        for (name, k) in [("gsp_kernel", self.gsp_kernel), ("cls_kernel", self.cls_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut out = Vec::new();
        for m in MODALITIES {
            out.push((format!("proj.{m}.w"), vec![1, self.input_dim, d]));
            out.push((format!("proj.{m}.b"), vec![1, d]));
        }
        for stage in ["fci1", "fci2"] {
            for dir in ["visual", "audio"] {
                for p in ["query", "key", "value", "output"] {
                    out.push((format!("{stage}.{dir}.{p}"), vec![d, d]));
                }
            }
        }
        let k = self.gsp_kernel;
        out.push(("gsp.conv1.w".into(), vec![k, 3 * d, d]));
        out.push(("gsp.conv1.b".into(), vec![1, d]));
        out.push(("gsp.conv2.w".into(), vec![k, d, d]));
        out.push(("gsp.conv2.b".into(), vec![1, d]));
        out.push(("gsp.reg.w".into(), vec![d, 1]));
        out.push(("gsp.reg.b".into(), vec![1, 1]));
        for c in 0..=self.class_count {
            out.push((format!("cls.{c}.w"), vec![self.cls_kernel, 2 * d, 1]));
            out.push((format!("cls.{c}.b"), vec![1, 1]));
        }
        out
    }
}

/// Optional architecture components, toggled for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub fci_stage1: bool,
    pub fci_stage2: bool,
    pub gsp: bool,
    /// Replace the face track by zeros before projection.
    pub zero_face: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            fci_stage1: true,
            fci_stage2: true,
            gsp: true,
            zero_face: false,
        }
    }
}

/// All trainable tensors, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights uniform in `[-1/sqrt(d), 1/sqrt(d)]`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Records every tensor on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.variable(v.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Binds already-registered tape variables to parameter names, in the
    /// order of [`ModelConfig::parameter_shapes`].
    pub fn bind(config: &ModelConfig, vars: &[Var]) -> Result<ParamVars> {
        let names = config.parameter_shapes();
        if names.len() != vars.len() {
            return Err(Error::Config(format!(
                "expected {} parameter variables, got {}",
                names.len(),
                vars.len()
            )));
        }
        let vars = names.into_iter().map(|(n, _)| n).zip(vars.iter().copied()).collect();
        Ok(ParamVars { vars })
    }

    /// Tensors in the order of [`ModelConfig::parameter_shapes`].
    pub fn ordered_tensors(&self) -> Vec<Tensor> {
        self.config
            .parameter_shapes()
            .iter()
            .map(|(n, _)| self.tensors[n].clone())
            .collect()
    }

    /// Single-file layout: magic `FSEMODL1`, `u64` manifest length, JSON
    /// manifest `{model, tensors: [{name, shape}]}`, then one tensor record
    /// per manifest entry.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::json!({
            "model": self.config,
            "tensors": self.tensors.iter().map(|(k, v)| serde_json::json!({
                "name": k,
                "shape": v.shape(),
            })).collect::<Vec<_>>(),
        });
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != PARAMS_MAGIC {
            return Err(fmt("missing parameter-file magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| fmt("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        manifest.model.validate()?;
        let mut cursor = &bytes[16 + len..];
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let t = read_tensor(&mut cursor, path)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(fmt(format!("tensor {} shape mismatch", entry.name)));
            }
            tensors.insert(entry.name.clone(), t);
        }
        let expected: Vec<String> = manifest.model.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        if expected.len() != tensors.len() || expected.iter().any(|n| !tensors.contains_key(n)) {
            return Err(fmt("parameter names do not match the model config".into()));
        }
        Ok(Self {
            config: manifest.model,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"FSEMODL1";

#[derive(Deserialize)]
struct Manifest {
    model: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn attention(&self, stage: &str, dir: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            query: self.var(&format!("{stage}.{dir}.query"))?,
            key: self.var(&format!("{stage}.{dir}.key"))?,
            value: self.var(&format!("{stage}.{dir}.value"))?,
            output: self.var(&format!("{stage}.{dir}.output"))?,
        })
    }

    fn gsp(&self) -> Result<GspVars> {
        Ok(GspVars {
            conv1_w: self.var("gsp.conv1.w")?,
            conv1_b: self.var("gsp.conv1.b")?,
            conv2_w: self.var("gsp.conv2.w")?,
            conv2_b: self.var("gsp.conv2.b")?,
            reg_w: self.var("gsp.reg.w")?,
            reg_b: self.var("gsp.reg.b")?,
        })
    }

    fn cls(&self, class_count: usize) -> Result<ClsVars> {
        let mut heads = Vec::with_capacity(class_count + 1);
        for c in 0..=class_count {
            heads.push((self.var(&format!("cls.{c}.w"))?, self.var(&format!("cls.{c}.b"))?));
        }
        Ok(ClsVars { heads })
    }
}

/// Tape handles produced by one forward pass over a video.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `T×2d` fused embedding.
    pub f_mix: Var,
    /// `T×(C+1)` frame-level class scores.
    pub cas: Var,
    /// `T×(C+1)` scores reweighted by the sentiment weight; equals `cas` when
    /// the global branch is disabled.
    pub global_cas: Var,
    /// `T×1` sentiment weight, absent when the global branch is disabled.
    pub weight: Option<Var>,
}

fn project(tape: &mut Tape, vars: &ParamVars, track: &Tensor, modality: &str) -> Result<Var> {
    let x = tape.constant(track.clone());
    let w = vars.var(&format!("proj.{modality}.w"))?;
    let b = vars.var(&format!("proj.{modality}.b"))?;
    tape.conv1d(x, w, b)
}

/// Full model: input projections, two-stage face-centric attention, class
/// heads and, when enabled, the sentiment-weight branch.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &ModelConfig,
    feat: &FeatureSequence,
) -> Result<ForwardOutput> {
    let arch = &config.architecture;
    if feat.dim() != config.input_dim {
        return Err(Error::Config(format!(
            "feature width {} does not match model input_dim {}",
            feat.dim(),
            config.input_dim
        )));
    }
    let fa = project(tape, vars, &feat.audio, "audio")?;
    let fv = project(tape, vars, &feat.visual, "visual")?;
    let ff = if arch.zero_face {
        let zero = Tensor::zeros(feat.face.shape());
        project(tape, vars, &zero, "face")?
    } else {
        project(tape, vars, &feat.face, "face")?
    };

    let (fvf, faf) = if arch.fci_stage1 {
        fsd::fci_stage1(
            tape,
            fa,
            fv,
            ff,
            &vars.attention("fci1", "visual")?,
            &vars.attention("fci1", "audio")?,
            config.heads,
        )?
    } else {
        (fv, fa)
    };
    let f_mix = if arch.fci_stage2 {
        fsd::fci_stage2(
            tape,
            fvf,
            faf,
            &vars.attention("fci2", "visual")?,
            &vars.attention("fci2", "audio")?,
            config.heads,
        )?
    } else {
        tape.concat_cols(&[fvf, faf])?
    };

    let cas = heads::cas(tape, f_mix, &vars.cls(config.class_count)?)?;
    let (global_cas, weight) = if arch.gsp {
        let w = fsd::gsp_weight(tape, fa, fv, ff, &vars.gsp()?)?;
        (heads::global_cas(tape, cas, w)?, Some(w))
    } else {
        (cas, None)
    };
    Ok(ForwardOutput {
        f_mix,
        cas,
        global_cas,
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_count_must_divide_dim() {
        let cfg = ModelConfig {
            dim: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_respects_bounds_and_zero_biases() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        for (name, t) in p.iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
        assert_eq!(p, ModelParams::init(&cfg, 1).unwrap());
        assert_ne!(p, ModelParams::init(&cfg, 2).unwrap());
    }

    #[test]
    fn exactly_c_plus_one_class_heads() {
        let cfg = ModelConfig {
            class_count: 3,
            ..Default::default()
        };
        let p = ModelParams::zeros(&cfg).unwrap();
        assert_eq!(
            p.names().filter(|n| n.starts_with("cls.") && n.ends_with(".w")).count(),
            4
        );
    }

    #[test]
    fn byte_round_trip_keeps_f32_values() {
        let cfg = ModelConfig {
            input_dim: 4,
            dim: 4,
            heads: 2,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 9).unwrap();
        let bytes = p.to_bytes().unwrap();
        let q = ModelParams::from_bytes(&bytes, Path::new("mem")).unwrap();
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!((*a as f32) as f64, *b);
            }
        }
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
