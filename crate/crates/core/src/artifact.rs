//! Versioned model artifacts: one JSON header line followed by the raw
//! little-endian `f64` contents of each tensor, in header order.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::Task;
use crate::distmodel::{DistConfig, DistanceModel};
use crate::ictransformer::{InContextTransformer, TrainLog, TransformerConfig};
use crate::linmodels::{LogisticModel, RidgeModel};
use crate::numkernel::Tensor;
use crate::protonet::{ProjectionNet, ProtoConfig, ProtoLog, ProtoNet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("artifact I/O: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported artifact format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("config digest mismatch: header says {expected}, config hashes to {found}")]
    Digest { expected: String, found: String },
    #[error("artifact holds a '{found}' model, expected '{expected}'")]
    Family { expected: Family, found: Family },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    CsRegression,
    CsClassification,
    Dist,
    Proto,
    Tr,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        write!(f, "{}", s.as_str().expect("string tag"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub family: Family,
    pub task: Task,
    pub config: Value,
    /// Hex SHA-256 of the compact JSON encoding of `config`.
    pub config_digest: String,
    pub seed: u64,
    pub embedding_dim: usize,
    pub tensors: Vec<TensorSpec>,
    /// Training log and other audit data; not covered by the digest.
    #[serde(default)]
    pub extra: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub header: ArtifactHeader,
    pub tensors: Vec<Tensor>,
}

pub fn config_digest(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialise");
    hex::encode(Sha256::digest(bytes))
}

impl Artifact {
    pub fn new(
        family: Family,
        task: Task,
        config: Value,
        seed: u64,
        embedding_dim: usize,
        named: Vec<(String, Tensor)>,
        extra: Value,
    ) -> Self {
        let tensors: Vec<TensorSpec> =
            named.iter().map(|(n, t)| TensorSpec { name: n.clone(), shape: t.shape() }).collect();
        let header = ArtifactHeader {
            format_version: FORMAT_VERSION,
            family,
            task,
            config_digest: config_digest(&config),
            config,
            seed,
            embedding_dim,
            tensors,
            extra,
        };
        Artifact { header, tensors: named.into_iter().map(|(_, t)| t).collect() }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ArtifactError> {
        serde_json::to_writer(&mut w, &self.header).map_err(|e| ArtifactError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, ArtifactError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let raw: Value = serde_json::from_str(&line).map_err(|e| ArtifactError::Format(format!("header: {e}")))?;
        let version = raw.get("format_version").and_then(Value::as_u64).ok_or_else(|| {
            ArtifactError::Format("header has no format_version".into())
        })?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(ArtifactError::Version { found: version as u32, expected: FORMAT_VERSION });
        }
        let header: ArtifactHeader =
            serde_json::from_value(raw).map_err(|e| ArtifactError::Format(format!("header: {e}")))?;
        let found = config_digest(&header.config);
        if found != header.config_digest {
            return Err(ArtifactError::Digest { expected: header.config_digest.clone(), found });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for spec in &header.tensors {
            let [rows, cols] = spec.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|_| ArtifactError::Format(format!("tensor '{}' truncated", spec.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Tensor::new(rows, cols, data).expect("length matches shape"));
        }
        if r.read(&mut buf)? != 0 {
            return Err(ArtifactError::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Artifact { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// SHA-256 of the serialised artifact.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        hex::encode(Sha256::digest(bytes))
    }

    fn expect_family(&self, family: Family) -> Result<(), ArtifactError> {
        if self.header.family != family {
            return Err(ArtifactError::Family { expected: family, found: self.header.family });
        }
        Ok(())
    }

    fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T, ArtifactError> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| ArtifactError::Format(format!("config: {e}")))
    }

    fn tensor(&self, name: &str) -> Result<&Tensor, ArtifactError> {
        self.header
            .tensors
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| ArtifactError::Format(format!("missing tensor '{name}'")))
    }
}

fn vector(values: &[f64]) -> Tensor {
    Tensor::row(values.to_vec())
}

fn ridge_tensors(prefix: &str, m: &RidgeModel) -> Vec<(String, Tensor)> {
    vec![(format!("{prefix}coef"), vector(&m.coef)), (format!("{prefix}intercept"), Tensor::scalar(m.intercept))]
}

fn ridge_from(a: &Artifact, prefix: &str, alpha: f64) -> Result<RidgeModel, ArtifactError> {
    Ok(RidgeModel {
        coef: a.tensor(&format!("{prefix}coef"))?.data().to_vec(),
        intercept: a.tensor(&format!("{prefix}intercept"))?.item(),
        alpha,
    })
}

#[derive(Serialize, Deserialize)]
struct RidgeConfig {
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct LogisticConfig {
    c: f64,
    threshold: f64,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct DistArtifactConfig {
    dist: DistConfig,
    fallback_alpha: f64,
}

/// Conversion between a fitted model and its artifact.
pub trait Persist: Sized {
    const FAMILY: Family;
    fn to_artifact(&self, seed: u64) -> Artifact;
    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError>;
}

impl Persist for RidgeModel {
    const FAMILY: Family = Family::CsRegression;

    fn to_artifact(&self, seed: u64) -> Artifact {
        let config = serde_json::to_value(RidgeConfig { alpha: self.alpha }).expect("plain struct");
        Artifact::new(Self::FAMILY, Task::Regression, config, seed, self.dim(), ridge_tensors("", self), Value::Null)
    }

    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError> {
        a.expect_family(Self::FAMILY)?;
        let c: RidgeConfig = a.config()?;
        ridge_from(a, "", c.alpha)
    }
}

impl Persist for LogisticModel {
    const FAMILY: Family = Family::CsClassification;

    fn to_artifact(&self, seed: u64) -> Artifact {
        let config = serde_json::to_value(LogisticConfig { c: self.c, threshold: self.threshold, steps: self.steps })
            .expect("plain struct");
        let named = vec![("coef".to_string(), vector(&self.coef)), ("intercept".to_string(), Tensor::scalar(self.intercept))];
        Artifact::new(Self::FAMILY, Task::Classification, config, seed, self.dim(), named, Value::Null)
    }

    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError> {
        a.expect_family(Self::FAMILY)?;
        let c: LogisticConfig = a.config()?;
        Ok(LogisticModel {
            coef: a.tensor("coef")?.data().to_vec(),
            intercept: a.tensor("intercept")?.item(),
            c: c.c,
            threshold: c.threshold,
            steps: c.steps,
        })
    }
}

impl Persist for DistanceModel {
    const FAMILY: Family = Family::Dist;

    fn to_artifact(&self, seed: u64) -> Artifact {
        let config = serde_json::to_value(DistArtifactConfig { dist: self.config, fallback_alpha: self.fallback.alpha })
            .expect("plain struct");
        let mut named = ridge_tensors("f_d.", &self.f_d);
        named.extend(ridge_tensors("fallback.", &self.fallback));
        Artifact::new(Self::FAMILY, Task::Regression, config, seed, self.f_d.dim(), named, Value::Null)
    }

    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError> {
        a.expect_family(Self::FAMILY)?;
        let c: DistArtifactConfig = a.config()?;
        Ok(DistanceModel {
            f_d: ridge_from(a, "f_d.", c.dist.alpha)?,
            fallback: ridge_from(a, "fallback.", c.fallback_alpha)?,
            config: c.dist,
        })
    }
}

impl Persist for ProtoNet {
    const FAMILY: Family = Family::Proto;

    fn to_artifact(&self, seed: u64) -> Artifact {
        let config = serde_json::to_value(&self.config).expect("plain struct");
        let named = ProjectionNet::param_names().into_iter().zip(self.net.params.iter().cloned()).collect();
        let extra = serde_json::to_value(&self.log).expect("plain struct");
        Artifact::new(Self::FAMILY, Task::Classification, config, seed, self.net.input_dim(), named, extra)
    }

    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError> {
        a.expect_family(Self::FAMILY)?;
        let config: ProtoConfig = a.config()?;
        let params = ProjectionNet::param_names().iter().map(|n| a.tensor(n).cloned()).collect::<Result<Vec<_>, _>>()?;
        let net = ProjectionNet::from_params(params).map_err(|e| ArtifactError::Format(e.to_string()))?;
        let log: ProtoLog = serde_json::from_value(a.header.extra.clone())
            .map_err(|e| ArtifactError::Format(format!("training log: {e}")))?;
        Ok(ProtoNet { net, config, log })
    }
}

impl Persist for InContextTransformer {
    const FAMILY: Family = Family::Tr;

    fn to_artifact(&self, seed: u64) -> Artifact {
        let config = serde_json::to_value(&self.config).expect("plain struct");
        let named = Self::param_names(self.config.n_layers).into_iter().zip(self.params.iter().cloned()).collect();
        let extra = serde_json::to_value(&self.log).expect("plain struct");
        Artifact::new(Self::FAMILY, self.task, config, seed, self.dim, named, extra)
    }

    fn from_artifact(a: &Artifact) -> Result<Self, ArtifactError> {
        a.expect_family(Self::FAMILY)?;
        let config: TransformerConfig = a.config()?;
        let params = Self::param_names(config.n_layers)
            .iter()
            .map(|n| a.tensor(n).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let log: TrainLog = serde_json::from_value(a.header.extra.clone())
            .map_err(|e| ArtifactError::Format(format!("training log: {e}")))?;
        InContextTransformer::from_params(a.header.embedding_dim, a.header.task, config, params, log)
            .map_err(|e| ArtifactError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip<M: Persist>(m: &M) -> M {
        let mut bytes = Vec::new();
        m.to_artifact(5).write_to(&mut bytes).unwrap();
        M::from_artifact(&Artifact::read_from(bytes.as_slice()).unwrap()).unwrap()
    }

    fn awkward(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i == 0 { f64::MIN_POSITIVE / 3.0 } else { rng.gen::<f64>() * 1e-7 - 3.3 }).collect()
    }

    #[test]
    fn linear_models_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = RidgeModel { coef: awkward(&mut rng, 5), intercept: 0.1 + 0.2, alpha: 0.1 };
        assert_eq!(roundtrip(&r), r);
        let l = LogisticModel { coef: awkward(&mut rng, 3), intercept: -1.0 / 3.0, c: 0.001, threshold: 0.4137, steps: 17 };
        assert_eq!(roundtrip(&l), l);
        let d = DistanceModel { f_d: RidgeModel { alpha: 1000.0, ..r.clone() }, fallback: RidgeModel { alpha: 10.0, ..r.clone() }, config: DistConfig::default() };
        assert_eq!(roundtrip(&d), d);
    }

    #[test]
    fn networks_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proto = ProtoNet {
            net: ProjectionNet::new(4, 32, 64, &mut rng),
            config: ProtoConfig::default(),
            log: ProtoLog { steps: 3, best_step: 2, val_auc: vec![0.5, 0.6], train_loss: vec![0.7] },
        };
        assert_eq!(roundtrip(&proto), proto);
        let cfg = TransformerConfig { n_layers: 2, n_heads: 2, model_dim: 8, ..TransformerConfig::desk() };
        let tr = InContextTransformer::new(4, Task::Classification, cfg).unwrap();
        assert_eq!(roundtrip(&tr), tr);
    }

    #[test]
    fn rejects_other_versions_and_tampering() {
        let r = RidgeModel { coef: vec![1.0], intercept: 0.0, alpha: 1.0 };
        let mut a = r.to_artifact(0);
        a.header.format_version = 0;
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert!(matches!(Artifact::read_from(bytes.as_slice()), Err(ArtifactError::Version { found: 0, .. })));

        let mut a = r.to_artifact(0);
        a.header.config = serde_json::json!({"alpha": 2.0});
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert!(matches!(Artifact::read_from(bytes.as_slice()), Err(ArtifactError::Digest { .. })));

        let mut bytes = Vec::new();
        r.to_artifact(0).write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(Artifact::read_from(bytes.as_slice()), Err(ArtifactError::Format(_))));
        let a = Artifact::read_from({
            let mut b = Vec::new();
            r.to_artifact(0).write_to(&mut b).unwrap();
            b
        }
        .as_slice())
        .unwrap();
        assert!(matches!(LogisticModel::from_artifact(&a), Err(ArtifactError::Family { .. })));
    }
}
