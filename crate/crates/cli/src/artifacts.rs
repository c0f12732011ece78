//! Output directory bookkeeping: atomic artifact writes, the manifest, and the
//! JSON documents for tuned bandwidths and fitted models.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use condcov::condcov::{BandwidthMatrix, PsdPolicy};
use condcov::dataset::{fmt_f64, AlignedDataset};
use condcov::diagnostics::{fit_regime, Regime, RegimeModels};
use condcov::kernel_mean::{ExtrapolationPolicy, MeanModel, MeanSpec};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const ALIGNED: &str = "aligned.csv";
pub const TUNING: &str = "tuning.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// JSON number that keeps `inf` (the marginal bandwidth) and `NaN` as strings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&fmt_f64(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Real(v)),
            Repr::Text(t) => t.parse().map(Real).map_err(|_| serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }
}

fn reals(v: &[f64]) -> Vec<Real> {
    v.iter().copied().map(Real).collect()
}

fn floats(v: &[Real]) -> Vec<f64> {
    v.iter().map(|r| r.0).collect()
}

fn matrix_doc(h: &BandwidthMatrix) -> Vec<Vec<Real>> {
    let m = h.as_matrix();
    (0..m.nrows()).map(|j| (0..m.ncols()).map(|k| Real(m[(j, k)])).collect()).collect()
}

fn matrix_from_doc(rows: &[Vec<Real>]) -> Result<BandwidthMatrix> {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| floats(r)).collect();
    Ok(BandwidthMatrix::try_from(rows)?)
}

/// Mean model kind and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanParams {
    Kernel {
        bandwidths: Vec<Real>,
    },
    Bilinear {
        breakpoint: f64,
        /// Per channel: value at the breakpoint, slope below, slope above.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coefficients: Option<Vec<Vec<f64>>>,
    },
    Constant {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<f64>>,
    },
}

impl MeanParams {
    pub fn from_spec(spec: &MeanSpec) -> Self {
        match spec {
            MeanSpec::Kernel { bandwidths } => Self::Kernel { bandwidths: reals(bandwidths) },
            MeanSpec::Bilinear { breakpoint } => Self::Bilinear { breakpoint: *breakpoint, coefficients: None },
            MeanSpec::Constant => Self::Constant { values: None },
            MeanSpec::Fixed { values } => Self::Constant { values: Some(values.clone()) },
        }
    }

    fn from_model(m: &MeanModel) -> Self {
        match (Self::from_spec(&m.spec()), m.coefficients()) {
            (Self::Bilinear { breakpoint, .. }, c) => Self::Bilinear { breakpoint, coefficients: c },
            (Self::Constant { .. }, Some(c)) => Self::Constant { values: Some(c.into_iter().map(|v| v[0]).collect()) },
            (other, _) => other,
        }
    }

    /// Spec that refits this model from its training data.
    pub fn spec(&self) -> MeanSpec {
        match self {
            Self::Kernel { bandwidths } => MeanSpec::Kernel { bandwidths: floats(bandwidths) },
            Self::Bilinear { breakpoint, .. } => MeanSpec::Bilinear { breakpoint: *breakpoint },
            Self::Constant { .. } => MeanSpec::Constant,
        }
    }
}

/// Output of the tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningDoc {
    pub mean: MeanParams,
    pub cov_bandwidths: Vec<Vec<Real>>,
}

impl TuningDoc {
    pub fn new(mean: &MeanSpec, h: &BandwidthMatrix) -> Self {
        Self { mean: MeanParams::from_spec(mean), cov_bandwidths: matrix_doc(h) }
    }

    pub fn bandwidths(&self) -> Result<BandwidthMatrix> {
        matrix_from_doc(&self.cov_bandwidths)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDoc {
    #[serde(flatten)]
    pub params: MeanParams,
    pub validity: [Real; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovDoc {
    /// `kernel`, or `marginal` when every bandwidth is infinite.
    pub kind: String,
    pub bandwidths: Vec<Vec<Real>>,
    pub psd_policy: PsdPolicy,
    pub validity: [Real; 2],
}

/// Fitted regime. Kernel models are stored as a reference to their training
/// data plus bandwidths and are refitted on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub regime: Regime,
    /// Relative to the output directory.
    pub training_data: String,
    pub training_sha256: String,
    pub extrapolation: ExtrapolationPolicy,
    pub mean: MeanDoc,
    pub covariance: CovDoc,
}

pub fn model_file(regime: Regime) -> String {
    format!("model_{}.json", regime.name())
}

impl ModelDoc {
    pub fn new(models: &RegimeModels, training_data: &str, training_sha256: String) -> Self {
        let (mlo, mhi) = models.mean.validity();
        let (clo, chi) = models.cov.validity();
        let h = models.cov.bandwidths();
        let marginal = h.as_matrix().iter().all(|v| v.is_infinite());
        Self {
            regime: models.regime,
            training_data: training_data.into(),
            training_sha256,
            extrapolation: models.cov.extrapolation_policy(),
            mean: MeanDoc { params: MeanParams::from_model(&models.mean), validity: [Real(mlo), Real(mhi)] },
            covariance: CovDoc {
                kind: if marginal { "marginal" } else { "kernel" }.into(),
                bandwidths: matrix_doc(h),
                psd_policy: models.cov.psd_policy(),
                validity: [Real(clo), Real(chi)],
            },
        }
    }

    /// Refits the regime from the referenced training data.
    pub fn load(dir: &Path, regime: Regime) -> Result<RegimeModels> {
        let path = dir.join(model_file(regime));
        let text = fs::read(&path).with_context(|| format!("cannot read model {}", path.display()))?;
        let doc: ModelDoc = serde_json::from_slice(&text).with_context(|| format!("malformed model {}", path.display()))?;
        let data_path = dir.join(&doc.training_data);
        let bytes = fs::read(&data_path).with_context(|| format!("cannot read training data {}", data_path.display()))?;
        if sha256_hex(&bytes) != doc.training_sha256 {
            bail!("training data {} changed since {} was written", data_path.display(), path.display());
        }
        let data = AlignedDataset::read_csv(bytes.as_slice())?;
        let h = matrix_from_doc(&doc.covariance.bandwidths)?;
        let models = fit_regime(&data, doc.regime, &doc.mean.params.spec(), &h, doc.covariance.psd_policy)?;
        Ok(models.with_policy(doc.extrapolation))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub created_unix: u64,
    pub complete: bool,
    pub stages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Writes artifacts into one directory and keeps the manifest in step.
///
/// Entries from an earlier invocation with the same configuration hash are
/// kept, so standalone subcommands build up one manifest.
pub struct Artifacts {
    dir: PathBuf,
    manifest: Manifest,
    written: Vec<String>,
}

impl Artifacts {
    pub fn open(dir: &Path, config_sha256: String, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let previous = fs::read(dir.join(MANIFEST))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .filter(|m| m.config_sha256 == config_sha256);
        let (stages, artifacts) = previous.map(|m| (m.stages, m.artifacts)).unwrap_or_default();
        let manifest = Manifest {
            tool: "condcov".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256,
            seed,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            complete: false,
            stages,
            error: None,
            artifacts,
        };
        Ok(Self { dir: dir.to_path_buf(), manifest, written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` through a temporary file and records its hash.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.partial"));
        let result = (|| -> Result<()> {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            fill(&mut w)?;
            w.flush()?;
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.context(format!("writing {}", target.display())));
        }
        fs::rename(&tmp, &target).with_context(|| format!("cannot move {} into place", target.display()))?;
        let bytes = fs::read(&target)?;
        let entry = ArtifactEntry { path: name.into(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 };
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(entry);
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.written.push(name.into());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn stage_done(&mut self, stage: &str) {
        if !self.manifest.stages.iter().any(|s| s == stage) {
            self.manifest.stages.push(stage.into());
        }
    }

    /// Records success, or removes this invocation's artifacts and marks the
    /// manifest incomplete.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        match outcome {
            Ok(()) => self.manifest.complete = true,
            Err(e) => {
                for name in &self.written {
                    let _ = fs::remove_file(self.dir.join(name));
                }
                self.manifest.artifacts.retain(|a| !self.written.contains(&a.path));
                self.manifest.complete = false;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.dir.join(MANIFEST), text).context("cannot write manifest")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_keeps_infinity() {
        let v = vec![Real(1.5), Real(f64::INFINITY)];
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(text, r#"[1.5,"inf"]"#);
        let back: Vec<Real> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tuning_doc_round_trip() {
        let h = BandwidthMatrix::try_from(vec![vec![1.0, f64::INFINITY], vec![f64::INFINITY, 0.5]]).unwrap();
        let doc = TuningDoc::new(&MeanSpec::Kernel { bandwidths: vec![2.0, f64::INFINITY] }, &h);
        let back: TuningDoc = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.bandwidths().unwrap(), h);
        assert_eq!(back.mean.spec(), MeanSpec::Kernel { bandwidths: vec![2.0, f64::INFINITY] });
    }

    #[test]
    fn failed_run_removes_its_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::open(dir.path(), "abc".into(), 1).unwrap();
        a.write("one.csv", |w| Ok(writeln!(w, "x")?)).unwrap();
        assert!(a.write("two.csv", |_| bail!("boom")).is_err());
        assert!(!dir.path().join(".two.csv.partial").exists());
        a.finish(&Err(anyhow::anyhow!("boom"))).unwrap();
        assert!(!dir.path().join("one.csv").exists());
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert!(!m.complete && m.artifacts.is_empty() && m.error.as_deref() == Some("boom"));
    }

    #[test]
    fn manifest_accumulates_for_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::open(dir.path(), "abc".into(), 1).unwrap();
        a.write("one.csv", |w| Ok(writeln!(w, "x")?)).unwrap();
        a.stage_done("first");
        a.finish(&Ok(())).unwrap();
        let mut b = Artifacts::open(dir.path(), "abc".into(), 1).unwrap();
        b.write("two.csv", |w| Ok(writeln!(w, "y")?)).unwrap();
        b.finish(&Ok(())).unwrap();
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.artifacts.iter().map(|a| a.path.as_str()).collect::<Vec<_>>(), ["one.csv", "two.csv"]);
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"x\n"));
        assert_eq!(m.stages, ["first"]);
        // a different configuration starts over
        Artifacts::open(dir.path(), "other".into(), 1).unwrap().finish(&Ok(())).unwrap();
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert!(m.artifacts.is_empty());
    }
}
