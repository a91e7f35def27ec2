//! Minimum-distance-to-mean baseline on recentered covariances, with online
//! generic recentering (GR) and supervised personally adjusted recentering
//! (PAR). Both updates approximate the benchmark's behaviour with explicit
//! weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{fit_reference_covariances, AdaptError, AlignMethod, AlignmentReference};
use crate::linalg::{
    airm_distance_whitened, covariance, geodesic_step, karcher_mean, sqrt_and_inv_sqrt, LinalgError, Matrix,
    SpdMatrix,
};
use crate::model::checkpoint::{read_container, write_container, Container, StoredTensor, TensorData};
use crate::model::ModelError;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_PAR_BLEND: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MdmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Checkpoint(#[from] ModelError),
}

/// Labeled covariances of one domain (subject or session).
#[derive(Debug, Clone, PartialEq)]
pub struct MdmDomain {
    pub covariances: Vec<SpdMatrix>,
    pub labels: Vec<usize>,
}

impl MdmDomain {
    pub fn from_windows(windows: &[Matrix], labels: &[usize]) -> Result<Self, MdmError> {
        if windows.len() != labels.len() {
            return Err(MdmError::Shape(format!(
                "{} windows, {} labels",
                windows.len(),
                labels.len()
            )));
        }
        Ok(Self {
            covariances: windows.iter().map(covariance).collect::<Result<_, _>>()?,
            labels: labels.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdmModel {
    /// Class means in the recentered space.
    pub means: Vec<SpdMatrix>,
    /// Mean of the source domain references, the GR starting point.
    pub source_reference: SpdMatrix,
    pub temperature: f64,
}

fn whiten(cov: &SpdMatrix, reference: &AlignmentReference) -> Result<SpdMatrix, MdmError> {
    let inv_sqrt = reference
        .inv_sqrt()
        .ok_or_else(|| MdmError::Config("recentering reference has seen no data".into()))?;
    if inv_sqrt.rows() != cov.dim() {
        return Err(MdmError::Shape(format!(
            "reference is {}×{}, covariance is {}×{}",
            inv_sqrt.rows(),
            inv_sqrt.rows(),
            cov.dim(),
            cov.dim()
        )));
    }
    Ok(cov.congruence(inv_sqrt)?)
}

fn class_means(covs: &[SpdMatrix], labels: &[usize], classes: usize) -> Result<Vec<Option<SpdMatrix>>, MdmError> {
    let mut groups: Vec<Vec<SpdMatrix>> = vec![Vec::new(); classes];
    for (c, &l) in covs.iter().zip(labels) {
        groups
            .get_mut(l)
            .ok_or_else(|| MdmError::Config(format!("label {l} outside {classes} classes")))?
            .push(c.clone());
    }
    groups
        .iter()
        .map(|g| if g.is_empty() { Ok(None) } else { Ok(Some(karcher_mean(g)?)) })
        .collect()
}

/// Recenters every domain with its own riemannian reference and takes the
/// per-class geometric mean of the pooled recentered covariances.
pub fn mdm_fit(domains: &[MdmDomain], classes: usize) -> Result<MdmModel, MdmError> {
    if domains.is_empty() || classes < 2 {
        return Err(MdmError::Config("MDM needs at least one domain and two classes".into()));
    }
    let mut pooled = Vec::new();
    let mut labels = Vec::new();
    let mut refs = Vec::new();
    for d in domains {
        if d.covariances.len() != d.labels.len() {
            return Err(MdmError::Shape("covariances and labels differ in length".into()));
        }
        let r = fit_reference_covariances(&d.covariances, AlignMethod::Riemannian)?;
        for c in &d.covariances {
            pooled.push(whiten(c, &r)?);
        }
        labels.extend_from_slice(&d.labels);
        refs.push(r.mean().expect("fitted").clone());
    }
    let means = class_means(&pooled, &labels, classes)?
        .into_iter()
        .enumerate()
        .map(|(k, m)| m.ok_or_else(|| MdmError::Config(format!("no training window of class {k}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MdmModel {
        means,
        source_reference: karcher_mean(&refs)?,
        temperature: DEFAULT_TEMPERATURE,
    })
}

impl MdmModel {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.source_reference.dim()
    }

    /// Distances from the recentered covariance to every class mean.
    pub fn distances(&self, cov: &SpdMatrix, reference: &AlignmentReference) -> Result<Vec<f64>, MdmError> {
        let w = whiten(cov, reference)?;
        // δ is symmetric, so one inverse square root of the window serves
        // every class
        let (_, w_inv_sqrt) = sqrt_and_inv_sqrt(&w)?;
        self.means
            .iter()
            .map(|m| airm_distance_whitened(&w_inv_sqrt, m).map_err(MdmError::from))
            .collect()
    }

    /// `softmax(−δ/τ)` over the class distances.
    pub fn probabilities(&self, cov: &SpdMatrix, reference: &AlignmentReference) -> Result<Vec<f64>, MdmError> {
        let d = self.distances(cov, reference)?;
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = d.iter().map(|x| (-(x - lo) / self.temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }

    /// Reference seeded at the source reference, weighted as `prior_weight`
    /// pseudo-windows. Weight 0 gives an empty reference.
    pub fn gr_reference(&self, prior_weight: usize) -> Result<AlignmentReference, MdmError> {
        if prior_weight == 0 {
            return Ok(AlignmentReference::empty(AlignMethod::Riemannian));
        }
        Ok(AlignmentReference::from_mean(
            AlignMethod::Riemannian,
            self.source_reference.clone(),
            prior_weight,
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MdmError> {
        write_container(path, &self.to_container())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MdmError> {
        Self::from_container(&read_container(path)?)
    }

    pub fn to_container(&self) -> Container {
        let tensor = |name: String, m: &SpdMatrix| StoredTensor {
            name,
            shape: vec![m.dim(), m.dim()],
            data: TensorData::F64(m.as_matrix().as_slice().to_vec()),
        };
        let mut tensors: Vec<StoredTensor> = self
            .means
            .iter()
            .enumerate()
            .map(|(k, m)| tensor(format!("mdm.mean.{k}"), m))
            .collect();
        tensors.push(tensor("mdm.source_reference".into(), &self.source_reference));
        Container {
            kind: "mdm".into(),
            meta: serde_json::to_value(MdmMeta {
                classes: self.classes(),
                temperature: self.temperature,
            })
            .expect("serializable"),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, MdmError> {
        if c.kind != "mdm" {
            return Err(MdmError::Config(format!("checkpoint holds a {:?}, not an MDM model", c.kind)));
        }
        let meta: MdmMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| MdmError::Config(e.to_string()))?;
        let read = |name: &str| -> Result<SpdMatrix, MdmError> {
            let t = c
                .tensor(name)
                .ok_or_else(|| MdmError::Shape(format!("checkpoint lacks tensor {name}")))?;
            match t.shape.as_slice() {
                &[r, cc] if r == cc => Ok(SpdMatrix::strict(Matrix::from_vec(r, cc, t.data.to_f64())?)?),
                other => Err(MdmError::Shape(format!("tensor {name} has shape {other:?}"))),
            }
        };
        let means = (0..meta.classes)
            .map(|k| read(&format!("mdm.mean.{k}")))
            .collect::<Result<Vec<_>, _>>()?;
        let source_reference = read("mdm.source_reference")?;
        if means.iter().any(|m| m.dim() != source_reference.dim()) {
            return Err(MdmError::Shape("class means and reference differ in size".into()));
        }
        Ok(Self {
            means,
            source_reference,
            temperature: meta.temperature,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MdmMeta {
    classes: usize,
    temperature: f64,
}

pub fn mdm_predict(window: &Matrix, model: &MdmModel, reference: &AlignmentReference) -> Result<Vec<f64>, MdmError> {
    model.probabilities(&covariance(window)?, reference)
}

/// One online recentering step: geodesic running mean with equal weights.
pub fn gr_update(reference: &AlignmentReference, window: &Matrix) -> Result<AlignmentReference, MdmError> {
    let mut next = reference.clone();
    next.update(window)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParOutcome {
    pub model: MdmModel,
    pub reference: AlignmentReference,
    pub warnings: Vec<String>,
}

/// Refits the reference on labeled target calibration data and moves each
/// class mean towards the recentered target class mean by `blend` along the
/// geodesic. Classes absent from the calibration keep their source mean.
pub fn par_update(model: &MdmModel, calibration: &MdmDomain, blend: f64) -> Result<ParOutcome, MdmError> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(MdmError::Config(format!("PAR blend {blend} outside [0, 1]")));
    }
    if calibration.covariances.len() != calibration.labels.len() || calibration.covariances.is_empty() {
        return Err(MdmError::Shape("PAR needs matching, non-empty covariances and labels".into()));
    }
    let reference = fit_reference_covariances(&calibration.covariances, AlignMethod::Riemannian)?;
    let whitened = calibration
        .covariances
        .iter()
        .map(|c| whiten(c, &reference))
        .collect::<Result<Vec<_>, _>>()?;
    let target = class_means(&whitened, &calibration.labels, model.classes())?;
    let mut warnings = Vec::new();
    let mut means = Vec::with_capacity(model.classes());
    for (k, (source, t)) in model.means.iter().zip(target).enumerate() {
        match t {
            Some(t) => means.push(geodesic_step(source, &t, blend)?),
            None => {
                warnings.push(format!("class {k} missing from calibration data; source mean kept"));
                means.push(source.clone());
            }
        }
    }
    Ok(ParOutcome {
        model: MdmModel {
            means,
            source_reference: model.source_reference.clone(),
            temperature: model.temperature,
        },
        reference,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::airm_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> SpdMatrix {
        SpdMatrix::from_diag(&[v]).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SpdMatrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::new(a.gram().scale(scale).add(&Matrix::identity(n).scale(0.1)).unwrap()).unwrap()
    }

    fn identity_ref(n: usize) -> AlignmentReference {
        AlignmentReference::from_mean(AlignMethod::Riemannian, SpdMatrix::identity(n), 1).unwrap()
    }

    #[test]
    fn one_window_per_class() {
        let d = MdmDomain {
            covariances: vec![scalar(1.0), scalar(4f64.exp())],
            labels: vec![0, 1],
        };
        let m = mdm_fit(&[d.clone()], 2).unwrap();
        // the domain reference is the midpoint e², so means are e^{∓2}
        assert!((m.means[0].as_matrix()[(0, 0)] - (-2f64).exp()).abs() < 1e-10);
        assert!((m.means[1].as_matrix()[(0, 0)] - 2f64.exp()).abs() < 1e-10);
        assert!((m.source_reference.as_matrix()[(0, 0)] - 2f64.exp()).abs() < 1e-10);
        let r = m.gr_reference(1).unwrap();
        let p = m.probabilities(&scalar(1.0), &r).unwrap();
        assert!(p[0] > 0.5);
        let tie = m.probabilities(&scalar(2f64.exp()), &r).unwrap();
        assert!((tie[0] - 0.5).abs() < 1e-12);
        assert!(mdm_fit(&[MdmDomain { covariances: vec![scalar(1.0)], labels: vec![0] }], 2).is_err());
    }

    #[test]
    fn order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let covs: Vec<SpdMatrix> = (0..10).map(|_| random_spd(&mut rng, 3, 1.0)).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let a = mdm_fit(&[MdmDomain { covariances: covs.clone(), labels: labels.clone() }], 2).unwrap();
        let mut idx: Vec<usize> = (0..10).collect();
        idx.reverse();
        idx.swap(2, 7);
        let b = mdm_fit(
            &[MdmDomain {
                covariances: idx.iter().map(|&i| covs[i].clone()).collect(),
                labels: idx.iter().map(|&i| labels[i]).collect(),
            }],
            2,
        )
        .unwrap();
        for (x, y) in a.means.iter().zip(&b.means) {
            assert!(x.as_matrix().sub(y.as_matrix()).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn separable_clusters_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = [SpdMatrix::from_diag(&[4.0, 1.0, 1.0]).unwrap(), SpdMatrix::from_diag(&[1.0, 1.0, 4.0]).unwrap()];
        let mut covs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let k = i % 2;
            let noise = Matrix::identity(3).add(&Matrix::from_fn(3, 3, |_, _| rng.random_range(-0.1..0.1))).unwrap();
            covs.push(base[k].congruence(&noise).unwrap());
            labels.push(k);
        }
        let d = MdmDomain { covariances: covs.clone(), labels: labels.clone() };
        let m = mdm_fit(&[d.clone()], 2).unwrap();
        let r = fit_reference_covariances(&covs, AlignMethod::Riemannian).unwrap();
        for (c, &l) in covs.iter().zip(&labels) {
            let p = m.probabilities(c, &r).unwrap();
            assert_eq!(if p[1] > p[0] { 1 } else { 0 }, l);
        }
    }

    #[test]
    fn common_congruence_keeps_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MdmModel {
            means: vec![random_spd(&mut rng, 4, 1.0), random_spd(&mut rng, 4, 1.0)],
            source_reference: SpdMatrix::identity(4),
            temperature: 1.0,
        };
        let r = identity_ref(4);
        for _ in 0..20 {
            let c = random_spd(&mut rng, 4, 1.0);
            let w = Matrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-1.0..1.0));
            let moved = MdmModel {
                means: m.means.iter().map(|x| x.congruence(&w).unwrap()).collect(),
                ..m.clone()
            };
            let d0 = m.distances(&c, &r).unwrap();
            let d1 = moved.distances(&c.congruence(&w).unwrap(), &r).unwrap();
            for (a, b) in d0.iter().zip(&d1) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gr_reduces_to_online_reference_and_contracts() {
        let m = MdmModel {
            means: vec![scalar(1.0), scalar(2.0)],
            source_reference: scalar(1.0),
            temperature: 1.0,
        };
        assert_eq!(m.gr_reference(0).unwrap(), AlignmentReference::empty(AlignMethod::Riemannian));
        let start = m.gr_reference(5).unwrap();
        assert_eq!(start.mean().unwrap(), &scalar(1.0));
        let target = Matrix::from_fn(1, 8, |_, t| if t % 2 == 0 { 3.0 } else { -3.0 });
        let goal = covariance(&target).unwrap();
        let mut r = start;
        let mut last = airm_distance(r.mean().unwrap(), &goal).unwrap();
        for _ in 0..30 {
            r = gr_update(&r, &target).unwrap();
            let d = airm_distance(r.mean().unwrap(), &goal).unwrap();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn par_blend_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let covs: Vec<SpdMatrix> = (0..8).map(|_| random_spd(&mut rng, 3, 1.0)).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let m = mdm_fit(&[MdmDomain { covariances: covs, labels: labels.clone() }], 2).unwrap();
        let target: Vec<SpdMatrix> = (0..8).map(|_| random_spd(&mut rng, 3, 3.0)).collect();
        let cal = MdmDomain { covariances: target.clone(), labels: labels.clone() };
        let keep = par_update(&m, &cal, 0.0).unwrap();
        assert_eq!(keep.model.means, m.means);
        let full = par_update(&m, &cal, 1.0).unwrap();
        let own = mdm_fit(&[cal.clone()], 2).unwrap();
        for (a, b) in full.model.means.iter().zip(&own.means) {
            assert!(a.as_matrix().sub(b.as_matrix()).unwrap().max_abs() < 1e-8);
        }
        let one_class = MdmDomain { covariances: target[..1].to_vec(), labels: vec![0] };
        let partial = par_update(&m, &one_class, 0.5).unwrap();
        assert_eq!(partial.warnings.len(), 1);
        assert_eq!(partial.model.means[1], m.means[1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MdmModel {
            means: vec![random_spd(&mut rng, 3, 1.0), random_spd(&mut rng, 3, 1.0)],
            source_reference: random_spd(&mut rng, 3, 1.0),
            temperature: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mdm.rapc");
        m.save(&p).unwrap();
        assert_eq!(MdmModel::load(&p).unwrap(), m);
        assert!(m.to_container().tensor("mdm.mean.1").is_some());
    }
}
