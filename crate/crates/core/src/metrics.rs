//! PSNR, a toy FID over a fixed random feature extractor, and the
//! slice-to-slice discontinuity index.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Head, InputSpec, LayerSpec, Model, Tensor};
use crate::pipeline::slices_to_tensor;
use crate::volume::{extract_slices, Orientation, SliceStack, Volume};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const FEATURE_SEED: u64 = 0xF1D;
pub const FEATURE_DIM: usize = 64;
pub const MIN_FEATURE_SLICE: usize = 8;
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Inner-matrix eigenvalues below this are treated as a failure, not round-off.
pub const PSD_TOLERANCE: f64 = -1e-6;

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(max^2 / mse)`, capped at 99 dB.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    let peak = max_val * max_val;
    if mse < peak * 10f64.powf(-PSNR_CAP_DB / 10.0) {
        PSNR_CAP_DB
    } else {
        10.0 * (peak / mse).log10()
    }
}

pub fn mse(reference: &Volume, syn: &Volume) -> Result<f64> {
    same_dims(reference, syn)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(syn.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.data().len() as f64)
}

pub fn psnr(reference: &Volume, syn: &Volume, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::Config(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(reference, syn)?, max_val))
}

/// Fixed, seeded random conv net mapping a slice to a 64-d pooled feature.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    model: Model<f32>,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let conv = |i, o, k, s| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: k / 2,
            bias: true,
        };
        let specs = vec![
            conv(1, 8, 3, 2),
            LayerSpec::Relu,
            conv(8, 16, 3, 2),
            LayerSpec::Relu,
            conv(16, 32, 3, 2),
            LayerSpec::Relu,
            conv(32, FEATURE_DIM, 1, 1),
        ];
        let input = InputSpec {
            channels: 1,
            rank: 2,
            spatial_multiple: 1,
        };
        let model = Model::new(input, specs, Head::Plain, FEATURE_SEED).expect("static extractor graph");
        FeatureExtractor { model }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Pooled feature of each slice, one row per slice.
    pub fn extract(&self, stack: &SliceStack) -> Result<DMatrix<f64>> {
        let (rows, cols) = stack.slice_dims;
        if rows < MIN_FEATURE_SLICE || cols < MIN_FEATURE_SLICE {
            return Err(Error::Shape(format!(
                "slices of {rows}x{cols} are smaller than {MIN_FEATURE_SLICE}x{MIN_FEATURE_SLICE}"
            )));
        }
        let mut out = DMatrix::zeros(stack.slices.len(), FEATURE_DIM);
        for (i, s) in stack.slices.iter().enumerate() {
            let y = self.model.forward(&slices_to_tensor(std::slice::from_ref(s)))?;
            for (c, v) in pool(&y).into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        Ok(out)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

fn pool(y: &Tensor<f32>) -> Vec<f64> {
    let n = y.spatial_len();
    y.data()
        .chunks_exact(n)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect()
}

pub fn extract_features(stack: &SliceStack, fe: &FeatureExtractor) -> Result<DMatrix<f64>> {
    fe.extract(stack)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance (plus `1e-6 I`) of the rows of `features`.
pub fn gaussian_stats(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Numerical(format!("need at least 2 samples, got {n}")));
    }
    let d = features.ncols();
    let mean = DVector::from_iterator(d, features.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = s;
            covariance[(j, i)] = s;
        }
        covariance[(i, i)] += COVARIANCE_RIDGE;
    }
    Ok(GaussianStats { mean, covariance, n })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let root_a = sqrt_psd(&a.covariance);
    let inner = symmetrize(&(&root_a * &b.covariance * &root_a));
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut trace_root = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < PSD_TOLERANCE * scale {
            return Err(Error::Numerical(format!("inner matrix has eigenvalue {l:e}")));
        }
        trace_root += l.max(0.0).sqrt();
    }
    let shift = (&a.mean - &b.mean).norm_squared();
    let d = shift + a.covariance.trace() + b.covariance.trace() - 2.0 * trace_root;
    if !d.is_finite() {
        return Err(Error::Numerical("non-finite Frechet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Mean over adjacent slice pairs along `o` of the mean absolute difference.
pub fn discontinuity_index(v: &Volume, o: Orientation) -> Result<f64> {
    let stack = extract_slices(v, o);
    if stack.slices.len() < 2 {
        return Err(Error::InvalidVolume(format!(
            "discontinuity index needs at least 2 {o} slices"
        )));
    }
    let pairs = stack.slices.windows(2);
    let n = pairs.len();
    let total: f64 = pairs
        .map(|w| {
            let s: f64 = w[0]
                .data
                .iter()
                .zip(&w[1].data)
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum();
            s / w[0].data.len() as f64
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiDelta {
    pub axial: f64,
    pub coronal: f64,
    pub sagittal: f64,
}

impl DiDelta {
    pub fn get(&self, o: Orientation) -> f64 {
        match o {
            Orientation::Axial => self.axial,
            Orientation::Coronal => self.coronal,
            Orientation::Sagittal => self.sagittal,
        }
    }

    fn get_mut(&mut self, o: Orientation) -> &mut f64 {
        match o {
            Orientation::Axial => &mut self.axial,
            Orientation::Coronal => &mut self.coronal,
            Orientation::Sagittal => &mut self.sagittal,
        }
    }

    /// Mean of the coronal and sagittal entries.
    pub fn off_axis_mean(&self) -> f64 {
        0.5 * (self.coronal + self.sagittal)
    }
}

/// Evaluation result plus provenance; serializes to the report file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub psnr_per_subject: Vec<f64>,
    pub fid: f64,
    pub di_delta: DiDelta,
    pub method: String,
    pub dataset_id: String,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl MetricReport {
    pub fn with_provenance(mut self, method: &str, dataset_id: &str, seed: u64) -> Self {
        self.method = method.to_string();
        self.dataset_id = dataset_id.to_string();
        self.seed = seed;
        self
    }

    pub fn all_finite(&self) -> bool {
        [self.psnr_mean, self.psnr_std, self.fid, self.wall_seconds]
            .iter()
            .chain(&self.psnr_per_subject)
            .chain(&[self.di_delta.axial, self.di_delta.coronal, self.di_delta.sagittal])
            .all(|x| x.is_finite())
    }
}

fn pooled_axial_features(vols: &[&Volume], fe: &FeatureExtractor) -> Result<DMatrix<f64>> {
    let blocks = vols
        .iter()
        .map(|v| fe.extract(&extract_slices(v, Orientation::Axial)))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, FEATURE_DIM);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(&b);
        r += b.nrows();
    }
    Ok(out)
}

/// PSNR per subject, FID over pooled axial slices, and per-orientation DI deltas.
pub fn evaluate_volumes(refs: &[&Volume], syns: &[&Volume], fe: &FeatureExtractor) -> Result<MetricReport> {
    if refs.len() != syns.len() {
        return Err(Error::DimMismatch(format!(
            "{} reference volumes but {} synthesized",
            refs.len(),
            syns.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut per = Vec::with_capacity(refs.len());
    let mut di = DiDelta::default();
    for (r, s) in refs.iter().zip(syns) {
        per.push(psnr(r, s, 1.0)?);
        for o in Orientation::ALL {
            *di.get_mut(o) += (discontinuity_index(s, o)? - discontinuity_index(r, o)?).abs();
        }
    }
    let n = refs.len() as f64;
    for o in Orientation::ALL {
        *di.get_mut(o) /= n;
    }
    let mean = per.iter().sum::<f64>() / n;
    let std = if per.len() > 1 {
        (per.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let fa = gaussian_stats(&pooled_axial_features(refs, fe)?)?;
    let fb = gaussian_stats(&pooled_axial_features(syns, fe)?)?;
    Ok(MetricReport {
        psnr_mean: mean,
        psnr_std: std,
        psnr_per_subject: per,
        fid: frechet_distance(&fa, &fb)?,
        di_delta: di,
        method: String::new(),
        dataset_id: String::new(),
        seed: 0,
        wall_seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn psnr_examples() {
        let z = Volume::zeros(Dims::new(1, 1, 100)).unwrap();
        let mut one_off = z.clone();
        one_off.data_mut()[17] = 1.0;
        assert!((psnr(&z, &one_off, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), 99.0);
        let ones = Volume::filled(Dims::cube(3), 1.0).unwrap();
        let zeros = Volume::zeros(Dims::cube(3)).unwrap();
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
        assert!(psnr(&zeros, &Volume::zeros(Dims::cube(2)).unwrap(), 1.0).is_err());
    }

    #[test]
    fn gaussian_stats_examples() {
        let same = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = gaussian_stats(&same).unwrap();
        assert_eq!(s.covariance, DMatrix::identity(3, 3) * 1e-6);
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let s = gaussian_stats(&two).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.covariance[(0, 0)], 2.0 + 1e-6);
        assert!(gaussian_stats(&DMatrix::zeros(1, 3)).is_err());
    }

    fn stats(mean: &[f64], cov: DMatrix<f64>) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_row_slice(mean),
            covariance: cov,
            n: 2,
        }
    }

    #[test]
    fn frechet_examples() {
        let a = stats(&[0.0, 0.0, 0.0], DMatrix::identity(3, 3));
        let b = stats(&[1.0, 0.0, 0.0], DMatrix::identity(3, 3));
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        let va = stats(&[0.0], DMatrix::from_element(1, 1, 4.0));
        let vb = stats(&[0.0], DMatrix::from_element(1, 1, 1.0));
        assert!((frechet_distance(&va, &vb).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn discontinuity_examples() {
        let c = Volume::filled(Dims::new(4, 5, 6), 0.7).unwrap();
        for o in Orientation::ALL {
            assert_eq!(discontinuity_index(&c, o).unwrap(), 0.0);
        }
        let alt = Volume::from_fn(Dims::new(3, 4, 6), |_, _, x| (x % 2) as f32).unwrap();
        assert_eq!(discontinuity_index(&alt, Orientation::Sagittal).unwrap(), 1.0);
        assert_eq!(discontinuity_index(&alt, Orientation::Axial).unwrap(), 0.0);
        let thin = Volume::zeros(Dims::new(1, 4, 4)).unwrap();
        assert!(discontinuity_index(&thin, Orientation::Axial).is_err());
    }

    #[test]
    fn features_shape_and_small_slices() {
        let fe = FeatureExtractor::new();
        let v = Volume::from_fn(Dims::new(3, 8, 8), |z, y, x| ((z + y * x) % 5) as f32 / 4.0).unwrap();
        let f = fe.extract(&extract_slices(&v, Orientation::Axial)).unwrap();
        assert_eq!((f.nrows(), f.ncols()), (3, FEATURE_DIM));
        assert!(fe.extract(&extract_slices(&v, Orientation::Coronal)).is_err());
    }

    #[test]
    fn self_evaluation() {
        let v = Volume::from_fn(Dims::cube(8), |z, y, x| ((z * 3 + y * 5 + x) % 7) as f32 / 6.0).unwrap();
        let r = evaluate_volumes(&[&v, &v], &[&v, &v], &FeatureExtractor::new()).unwrap();
        assert_eq!(r.psnr_mean, 99.0);
        assert_eq!(r.psnr_std, 0.0);
        assert!(r.fid <= 1e-6);
        assert!(r.di_delta.axial <= 1e-12 && r.di_delta.off_axis_mean() <= 1e-12);
        assert!(evaluate_volumes(&[&v], &[], &FeatureExtractor::new()).is_err());
    }
}
