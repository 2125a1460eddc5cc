//! Synthetic two-domain data and the augmentation operators.
//!
//! Every sample lives in `latent_dim` coordinates split into a shared block
//! (the first `shared_dims`, visible to both branches) and a private block
//! (the rest, visible only to the target-specific branch). The last
//! `nuisance_dims` coordinates of the shared block carry high-variance noise
//! common to both domains, which source supervision can learn to ignore.
//!
//! Target classes come in two overlapping pairings: classes `2j` and `2j+1`
//! have similar shared-block means, while classes `2j+1` and `2j+2` have
//! similar private-block means. `view_overlap` controls how similar.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k_source: usize,
    pub k_target: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Ambient dimension of every sample.
    pub latent_dim: usize,
    /// Rotation angle (radians) of the target style transform.
    pub style_rotation_angle: f64,
    /// Scale applied to every other signal coordinate of the target domain.
    pub style_scale: f64,
    pub noise_sigma: f64,
    /// 0 gives equal class sizes; larger values tilt sizes geometrically so the
    /// smallest class has `1 - class_imbalance` times the mass of the largest.
    pub class_imbalance: f64,
    pub shared_dims: usize,
    /// Trailing coordinates of the shared block that hold nuisance noise.
    pub nuisance_dims: usize,
    pub nuisance_sigma: f64,
    /// 0 draws independent class means, 1 makes paired classes coincide in
    /// the corresponding block.
    pub view_overlap: f64,
    /// Fraction of the mean's squared norm placed in the private block.
    pub private_share: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_source: 8,
            k_target: 8,
            n_source: 800,
            n_target: 800,
            latent_dim: 25,
            style_rotation_angle: 0.5,
            style_scale: 1.5,
            noise_sigma: 0.1,
            class_imbalance: 0.0,
            shared_dims: 15,
            nuisance_dims: 5,
            nuisance_sigma: 0.5,
            view_overlap: 0.7,
            private_share: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_source == 0 || self.k_target == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        if self.k_source > self.n_source {
            return Err(Error::TooManyClusters { k: self.k_source, n: self.n_source });
        }
        if self.k_target > self.n_target {
            return Err(Error::TooManyClusters { k: self.k_target, n: self.n_target });
        }
        if self.shared_dims == 0 {
            return Err(Error::EmptySharedView);
        }
        if self.shared_dims > self.latent_dim {
            return Err(Error::Config(format!(
                "shared_dims {} exceeds latent_dim {}",
                self.shared_dims, self.latent_dim
            )));
        }
        if self.nuisance_dims >= self.shared_dims {
            return Err(Error::Config("nuisance_dims must leave signal in the shared block".into()));
        }
        if !(0.0..=1.0).contains(&self.class_imbalance) || self.class_imbalance >= 1.0 && self.k_target > 1 {
            return Err(Error::Config("class_imbalance must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.view_overlap) || !(0.0..=1.0).contains(&self.private_share) {
            return Err(Error::Config("view_overlap and private_share must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("style_scale", self.style_scale),
            ("noise_sigma", self.noise_sigma),
            ("nuisance_sigma", self.nuisance_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.style_scale == 0.0 {
            return Err(Error::Config("style_scale must be positive".into()));
        }
        Ok(())
    }

    fn signal_dims(&self) -> usize {
        self.shared_dims - self.nuisance_dims
    }

    fn private_dims(&self) -> usize {
        self.latent_dim - self.shared_dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub x: Vec<f64>,
    pub domain: Domain,
    pub label: Option<usize>,
}

/// Labeled source samples, unlabeled target samples and the hidden target
/// truth. Source labels lie in `0..k_source`, target truth in
/// `k_source..k_source + k_target`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: SynthConfig,
    pub source_x: Matrix<f64>,
    pub source_labels: Vec<usize>,
    pub target_x: Matrix<f64>,
    pub target_labels: Option<Vec<usize>>,
}

impl DatasetBundle {
    pub fn input_dim(&self) -> usize {
        self.target_x.cols()
    }

    pub fn num_target(&self) -> usize {
        self.target_x.rows()
    }

    pub fn num_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn target_truth(&self) -> Result<&[usize]> {
        self.target_labels
            .as_deref()
            .ok_or_else(|| Error::Config("dataset has no target ground truth".into()))
    }

    pub fn samples(&self) -> Vec<DomainSample> {
        let source = self.source_x.row_iter().zip(&self.source_labels).map(|(x, &l)| DomainSample {
            x: x.to_vec(),
            domain: Domain::Source,
            label: Some(l),
        });
        let target = self.target_x.row_iter().map(|x| DomainSample {
            x: x.to_vec(),
            domain: Domain::Target,
            label: None,
        });
        source.chain(target).collect()
    }
}

/// Per-class sample counts summing to `n`, equal up to one when
/// `imbalance` is zero.
pub fn class_sizes(n: usize, k: usize, imbalance: f64) -> Vec<usize> {
    if k == 1 {
        return vec![n];
    }
    let ratio = (1.0 - imbalance).powf(1.0 / (k - 1) as f64);
    let weights: Vec<f64> = (0..k).map(|c| ratio.powi(c as i32)).collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - sizes.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        sizes[c] += 1;
    }
    sizes
}

fn gaussian_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn blend(own: &[f64], partner: &[f64], overlap: f64) -> Vec<f64> {
    unit(own.iter().zip(partner).map(|(a, b)| (1.0 - overlap) * a + overlap * b).collect())
}

/// Unit-norm class means laid out as [shared signal | nuisance (zero) | private].
fn class_means(cfg: &SynthConfig, k: usize, paired: bool, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let sd = cfg.signal_dims();
    let pd = cfg.private_dims();
    let own_s: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian_vec(rng, sd))).collect();
    let own_p: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian_vec(rng, pd))).collect();
    let anchor_s: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian_vec(rng, sd))).collect();
    let anchor_p: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian_vec(rng, pd))).collect();
    let share = if pd == 0 { 0.0 } else { cfg.private_share };
    let (ws, wp) = ((1.0 - share).sqrt(), share.sqrt());
    (0..k)
        .map(|c| {
            let (s, p) = if paired {
                let gs = c / 2;
                let gp = ((c + 1) % k) / 2;
                (
                    blend(&own_s[c], &anchor_s[gs], cfg.view_overlap),
                    blend(&own_p[c], &anchor_p[gp], cfg.view_overlap),
                )
            } else {
                (own_s[c].clone(), own_p[c].clone())
            };
            let mut mean = Vec::with_capacity(cfg.latent_dim);
            mean.extend(s.iter().map(|v| v * ws));
            mean.extend(std::iter::repeat_n(0.0, cfg.nuisance_dims));
            mean.extend(p.iter().map(|v| v * wp));
            mean
        })
        .collect()
}

/// Target style: Givens rotations by `angle` on consecutive coordinate pairs
/// of each signal block, then scaling of every even coordinate.
fn apply_style(cfg: &SynthConfig, x: &mut [f64]) {
    let (sin, cos) = cfg.style_rotation_angle.sin_cos();
    let blocks = [(0, cfg.signal_dims()), (cfg.shared_dims, cfg.latent_dim)];
    for (lo, hi) in blocks {
        let mut i = lo;
        while i + 1 < hi {
            let (a, b) = (x[i], x[i + 1]);
            x[i] = cos * a - sin * b;
            x[i + 1] = sin * a + cos * b;
            i += 2;
        }
        for j in (lo..hi).step_by(2) {
            x[j] *= cfg.style_scale;
        }
    }
}

fn draw_domain(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    n: usize,
    styled: bool,
    label_offset: usize,
    rng: &mut SeededRng,
) -> (Matrix<f64>, Vec<usize>) {
    let sizes = class_sizes(n, means.len(), cfg.class_imbalance);
    let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
    rng.shuffle(&mut labels);
    let nuisance = cfg.signal_dims()..cfg.shared_dims;
    let mut x = Matrix::zeros(n, cfg.latent_dim);
    for (i, &c) in labels.iter().enumerate() {
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[c][j] + cfg.noise_sigma * rng.normal();
        }
        if styled {
            apply_style(cfg, row);
        }
        for j in nuisance.clone() {
            row[j] += cfg.nuisance_sigma * rng.normal();
        }
    }
    (x, labels.into_iter().map(|c| c + label_offset).collect())
}

/// Draws a dataset; deterministic in `cfg` (including `cfg.seed`).
pub fn generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let source_means = class_means(cfg, cfg.k_source, false, &mut root.derive(1));
    let target_means = class_means(cfg, cfg.k_target, true, &mut root.derive(2));
    let (source_x, source_labels) = draw_domain(cfg, &source_means, cfg.n_source, false, 0, &mut root.derive(3));
    let (target_x, target_labels) =
        draw_domain(cfg, &target_means, cfg.n_target, true, cfg.k_source, &mut root.derive(4));
    Ok(DatasetBundle {
        config: cfg.clone(),
        source_x,
        source_labels,
        target_x,
        target_labels: Some(target_labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Off-diagonal amplitude of the random affine map.
    pub affine_amplitude: f64,
    /// Jitter standard deviation relative to the per-coordinate RMS of the input.
    pub jitter_scale: f64,
    pub mask_prob: f64,
    /// Width of the coordinate blocks that masking removes together.
    pub block_size: usize,
}

impl AugmentConfig {
    pub fn weak() -> Self {
        Self {
            kind: AugmentKind::Weak,
            affine_amplitude: 0.5,
            jitter_scale: 0.1,
            mask_prob: 0.0,
            block_size: 5,
        }
    }

    pub fn strong() -> Self {
        Self {
            kind: AugmentKind::Strong,
            affine_amplitude: 1.0,
            jitter_scale: 0.2,
            mask_prob: 0.3,
            block_size: 5,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: AugmentKind::Weak,
            affine_amplitude: 0.0,
            jitter_scale: 0.0,
            mask_prob: 0.0,
            block_size: 5,
        }
    }
}

/// Random affine distortion `(I + a E) x` with off-diagonal `E_ij ~ U(-1, 1) / sqrt(d)`,
/// plus Gaussian jitter, plus (strong only) block masking.
pub fn augment<S: Scalar>(x: &[S], cfg: &AugmentConfig, rng: &mut SeededRng) -> Vec<S> {
    let d = x.len();
    let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
    let mut out = xf.clone();
    if cfg.affine_amplitude != 0.0 && d > 1 {
        let scale = cfg.affine_amplitude / (d as f64).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &xj) in xf.iter().enumerate() {
                if i != j {
                    *o += scale * rng.uniform_in(-1.0, 1.0) * xj;
                }
            }
        }
    }
    if cfg.jitter_scale != 0.0 && d > 0 {
        let rms = (xf.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
        out.iter_mut().for_each(|o| *o += cfg.jitter_scale * rms * rng.normal());
    }
    if cfg.kind == AugmentKind::Strong && cfg.mask_prob > 0.0 {
        for block in out.chunks_mut(cfg.block_size.max(1)) {
            if rng.bernoulli(cfg.mask_prob) {
                block.fill(0.0);
            }
        }
    }
    out.into_iter().map(S::lit).collect()
}

/// Augments every row independently.
pub fn augment_rows<S: Scalar>(m: &Matrix<S>, cfg: &AugmentConfig, rng: &mut SeededRng) -> Matrix<S> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let a = augment(m.row(r), cfg, rng);
        out.row_mut(r).copy_from_slice(&a);
    }
    out
}

/// The first `shared_dims` coordinates.
pub fn shared_view<S: Scalar>(x: &[S], shared_dims: usize) -> Result<Vec<S>> {
    if shared_dims == 0 {
        return Err(Error::EmptySharedView);
    }
    if shared_dims > x.len() {
        return Err(Error::Shape(format!("shared view of {shared_dims} from {} coordinates", x.len())));
    }
    Ok(x[..shared_dims].to_vec())
}

pub fn shared_view_rows<S: Scalar>(m: &Matrix<S>, shared_dims: usize) -> Result<Matrix<S>> {
    if shared_dims == 0 {
        return Err(Error::EmptySharedView);
    }
    if shared_dims > m.cols() {
        return Err(Error::Shape(format!("shared view of {shared_dims} from {} coordinates", m.cols())));
    }
    Ok(m.leading_columns(shared_dims))
}

pub const DATASET_FILE: &str = "dataset.txt";
pub const CONFIG_FILE: &str = "synth_config.json";
pub const TRUTH_FILE: &str = "target_truth.txt";

/// Writes `dataset.txt` (one sample per line: domain, label or `?`, coordinates),
/// the `synth_config.json` sidecar, and the hidden target truth.
pub fn write_dataset(dir: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
    for s in bundle.samples() {
        let domain = match s.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        write!(w, "{domain} ")?;
        match s.label {
            Some(l) => write!(w, "{l}")?,
            None => write!(w, "?")?,
        }
        for v in &s.x {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&bundle.config)?)?;
    if let Some(truth) = &bundle.target_labels {
        let mut t = BufWriter::new(fs::File::create(dir.join(TRUTH_FILE))?);
        for l in truth {
            writeln!(t, "{l}")?;
        }
        t.flush()?;
    }
    Ok(())
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("line {line}: {msg}"))
}

/// Reads a directory written by [`write_dataset`]; the truth file is optional.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let config: SynthConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let reader = BufReader::new(fs::File::open(dir.join(DATASET_FILE))?);
    let (mut sx, mut sl, mut tx) = (Vec::new(), Vec::new(), Vec::new());
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let domain = fields.next().ok_or_else(|| parse_err(i + 1, "missing domain"))?;
        let label = fields.next().ok_or_else(|| parse_err(i + 1, "missing label"))?;
        let coords = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(i + 1, e)))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(coords.len()) != coords.len() {
            return Err(parse_err(i + 1, "inconsistent coordinate count"));
        }
        match (domain, label) {
            ("source", l) => {
                sl.push(l.parse::<usize>().map_err(|e| parse_err(i + 1, e))?);
                sx.extend(coords);
            }
            ("target", "?") => tx.extend(coords),
            ("target", _) => return Err(parse_err(i + 1, "target labels must be hidden")),
            (d, _) => return Err(parse_err(i + 1, format!("unknown domain {d:?}"))),
        }
    }
    let d = width.ok_or(Error::EmptyInput)?;
    let ns = sl.len();
    let nt = tx.len().checked_div(d).unwrap_or(0);
    let truth_path = dir.join(TRUTH_FILE);
    let target_labels = if truth_path.exists() {
        let truth = read_labels(&truth_path)?;
        if truth.len() != nt {
            return Err(Error::Shape(format!("{} truth labels for {nt} target samples", truth.len())));
        }
        Some(truth)
    } else {
        None
    };
    Ok(DatasetBundle {
        config,
        source_x: Matrix::new(ns, d, sx)?,
        source_labels: sl,
        target_x: Matrix::new(nt, d, tx)?,
        target_labels,
    })
}

/// One non-negative integer per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse::<usize>().map_err(|e| parse_err(i + 1, e)))
        .collect()
}
