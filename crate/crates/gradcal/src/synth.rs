//! Synthetic two-modality benchmark with controllable task-to-modality
//! association.
//!
//! Each sample has independent latents `z_det` and `z_seg`. The lidar-like
//! input embeds `z_det` with weight (1 - rho) and `z_seg` with weight rho;
//! the image-like input is the mirror image. With rho = 0 the detection
//! label is recoverable from the lidar input only and the mask from the
//! image input only.
//!
//! All randomness comes from ChaCha8 streams keyed by the config seed
//! (normals via the `rand_distr` ziggurat sampler), so a `(config, seed)`
//! pair always produces identical bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Benchmark generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub d_lid: usize,
    pub d_img: usize,
    pub k_classes: usize,
    pub g_cells: usize,
    /// Cross-modal leakage in [0, 1]; 0 puts detection information only in
    /// lidar and segmentation information only in image.
    pub rho: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 8192,
            d_lid: 64,
            d_img: 16,
            k_classes: 8,
            g_cells: 6,
            rho: 0.1,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} not in [0, 1]", self.rho)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.d_lid < 1 || self.d_img < 1 || self.g_cells < 1 {
            return Err(Error::Config("widths must be >= 1".into()));
        }
        if self.k_classes < 2 {
            return Err(Error::Config("k_classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub x_lid: Vec<f64>,
    pub x_img: Vec<f64>,
    pub det_label: usize,
    pub seg_mask: Vec<u8>,
    /// (detection labeled?, segmentation labeled?) — at least one is true.
    pub task_mask: (bool, bool),
}

/// Annotation schemes: all labels, or a per-sample single-task split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    Full,
    DisjointNormal,
    DisjointBalance,
}

impl SplitScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitScheme::Full => "full",
            SplitScheme::DisjointNormal => "disjoint-normal",
            SplitScheme::DisjointBalance => "disjoint-balance",
        }
    }
}

/// Which modality to blank out at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropModality {
    None,
    Lidar,
    Image,
}

/// Fixed per-world matrices mapping latents into the two inputs and onto
/// the labels.
struct World {
    emb_lid_det: Vec<Vec<f64>>,
    emb_lid_seg: Vec<Vec<f64>>,
    emb_img_det: Vec<Vec<f64>>,
    emb_img_seg: Vec<Vec<f64>>,
    readout_det: Vec<Vec<f64>>,
    readout_seg: Vec<Vec<f64>>,
    k_det: usize,
    k_seg: usize,
}

/// Generates the dataset for `cfg`, deterministic in `cfg.seed`. All task
/// masks start at (true, true); apply a [`SplitScheme`] afterwards.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let world = draw_world(cfg);
    let mut rng = sample_stream(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        out.push(draw_sample(cfg, &world, &mut rng));
    }
    Ok(out)
}

/// Latent dimensions: the detection latent matches the class count and the
/// segmentation latent matches the cell count.
fn latent_dims(cfg: &SynthConfig) -> (usize, usize) {
    (cfg.k_classes, cfg.g_cells)
}

fn world_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn sample_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

fn split_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

fn draw_world(cfg: &SynthConfig) -> World {
    let (k_det, k_seg) = latent_dims(cfg);
    let mut rng = world_stream(cfg.seed);
    let emb_lid_det = gaussian_matrix(&mut rng, cfg.d_lid, k_det, 1.0 / (k_det as f64).sqrt());
    let emb_lid_seg = gaussian_matrix(&mut rng, cfg.d_lid, k_seg, 1.0 / (k_seg as f64).sqrt());
    let emb_img_det = gaussian_matrix(&mut rng, cfg.d_img, k_det, 1.0 / (k_det as f64).sqrt());
    let emb_img_seg = gaussian_matrix(&mut rng, cfg.d_img, k_seg, 1.0 / (k_seg as f64).sqrt());
    let readout_det = balanced_det_readout(&mut rng, cfg.k_classes, k_det);
    let readout_seg = gaussian_matrix(&mut rng, cfg.g_cells, k_seg, 1.0);
    World {
        emb_lid_det,
        emb_lid_seg,
        emb_img_det,
        emb_img_seg,
        readout_det,
        readout_seg,
        k_det,
        k_seg,
    }
}

/// Draws the detection readout, probing its class balance on a fixed batch
/// of latents and redrawing until every class frequency sits inside
/// [0.7/K, 1.5/K]. Keeps the label histogram non-degenerate for any seed.
fn balanced_det_readout(rng: &mut ChaCha8Rng, classes: usize, k_det: usize) -> Vec<Vec<f64>> {
    const PROBES: usize = 4096;
    const MAX_ATTEMPTS: usize = 64;
    let lo = 0.7 / classes as f64;
    let hi = 1.5 / classes as f64;
    let mut last = gaussian_matrix(rng, classes, k_det, 1.0);
    for _ in 0..MAX_ATTEMPTS {
        let mut counts = vec![0usize; classes];
        let mut probe_rng = rng.clone();
        for _ in 0..PROBES {
            let z: Vec<f64> = (0..k_det).map(|_| probe_rng.sample(StandardNormal)).collect();
            counts[argmax(&mat_vec(&last, &z))] += 1;
        }
        let ok = counts
            .iter()
            .all(|&c| (c as f64 / PROBES as f64) >= lo && (c as f64 / PROBES as f64) <= hi);
        if ok {
            return last;
        }
        last = gaussian_matrix(rng, classes, k_det, 1.0);
    }
    last
}

fn draw_sample(cfg: &SynthConfig, world: &World, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let z_det: Vec<f64> = (0..world.k_det).map(|_| rng.sample(StandardNormal)).collect();
    let z_seg: Vec<f64> = (0..world.k_seg).map(|_| rng.sample(StandardNormal)).collect();

    let mut x_lid = vec![0.0; cfg.d_lid];
    add_scaled_mat_vec(&mut x_lid, &world.emb_lid_det, &z_det, 1.0 - cfg.rho);
    add_scaled_mat_vec(&mut x_lid, &world.emb_lid_seg, &z_seg, cfg.rho);
    for v in &mut x_lid {
        *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
    }

    let mut x_img = vec![0.0; cfg.d_img];
    add_scaled_mat_vec(&mut x_img, &world.emb_img_det, &z_det, cfg.rho);
    add_scaled_mat_vec(&mut x_img, &world.emb_img_seg, &z_seg, 1.0 - cfg.rho);
    for v in &mut x_img {
        *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
    }

    let det_label = argmax(&mat_vec(&world.readout_det, &z_det));
    let seg_mask = mat_vec(&world.readout_seg, &z_seg)
        .iter()
        .map(|&v| u8::from(v > 0.0))
        .collect();

    SyntheticSample {
        x_lid,
        x_img,
        det_label,
        seg_mask,
        task_mask: (true, true),
    }
}

/// Re-labels the dataset for one annotation scheme. Inputs and labels are
/// untouched; only the task masks change. Disjoint schemes assign each
/// sample to exactly one task, with rounding favoring the detection side
/// by at most one sample.
pub fn apply_split(dataset: &mut [SyntheticSample], scheme: SplitScheme, seed: u64) {
    match scheme {
        SplitScheme::Full => {
            for s in dataset.iter_mut() {
                s.task_mask = (true, true);
            }
        }
        SplitScheme::DisjointNormal => assign_disjoint(dataset, seed, 3, 4),
        SplitScheme::DisjointBalance => assign_disjoint(dataset, seed, 1, 2),
    }
}

fn assign_disjoint(dataset: &mut [SyntheticSample], seed: u64, det_num: usize, det_den: usize) {
    let n = dataset.len();
    let det_count = (n * det_num).div_ceil(det_den);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut split_stream(seed));
    for (rank, &i) in indices.iter().enumerate() {
        dataset[i].task_mask = if rank < det_count {
            (true, false)
        } else {
            (false, true)
        };
    }
}

/// Zeroes the chosen modality's input vectors; labels and masks stay.
pub fn drop_modality(samples: &mut [SyntheticSample], which: DropModality) {
    match which {
        DropModality::None => {}
        DropModality::Lidar => {
            for s in samples.iter_mut() {
                s.x_lid.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        DropModality::Image => {
            for s in samples.iter_mut() {
                s.x_img.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Writes one JSON object per line with fields
/// {x_lid, x_img, det_label, seg_mask, task_mask}.
pub fn export_jsonl(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::parse(path, e.to_string()))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn add_scaled_mat_vec(out: &mut [f64], m: &[Vec<f64>], v: &[f64], scale: f64) {
    for (o, row) in out.iter_mut().zip(m) {
        *o += scale * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
