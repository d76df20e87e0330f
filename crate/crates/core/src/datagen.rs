//! Seeded synthetic phantoms for the four task families: denoising,
//! label-free prediction, semantic segmentation and 2-D instance
//! segmentation. Every generator works on `[1, 1, spatial...]` shapes with two
//! or three spatial axes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {wanted} objects within {attempts} attempts (placed {placed})")]
    PlacementFailure { wanted: usize, placed: usize, attempts: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise3d,
    Labelfree3d,
    Semantic3d,
    Instance2d,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Denoise3d, Task::Labelfree3d, Task::Semantic3d, Task::Instance2d];

    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise3d => "denoise3d",
            Task::Labelfree3d => "labelfree3d",
            Task::Semantic3d => "semantic3d",
            Task::Instance2d => "instance2d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub task: Task,
    /// Full tensor shape `[1, 1, spatial...]`.
    pub shape: Vec<usize>,
    /// Inclusive object count range.
    pub count: [usize; 2],
    /// Inclusive radius range in pixels (Gaussian sigma for blobs, semi-axes
    /// for ellipses).
    pub radius: [f64; 2],
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Label-free target: `tanh(gain * (G_1 * x - G_2 * x))`.
const DOG_SIGMAS: (f64, f64) = (1.0, 2.0);
const DOG_GAIN: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

impl PhantomSpec {
    /// Frozen default specs: 3-D tasks at `[1,1,32,64,64]`, the 2-D task at
    /// `[1,1,256,256]`.
    pub fn default_for(task: Task) -> Self {
        let base = Self {
            task,
            shape: vec![1, 1, 32, 64, 64],
            count: [200, 300],
            radius: [2.0, 5.0],
            amplitude: 1.0,
            noise_sigma: 0.3,
            seed: 0,
        };
        match task {
            Task::Denoise3d => base,
            Task::Labelfree3d => Self {
                count: [60, 90],
                radius: [1.5, 3.0],
                noise_sigma: 0.02,
                ..base
            },
            Task::Semantic3d => Self {
                count: [4, 8],
                radius: [2.5, 4.5],
                noise_sigma: 0.25,
                ..base
            },
            Task::Instance2d => Self {
                shape: vec![1, 1, 256, 256],
                count: [12, 20],
                radius: [5.0, 12.0],
                noise_sigma: 0.15,
                ..base
            },
        }
    }

    pub fn with_shape(mut self, shape: &[usize]) -> Self {
        self.shape = shape.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.shape.len() < 4 || self.shape.len() > 5 || self.shape[0] != 1 || self.shape[1] != 1 {
            return bad(format!("shape must be [1, 1, 2 or 3 spatial axes], got {:?}", self.shape));
        }
        if self.spatial().contains(&0) {
            return bad("spatial extents must be positive".into());
        }
        if self.task == Task::Instance2d && self.spatial().len() != 2 {
            return bad("instance phantoms are 2-D".into());
        }
        if self.count[0] > self.count[1] {
            return bad(format!("count range {:?} is reversed", self.count));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return bad(format!("radius range {:?} must be positive and ordered", self.radius));
        }
        if !(self.noise_sigma >= 0.0) || !(self.amplitude > 0.0) {
            return bad("noise_sigma must be >= 0 and amplitude > 0".into());
        }
        Ok(())
    }
}

/// An input/target pair; the target is an image, a binary mask or a label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub input: Tensor,
    pub target: Tensor,
}

fn rng_for(spec: &PhantomSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed)
}

fn strides(sp: &[usize]) -> Vec<usize> {
    (0..sp.len()).map(|a| sp[a + 1..].iter().product()).collect()
}

/// Adds `amp * exp(-|p - c|^2 / (2 sigma^2))` within 3 sigma of the center.
fn add_blob(field: &mut [f64], sp: &[usize], center: &[f64], sigma: f64, amp: f64) {
    let st = strides(sp);
    let reach = (3.0 * sigma).ceil() as isize;
    let lo: Vec<usize> = center.iter().map(|&c| (c.round() as isize - reach).max(0) as usize).collect();
    let hi: Vec<usize> = center
        .iter()
        .zip(sp)
        .map(|(&c, &e)| ((c.round() as isize + reach).max(-1) + 1).min(e as isize).max(0) as usize)
        .collect();
    if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
        return;
    }
    let mut idx = lo.clone();
    loop {
        let d2: f64 = idx.iter().zip(center).map(|(&i, &c)| (i as f64 - c).powi(2)).sum();
        let flat: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        field[flat] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        let mut ax = idx.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < hi[ax] {
                break;
            }
            idx[ax] = lo[ax];
        }
    }
}

fn random_blobs(rng: &mut ChaCha8Rng, spec: &PhantomSpec, signed: bool, amp_scale: (f64, f64)) -> Vec<f64> {
    let sp = spec.spatial();
    let mut field = vec![0.0; sp.iter().product()];
    let n = rng.random_range(spec.count[0]..=spec.count[1]);
    for _ in 0..n {
        let center: Vec<f64> = sp.iter().map(|&e| rng.random_range(0.0..e as f64)).collect();
        let sigma = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let mut amp = spec.amplitude * rng.random_range(amp_scale.0..=amp_scale.1);
        if signed && rng.random_bool(0.5) {
            amp = -amp;
        }
        add_blob(&mut field, sp, &center, sigma, amp);
    }
    field
}

fn add_noise(rng: &mut ChaCha8Rng, field: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    field.iter().map(|&v| v + normal.sample(rng)).collect()
}

fn to_tensor(shape: &[usize], v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_f32(shape.to_vec(), v.iter().map(|&x| x as f32).collect())?)
}

/// Separable Gaussian filter with clamped borders.
fn gaussian_blur(field: &[f64], sp: &[usize], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let st = strides(sp);
    let mut cur = field.to_vec();
    for (ax, &e) in sp.iter().enumerate() {
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let coord = (flat / st[ax]) % e;
            let base = flat - coord * st[ax];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let c = (coord as isize + k as isize - r).clamp(0, e as isize - 1) as usize;
                acc += w * cur[base + c * st[ax]];
            }
            *out = acc / norm;
        }
        cur = next;
    }
    cur
}

/// Clean Gaussian blobs plus Gaussian noise. Returns `(noisy, clean)`.
pub fn gen_denoise(spec: &PhantomSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = rng_for(spec);
    let clean = random_blobs(&mut rng, spec, false, (0.5, 1.0));
    let noisy = add_noise(&mut rng, &clean, spec.noise_sigma);
    Ok((to_tensor(&spec.shape, &noisy)?, to_tensor(&spec.shape, &clean)?))
}

/// Blobs of full amplitude; the mask is where the clean field exceeds half
/// the amplitude. Returns `(noisy image, mask)`.
pub fn gen_semantic3d(spec: &PhantomSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = rng_for(spec);
    let clean = random_blobs(&mut rng, spec, false, (1.0, 1.0));
    let mask: Vec<f64> = clean
        .iter()
        .map(|&v| if v > 0.5 * spec.amplitude { 1.0 } else { 0.0 })
        .collect();
    let image = add_noise(&mut rng, &clean, spec.noise_sigma);
    Ok((to_tensor(&spec.shape, &image)?, to_tensor(&spec.shape, &mask)?))
}

/// Signed-blob texture as input; the target is a fixed band-pass filter of
/// the clean texture passed through `tanh`. Returns `(input, target)`.
pub fn gen_labelfree(spec: &PhantomSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = rng_for(spec);
    let texture = random_blobs(&mut rng, spec, true, (0.5, 1.0));
    let sp = spec.spatial();
    let narrow = gaussian_blur(&texture, sp, DOG_SIGMAS.0);
    let wide = gaussian_blur(&texture, sp, DOG_SIGMAS.1);
    let target: Vec<f64> = narrow
        .iter()
        .zip(&wide)
        .map(|(a, b)| (DOG_GAIN * (a - b) / spec.amplitude).tanh())
        .collect();
    let input = add_noise(&mut rng, &texture, spec.noise_sigma);
    Ok((to_tensor(&spec.shape, &input)?, to_tensor(&spec.shape, &target)?))
}

/// Non-overlapping ellipses (1-pixel gap) with distinct labels 1..=n.
/// Returns `(image, label map)`; the image is a smoothed intensity map plus
/// noise.
pub fn gen_instances2d(spec: &PhantomSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = rng_for(spec);
    let (h, w) = (spec.shape[2], spec.shape[3]);
    let wanted = rng.random_range(spec.count[0]..=spec.count[1]);
    let mut labels = vec![0i32; h * w];
    let mut placed = 0;
    let mut attempts = 0;
    while placed < wanted {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(DataError::PlacementFailure {
                wanted,
                placed,
                attempts,
            });
        }
        attempts += 1;
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let a = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let b = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        let inside = |y: isize, x: isize| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        };
        let reach = a.max(b).ceil() as isize + 1;
        let (y0, y1) = ((cy as isize - reach).max(0), (cy as isize + reach + 1).min(h as isize));
        let (x0, x1) = ((cx as isize - reach).max(0), (cx as isize + reach + 1).min(w as isize));
        let pixels: Vec<(isize, isize)> = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (y, x)))
            .filter(|&(y, x)| inside(y, x))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let clashes = pixels.iter().any(|&(y, x)| {
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && labels[yy as usize * w + xx as usize] != 0
                })
            })
        });
        if clashes {
            continue;
        }
        placed += 1;
        for (y, x) in pixels {
            labels[y as usize * w + x as usize] = placed as i32;
        }
    }
    let raw: Vec<f64> = labels
        .iter()
        .map(|&l| if l > 0 { spec.amplitude } else { 0.0 })
        .collect();
    let smooth = gaussian_blur(&raw, &[h, w], 1.0);
    let image = add_noise(&mut rng, &smooth, spec.noise_sigma);
    Ok((to_tensor(&spec.shape, &image)?, Tensor::from_i32(spec.shape.clone(), labels)?))
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let (input, target) = match spec.task {
        Task::Denoise3d => gen_denoise(spec)?,
        Task::Labelfree3d => gen_labelfree(spec)?,
        Task::Semantic3d => gen_semantic3d(spec)?,
        Task::Instance2d => gen_instances2d(spec)?,
    };
    Ok(Phantom { input, target })
}

/// `n` phantoms; sample `i` uses seed `spec.seed + i`.
pub fn generate_set(spec: &PhantomSpec, n: usize) -> Result<Vec<Phantom>> {
    (0..n)
        .map(|i| generate(&spec.clone().with_seed(spec.seed.wrapping_add(i as u64))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    spec: PhantomSpec,
    count: usize,
}

/// Writes `NNNN_input.ebt` / `NNNN_target.ebt` pairs plus `spec.json`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, phantoms: &[Phantom]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in phantoms.iter().enumerate() {
        p.input.write_ebt(dir.join(format!("{i:04}_input.ebt")))?;
        p.target.write_ebt(dir.join(format!("{i:04}_target.ebt")))?;
    }
    let sidecar = Sidecar {
        spec: spec.clone(),
        count: phantoms.len(),
    };
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(PhantomSpec, Vec<Phantom>)> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
    let mut out = Vec::with_capacity(sidecar.count);
    for i in 0..sidecar.count {
        let input = Tensor::read_ebt(dir.join(format!("{i:04}_input.ebt")))?;
        let target = Tensor::read_ebt(dir.join(format!("{i:04}_target.ebt")))?;
        if input.shape() != target.shape() {
            return Err(DataError::Dataset(format!("pair {i} has mismatched shapes")));
        }
        out.push(Phantom { input, target });
    }
    Ok((sidecar.spec, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn small(task: Task) -> PhantomSpec {
        let shape: &[usize] = if task == Task::Instance2d { &[1, 1, 64, 64] } else { &[1, 1, 12, 24, 24] };
        PhantomSpec::default_for(task).with_shape(shape)
    }

    #[test]
    fn denoise_examples() {
        let mut spec = small(Task::Denoise3d);
        spec.noise_sigma = 0.0;
        let (noisy, clean) = gen_denoise(&spec).unwrap();
        assert_eq!(noisy, clean);
        let spec = small(Task::Denoise3d).with_seed(4);
        assert_eq!(gen_denoise(&spec).unwrap(), gen_denoise(&spec).unwrap());
        assert_ne!(gen_denoise(&spec).unwrap(), gen_denoise(&spec.clone().with_seed(5)).unwrap());
    }

    #[test]
    fn denoise_noise_band_at_unit_snr() {
        for seed in 0..20 {
            let mut spec = PhantomSpec::default_for(Task::Denoise3d).with_seed(seed);
            spec.noise_sigma = spec.amplitude;
            let (noisy, clean) = gen_denoise(&spec).unwrap();
            let r = metrics::pearson(&noisy, &clean).unwrap();
            assert!((0.3..=0.9).contains(&r), "seed {seed}: {r}");
        }
    }

    #[test]
    fn instance_examples() {
        let mut spec = small(Task::Instance2d);
        spec.count = [3, 3];
        let (image, labels) = gen_instances2d(&spec).unwrap();
        assert_eq!(image.shape(), labels.shape());
        let mut ids: Vec<i32> = labels.as_i32().unwrap().iter().copied().filter(|&v| v > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(metrics::ap50(&labels, &labels).unwrap(), 1.0);
        // the 1-pixel gap keeps instances apart under 4-connectivity
        let cc = metrics::connected_components(&labels.cast_saturating(crate::tensor::DType::F32)).unwrap();
        assert_eq!(metrics::ap50(&cc, &labels).unwrap(), 1.0);
    }

    #[test]
    fn instance_placement_failure() {
        let mut spec = small(Task::Instance2d).with_shape(&[1, 1, 16, 16]);
        spec.count = [30, 30];
        assert!(matches!(gen_instances2d(&spec), Err(DataError::PlacementFailure { wanted: 30, .. })));
    }

    #[test]
    fn semantic_and_labelfree_examples() {
        let (_, mask) = gen_semantic3d(&small(Task::Semantic3d)).unwrap();
        assert!(mask.as_f32().unwrap().contains(&1.0));
        assert_eq!(metrics::dice(&mask, &mask, 0.5).unwrap(), 1.0);

        let (input, target) = gen_labelfree(&small(Task::Labelfree3d)).unwrap();
        assert_eq!(input.shape(), target.shape());
        assert!(target.as_f32().unwrap().iter().all(|v| v.abs() <= 1.0));
        assert!((metrics::pearson(&target, &target).unwrap() - 1.0).abs() < 1e-12);
        // 2-D variants work too
        assert!(gen_labelfree(&small(Task::Labelfree3d).with_shape(&[1, 1, 20, 20])).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(small(Task::Denoise3d).with_shape(&[1, 2, 8, 8]).validate().is_err());
        assert!(small(Task::Instance2d).with_shape(&[1, 1, 8, 8, 8]).validate().is_err());
        let mut s = small(Task::Denoise3d);
        s.count = [3, 1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(Task::Semantic3d);
        let set = generate_set(&spec, 3).unwrap();
        write_dataset(dir.path(), &spec, &set).unwrap();
        let (s2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(back, set);
        assert_ne!(set[0], set[1]);
    }
}
