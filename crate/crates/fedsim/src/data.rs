//! Synthetic classification data, Dirichlet non-i.i.d. partitioning, and
//! trigger application.
//!
//! The dataset generator draws one template image per class and perturbs it
//! with seeded Gaussian noise, giving a separable desk-scale stand-in for the
//! image benchmarks. Partitioning draws one Dirichlet vector per class over
//! clients, the standard non-i.i.d. federated split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::seeds::{self, domain};
use crate::tensor::{resize_nearest_2d, Tensor};

/// Image-like dataset: `xs` is `[N, C, H, W]` with values in `[0, 1]`,
/// `ys` holds integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.xs.shape()[1..].to_vec()
    }

    /// Copy the selected samples into a new batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_shape().iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.xs.data()[i * per..(i + 1) * per]);
            ys.push(self.ys[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.sample_shape());
        (
            Tensor::from_vec(shape, data).expect("gather shape"),
            ys,
        )
    }
}

/// Disjoint assignment of dataset indices to clients.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub assignments: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }
}

/// Where the trigger patch sits on the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPlacement {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// A backdoor trigger: patch pattern, placement mask, and target label.
///
/// `pattern` is `[C, th, tw]`; `mask` is a binary `[H, W]` map whose nonzero
/// region is the `th x tw` rectangle the pattern is pasted into.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub pattern: Tensor,
    pub mask: Tensor,
    pub target_label: usize,
}

impl Trigger {
    /// Build a trigger with an all-ones pattern at the given placement.
    pub fn solid(
        channels: usize,
        patch_h: usize,
        patch_w: usize,
        img_h: usize,
        img_w: usize,
        placement: TriggerPlacement,
        target_label: usize,
    ) -> Result<Self> {
        if patch_h > img_h || patch_w > img_w {
            return Err(Error::Config(format!(
                "trigger patch {patch_h}x{patch_w} exceeds image {img_h}x{img_w}"
            )));
        }
        let (y0, x0) = match placement {
            TriggerPlacement::TopLeft => (0, 0),
            TriggerPlacement::TopRight => (0, img_w - patch_w),
            TriggerPlacement::BottomLeft => (img_h - patch_h, 0),
            TriggerPlacement::BottomRight => (img_h - patch_h, img_w - patch_w),
        };
        let mut mask = Tensor::zeros(vec![img_h, img_w]);
        for y in 0..patch_h {
            for x in 0..patch_w {
                mask.data_mut()[(y0 + y) * img_w + (x0 + x)] = 1.0;
            }
        }
        Ok(Trigger {
            pattern: Tensor::full(vec![channels, patch_h, patch_w], 1.0),
            mask,
            target_label,
        })
    }

    /// Top-left corner `(y0, x0)` of the mask's nonzero bounding box.
    pub fn mask_origin(&self) -> (usize, usize) {
        let (h, w) = (self.mask.shape()[0], self.mask.shape()[1]);
        let mut y0 = h;
        let mut x0 = w;
        for y in 0..h {
            for x in 0..w {
                if self.mask.data()[y * w + x] != 0.0 {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                }
            }
        }
        (y0, x0)
    }

    /// Elementwise average of several triggers' patterns (shared mask/target).
    pub fn average_patterns(triggers: &[&Trigger]) -> Option<Trigger> {
        let first = *triggers.first()?;
        let mut acc = Tensor::zeros(first.pattern.shape().to_vec());
        for t in triggers {
            acc.add_scaled(&t.pattern, 1.0).ok()?;
        }
        let scale = 1.0 / triggers.len() as f64;
        Some(Trigger {
            pattern: acc.map(|v| v * scale),
            mask: first.mask.clone(),
            target_label: first.target_label,
        })
    }
}

/// Generate the seeded blobs dataset: one random template per class plus
/// Gaussian pixel noise, clamped to `[0, 1]`.
pub fn gen_blobs_dataset(
    num_classes: usize,
    samples_per_class: usize,
    img_dims: (usize, usize, usize),
    noise_sd: f64,
    seed: u64,
    split_tag: u64,
) -> Dataset {
    let (c, h, w) = img_dims;
    let per = c * h * w;
    let mut templates = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        // Template stream depends only on (seed, class), not on the split, so
        // train/test/server splits of one run share class geometry.
        let mut trng = seeds::stream(seed, &[domain::DATA_TEMPLATE, class as u64]);
        let template: Vec<f64> = (0..per).map(|_| trng.gen_range(0.0..1.0)).collect();
        templates.push(template);
    }
    let mut data = Vec::with_capacity(num_classes * samples_per_class * per);
    let mut ys = Vec::with_capacity(num_classes * samples_per_class);
    let normal = Normal::new(0.0, noise_sd.max(0.0)).expect("valid noise sd");
    for class in 0..num_classes {
        let mut nrng = seeds::stream(seed, &[domain::DATA_NOISE, split_tag, class as u64]);
        for _ in 0..samples_per_class {
            for &t in &templates[class] {
                let noise = if noise_sd > 0.0 {
                    normal.sample(&mut nrng)
                } else {
                    0.0
                };
                data.push((t + noise).clamp(0.0, 1.0));
            }
            ys.push(class);
        }
    }
    Dataset {
        xs: Tensor::from_vec(vec![num_classes * samples_per_class, c, h, w], data)
            .expect("dataset shape"),
        ys,
        num_classes,
    }
}

/// Partition a dataset across clients with per-class Dirichlet proportions.
///
/// For each class, proportions over clients are drawn from `Dirichlet(h * 1)`
/// (sampled as normalized Gamma draws); the class's shuffled indices are cut
/// at the cumulative proportions. Empty clients are repaired by moving one
/// sample from the currently largest client.
pub fn dirichlet_partition(
    ds: &Dataset,
    num_clients: usize,
    h: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if h <= 0.0 {
        return Err(Error::Config("dirichlet concentration h must be > 0".into()));
    }
    if ds.len() < num_clients {
        return Err(Error::Config(format!(
            "dataset of {} samples cannot cover {} clients",
            ds.len(),
            num_clients
        )));
    }
    let mut rng = seeds::stream(seed, &[domain::PARTITION]);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.ys.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(h, 1.0).expect("valid gamma shape");
    for indices in by_class.iter_mut() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let mut total: f64 = draws.iter().sum();
        if total == 0.0 {
            // Degenerate draw (possible for tiny h); fall back to uniform.
            draws = vec![1.0; num_clients];
            total = num_clients as f64;
        }
        let n = indices.len();
        let mut cut_prev = 0usize;
        let mut cum = 0.0;
        for (client, &d) in draws.iter().enumerate() {
            cum += d / total;
            let cut = if client + 1 == num_clients {
                n
            } else {
                (cum * n as f64).round() as usize
            }
            .min(n);
            assignments[client].extend_from_slice(&indices[cut_prev..cut.max(cut_prev)]);
            cut_prev = cut.max(cut_prev);
        }
    }

    // Repair rule: donate one sample from the largest client to each empty one.
    loop {
        let Some(empty) = assignments.iter().position(|a| a.is_empty()) else {
            break;
        };
        let largest = (0..num_clients)
            .max_by_key(|&i| assignments[i].len())
            .expect("at least one client");
        if assignments[largest].len() <= 1 {
            return Err(Error::Config(
                "cannot repair empty clients: not enough samples".into(),
            ));
        }
        let moved = assignments[largest].pop().expect("largest client non-empty");
        assignments[empty].push(moved);
    }

    Ok(ClientPartition { assignments })
}

/// Paste the trigger onto one image or a whole batch:
/// `x' = (1 - m) * x + m * pattern` at the mask's bounding box.
pub fn apply_trigger(x: &Tensor, trig: &Trigger) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (batched, c, h, w) = match shape.len() {
        3 => (false, shape[0], shape[1], shape[2]),
        4 => (true, shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "apply_trigger input",
                expected: vec![3, 4],
                got: vec![shape.len()],
            })
        }
    };
    if trig.mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            context: "apply_trigger mask",
            expected: vec![h, w],
            got: trig.mask.shape().to_vec(),
        });
    }
    let pshape = trig.pattern.shape();
    if pshape[0] != c {
        return Err(Error::ShapeMismatch {
            context: "apply_trigger pattern channels",
            expected: vec![c],
            got: vec![pshape[0]],
        });
    }
    let (th, tw) = (pshape[1], pshape[2]);
    let (y0, x0) = trig.mask_origin();
    if y0 >= h || x0 >= w {
        // All-zero mask: nothing to paste.
        return Ok(x.clone());
    }
    let batch = if batched { shape[0] } else { 1 };
    let mut out = x.clone();
    let data = out.data_mut();
    let per = c * h * w;
    for s in 0..batch {
        for ch in 0..c {
            for ty in 0..th {
                for tx in 0..tw {
                    let (iy, ix) = (y0 + ty, x0 + tx);
                    if trig.mask.data()[iy * w + ix] != 0.0 {
                        data[s * per + ch * h * w + iy * w + ix] =
                            trig.pattern.data()[ch * th * tw + ty * tw + tx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize of a trigger pattern to `(target_h, target_w)`,
/// per channel. This is how the pattern is stretched onto the first
/// convolution kernel's spatial dims before sign extraction.
pub fn resize_trigger(pattern: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    let c = pattern.shape()[0];
    let (sh, sw) = (pattern.shape()[1], pattern.shape()[2]);
    let mut out = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        let src = &pattern.data()[ch * sh * sw..(ch + 1) * sh * sw];
        out.extend(resize_nearest_2d(src, sh, sw, target_h, target_w));
    }
    Tensor::from_vec(vec![c, target_h, target_w], out).expect("resize shape")
}
