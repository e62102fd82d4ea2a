//! Two-view generation: a geometrically recorded random-resized crop for each
//! view, the teacher's photometric recipe and the student's patch mask.

pub mod photometric;

use rand::seq::index;
use rand::Rng;

use crate::config::{MaskStrategy, RunConfig, ScaleMode};
use crate::dataio::Image;
use crate::error::{CmidError, Result};
use crate::geometry::overlap_area;

pub use photometric::PhotometricRecipe;

const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;
const OVERLAP_ATTEMPTS: usize = 100;

/// Provenance of a random-resized crop in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRecord {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub hflip: bool,
    pub out_size: usize,
}

impl CropRecord {
    pub fn full(width: usize, height: usize, out_size: usize) -> Self {
        Self {
            left: 0.0,
            top: 0.0,
            width: width as f64,
            height: height as f64,
            hflip: false,
            out_size,
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn fits(&self, orig_w: usize, orig_h: usize) -> bool {
        self.left >= 0.0
            && self.top >= 0.0
            && self.width > 0.0
            && self.height > 0.0
            && self.left + self.width <= orig_w as f64 + 1e-9
            && self.top + self.height <= orig_h as f64 + 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSampler {
    pub scale_min: f64,
    pub scale_max: f64,
    pub mode: ScaleMode,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub flip_prob: f64,
}

impl CropSampler {
    pub fn new(scale_min: f64, scale_max: f64) -> Self {
        Self {
            scale_min,
            scale_max,
            mode: ScaleMode::Area,
            aspect_min: ASPECT_RANGE.0,
            aspect_max: ASPECT_RANGE.1,
            flip_prob: 0.5,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            mode: cfg.augment.scale_mode,
            ..Self::new(cfg.augment.scale_min, cfg.augment.scale_max)
        }
    }

    pub fn sample(
        &self,
        rng: &mut impl Rng,
        orig_w: usize,
        orig_h: usize,
        out_size: usize,
    ) -> CropRecord {
        let (ow, oh) = (orig_w as f64, orig_h as f64);
        let area = ow * oh;
        let mut chosen = None;
        for _ in 0..CROP_ATTEMPTS {
            let s = uniform(rng, self.scale_min, self.scale_max);
            let frac = match self.mode {
                ScaleMode::Area => s,
                ScaleMode::Side => s * s,
            };
            let ratio = uniform(rng, self.aspect_min.ln(), self.aspect_max.ln()).exp();
            let w = (area * frac * ratio).sqrt();
            let h = (area * frac / ratio).sqrt();
            if w <= ow && h <= oh {
                let left = uniform(rng, 0.0, ow - w);
                let top = uniform(rng, 0.0, oh - h);
                chosen = Some((left, top, w, h));
                break;
            }
        }
        let (left, top, width, height) = chosen.unwrap_or_else(|| {
            // Center crop at the closest admissible aspect ratio.
            let in_ratio = ow / oh;
            let (w, h) = if in_ratio < self.aspect_min {
                (ow, ow / self.aspect_min)
            } else if in_ratio > self.aspect_max {
                (oh * self.aspect_max, oh)
            } else {
                (ow, oh)
            };
            ((ow - w) / 2.0, (oh - h) / 2.0, w, h)
        });
        CropRecord {
            left,
            top,
            width,
            height,
            hflip: rng.gen_bool(self.flip_prob),
            out_size,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random-resized crop with default aspect range and flip probability.
pub fn sample_crop(
    rng: &mut impl Rng,
    orig_size: (usize, usize),
    scale_min: f64,
    scale_max: f64,
    out_size: usize,
) -> CropRecord {
    CropSampler::new(scale_min, scale_max).sample(rng, orig_size.0, orig_size.1, out_size)
}

/// Resamples the crop rectangle to `out_size x out_size` with bilinear
/// interpolation; output pixel centers map affinely onto the rectangle.
pub fn resample_crop(img: &Image, crop: &CropRecord) -> Image {
    let n = crop.out_size;
    let mut out = Image::filled(img.channels, n, n, 0.0);
    let sx = crop.width / n as f64;
    let sy = crop.height / n as f64;
    let (w, h) = (img.width as isize, img.height as isize);
    for oy in 0..n {
        let py = crop.top + (oy as f64 + 0.5) * sy - 0.5;
        let y0 = py.floor();
        let fy = (py - y0) as f32;
        let ya = (y0 as isize).clamp(0, h - 1) as usize;
        let yb = (y0 as isize + 1).clamp(0, h - 1) as usize;
        for ox in 0..n {
            let col = if crop.hflip { n - 1 - ox } else { ox };
            let px = crop.left + (col as f64 + 0.5) * sx - 0.5;
            let x0 = px.floor();
            let fx = (px - x0) as f32;
            let xa = (x0 as isize).clamp(0, w - 1) as usize;
            let xb = (x0 as isize + 1).clamp(0, w - 1) as usize;
            for c in 0..img.channels {
                let top = img.get(c, ya, xa) * (1.0 - fx) + img.get(c, ya, xb) * fx;
                let bottom = img.get(c, yb, xa) * (1.0 - fx) + img.get(c, yb, xb) * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Patch-level mask; `true` marks a masked patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cells: Vec<bool>,
    pub patch_size: usize,
}

impl PatchMask {
    pub fn empty(grid_h: usize, grid_w: usize, patch_size: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            cells: vec![false; grid_h * grid_w],
            patch_size,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn ratio(&self) -> f64 {
        self.masked_count() as f64 / self.cells.len() as f64
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid_w + col]
    }

    /// Mask replicated onto a grid `factor` times finer, row-major.
    pub fn upsample(&self, factor: usize) -> Vec<f32> {
        let (h, w) = (self.grid_h * factor, self.grid_w * factor);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if self.is_masked(y / factor, x / factor) {
                    out[y * w + x] = 1.0;
                }
            }
        }
        out
    }

    /// Per-pixel mask at full view resolution.
    pub fn pixel_mask(&self) -> Vec<f32> {
        self.upsample(self.patch_size)
    }
}

/// Number of masked cells for `ratio` on a grid of `cells` (round to nearest).
pub fn mask_count(cells: usize, ratio: f64) -> usize {
    ((ratio * cells as f64).round() as usize).min(cells)
}

pub fn generate_mask(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    patch_size: usize,
    rng: &mut impl Rng,
) -> PatchMask {
    let total = grid_h * grid_w;
    let mut mask = PatchMask::empty(grid_h, grid_w, patch_size);
    for i in index::sample(rng, total, mask_count(total, ratio)) {
        mask.cells[i] = true;
    }
    mask
}

fn check_mask_dims(view: &Image, mask: &PatchMask) -> Result<()> {
    if view.height != mask.grid_h * mask.patch_size || view.width != mask.grid_w * mask.patch_size
    {
        return Err(CmidError::Shape(format!(
            "view {}x{} does not match mask grid {}x{} of patch {}",
            view.height, view.width, mask.grid_h, mask.grid_w, mask.patch_size
        )));
    }
    Ok(())
}

/// Per-channel mean over the whole view.
pub fn channel_means(view: &Image) -> Vec<f32> {
    (0..view.channels)
        .map(|c| {
            let plane = view.plane(c);
            (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32
        })
        .collect()
}

/// Sets every pixel of every masked patch to `fill[c]`.
pub fn fill_masked(view: &Image, mask: &PatchMask, fill: &[f32]) -> Result<Image> {
    check_mask_dims(view, mask)?;
    let mut out = view.clone();
    let pixel_mask = mask.pixel_mask();
    for (c, &value) in fill.iter().enumerate().take(view.channels) {
        for (p, &m) in out.plane_mut(c).iter_mut().zip(&pixel_mask) {
            if m > 0.0 {
                *p = value;
            }
        }
    }
    Ok(out)
}

/// Replaces masked patches with the per-channel mean of the whole view.
pub fn apply_mean_fill(view: &Image, mask: &PatchMask) -> Result<Image> {
    fill_masked(view, mask, &channel_means(view))
}

pub fn apply_zero_fill(view: &Image, mask: &PatchMask) -> Result<Image> {
    fill_masked(view, mask, &vec![0.0; view.channels])
}

pub fn apply_mask(view: &Image, mask: &PatchMask, strategy: MaskStrategy) -> Result<Image> {
    match strategy {
        MaskStrategy::MeanAdd => apply_mean_fill(view, mask),
        MaskStrategy::ZeroReplace => apply_zero_fill(view, mask),
    }
}

#[derive(Debug, Clone)]
pub struct StudentView {
    /// Masked network input.
    pub pixels: Image,
    /// The same crop before masking; the reconstruction target.
    pub target: Image,
    pub crop: CropRecord,
    pub mask: PatchMask,
}

#[derive(Debug, Clone)]
pub struct TeacherView {
    pub pixels: Image,
    pub crop: CropRecord,
}

#[derive(Debug, Clone)]
pub struct ViewPair {
    pub student: StudentView,
    pub teacher: TeacherView,
    pub source_id: String,
}

/// Builds the masked student view and the photometrically augmented teacher
/// view of one image. Crops are redrawn until their rectangles overlap.
pub fn make_views(
    image: &Image,
    source_id: &str,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    let out = cfg.data.image_size;
    let sampler = CropSampler::from_config(cfg);
    let (w, h) = (image.width, image.height);
    let mut crops = (sampler.sample(rng, w, h, out), sampler.sample(rng, w, h, out));
    let mut attempts = 1;
    while overlap_area(&crops.0, &crops.1) <= 0.0 {
        if attempts >= OVERLAP_ATTEMPTS {
            // Degenerate scale settings: reuse the student rectangle.
            crops.1 = CropRecord {
                hflip: crops.1.hflip,
                ..crops.0
            };
            break;
        }
        crops = (sampler.sample(rng, w, h, out), sampler.sample(rng, w, h, out));
        attempts += 1;
    }
    let (student_crop, teacher_crop) = crops;
    let recipe = PhotometricRecipe::moco_v2(cfg.augment.photometric_strength);

    let mut teacher = resample_crop(image, &teacher_crop);
    recipe.apply(&mut teacher, rng);

    let mut target = resample_crop(image, &student_crop);
    if cfg.augment.student_photometric {
        recipe.apply(&mut target, rng);
    }
    let grid = cfg.patch_grid();
    let mask = generate_mask(grid, grid, cfg.mask.mask_ratio, cfg.mask.patch_size, rng);
    let pixels = apply_mask(&target, &mask, cfg.mask.mask_strategy)?;
    Ok(ViewPair {
        student: StudentView {
            pixels,
            target,
            crop: student_crop,
            mask,
        },
        teacher: TeacherView {
            pixels: teacher,
            crop: teacher_crop,
        },
        source_id: source_id.to_string(),
    })
}
