//! Student and teacher encoders, projectors, MIM head, prototype bank and
//! the EMA machinery that ties the teacher to the student.

pub mod backbone;
pub mod params;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;

use crate::augment::PatchMask;
use crate::config::RunConfig;
use crate::dataio::Image;
use crate::error::{CmidError, Result};

pub use backbone::{Backbone, ConvBackbone};
pub use params::{Init, ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Fully connected layers with an activation between consecutive layers.
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(scope: &Scope, dims: &[usize], activation: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let s = scope.pp(&format!("fc{i}"));
                let init = Init::FanInUniform { fan_in: w[0] };
                Ok(Linear::new(
                    s.var("weight", &[w[1], w[0]], init)?,
                    Some(s.var("bias", &[w[1]], init)?),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => h.relu()?,
                    Activation::Gelu => h.gelu_erf()?,
                };
            }
        }
        Ok(h)
    }
}

/// Row-wise L2 normalization of a 2-D tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Spatial mean of a `B x C x H x W` map.
pub fn global_average_pool(map: &Tensor) -> Result<Tensor> {
    Ok(map.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// One encoder with its two projectors. The student and the teacher are two
/// instances with identical parameter names.
pub struct Encoder {
    pub backbone: Box<dyn Backbone>,
    pub global_proj: Mlp,
    pub local_proj: Mlp,
}

impl Encoder {
    pub fn new(scope: &Scope, cfg: &RunConfig) -> Result<Self> {
        let m = &cfg.model;
        let backbone = ConvBackbone::new(&scope.pp("backbone"), m, cfg.data.channels)?;
        let c = backbone.out_channels();
        Ok(Self {
            global_proj: Mlp::new(
                &scope.pp("global_proj"),
                &[c, m.global_hidden, m.global_dim],
                Activation::Relu,
            )?,
            local_proj: Mlp::new(
                &scope.pp("local_proj"),
                &[c, m.local_hidden, m.local_hidden, m.proto_dim],
                Activation::Gelu,
            )?,
            backbone: Box::new(backbone),
        })
    }

    /// GAP, projector, L2 normalization.
    pub fn project_global(&self, map: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.global_proj.forward(&global_average_pool(map)?)?)
    }

    /// Feature vectors at row-major cells (`indices[b]` for image `b`),
    /// projected and L2-normalized; rows are ordered image-major.
    pub fn project_local(&self, map: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
        let vectors = gather_cells(map, indices)?;
        l2_normalize(&self.local_proj.forward(&vectors)?)
    }
}

/// Selects feature vectors at row-major cell indices, one list per image.
pub fn gather_cells(map: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    if indices.len() != b {
        return Err(CmidError::Shape(format!(
            "{} index lists for a batch of {b}",
            indices.len()
        )));
    }
    let cells = h * w;
    let mut flat = Vec::new();
    for (img, list) in indices.iter().enumerate() {
        for &i in list {
            if i >= cells {
                return Err(CmidError::Parameter(format!(
                    "cell index {i} outside a {h}x{w} map"
                )));
            }
            flat.push((img * cells + i) as u32);
        }
    }
    let rows = map
        .flatten_from(2)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * cells, c))?;
    let idx = Tensor::from_vec(flat.clone(), flat.len(), map.device())?;
    Ok(rows.index_select(&idx, 0)?)
}

pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CmidError::Shape("empty image batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(CmidError::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

/// Patch masks as a `B x 1 x Gh x Gw` tensor of zeros and ones.
pub fn masks_to_tensor(masks: &[&PatchMask], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| CmidError::Shape("empty mask batch".into()))?;
    let (gh, gw) = (first.grid_h, first.grid_w);
    let mut data = Vec::with_capacity(masks.len() * gh * gw);
    for m in masks {
        if (m.grid_h, m.grid_w) != (gh, gw) {
            return Err(CmidError::Shape("masks in a batch differ in size".into()));
        }
        data.extend(m.cells.iter().map(|&x| if x { 1.0f32 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, gh, gw), device)?)
}

/// Teacher momentum under a cosine ramp from `m0` at step 0 to 1 at
/// `total_steps`.
pub fn ema_momentum(step: u64, total_steps: u64, m0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

pub struct ModelState {
    pub student_params: ParamStore,
    pub teacher_params: ParamStore,
    pub student: Encoder,
    pub teacher: Encoder,
    pub mask_token: Tensor,
    pub prototypes: Tensor,
    pub mim_head: backbone::Conv,
    patch_size: usize,
    channels: usize,
    device: Device,
}

impl ModelState {
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        let seed = cfg.train.seed;
        let student_params = ParamStore::new(seed, device.clone());
        let root = student_params.root();
        let student = Encoder::new(&root.pp("encoder"), cfg)?;
        let stem_channels = student.backbone.stem_channels();
        let out_channels = student.backbone.out_channels();
        let stride = student.backbone.total_stride();
        let mask_token = root.var("mask_token", &[stem_channels], Init::Const(0.0))?;
        let prototypes = root.var(
            "prototypes",
            &[cfg.model.num_prototypes, cfg.model.proto_dim],
            Init::Normal { std: 1.0 },
        )?;
        let mim_head = backbone::conv(
            &root.pp("mim_head"),
            out_channels,
            cfg.data.channels * stride * stride,
            1,
            1,
            0,
        )?;

        let teacher_params = ParamStore::new(seed.wrapping_add(1), device.clone());
        let teacher = Encoder::new(&teacher_params.root().pp("encoder"), cfg)?;
        let state = Self {
            student_params,
            teacher_params,
            student,
            teacher,
            mask_token,
            prototypes,
            mim_head,
            patch_size: cfg.mask.patch_size,
            channels: cfg.data.channels,
            device: device.clone(),
        };
        state.renormalize_prototypes()?;
        state.ema_update(0.0)?;
        Ok(state)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Stem, mask-token addition at masked stem cells, remaining stages.
    /// `patch_mask` is `B x 1 x Gh x Gw`; `None` means nothing is masked.
    pub fn encode_student(&self, masked: &Tensor, patch_mask: Option<&Tensor>) -> Result<Tensor> {
        let bb = &self.student.backbone;
        let stem = bb.stem(masked)?;
        let stem = match patch_mask {
            Some(mask) => {
                let (b, _, sh, sw) = stem.dims4()?;
                let (mb, _, gh, gw) = mask.dims4()?;
                if self.patch_size % bb.stem_stride() != 0 {
                    return Err(CmidError::Shape(
                        "patch size is not a multiple of the stem stride".into(),
                    ));
                }
                let factor = self.patch_size / bb.stem_stride();
                if mb != b || gh * factor != sh || gw * factor != sw {
                    return Err(CmidError::Shape(format!(
                        "mask grid {gh}x{gw} (x{factor}) does not cover stem grid {sh}x{sw}"
                    )));
                }
                let cells = mask.upsample_nearest2d(sh, sw)?.to_dtype(stem.dtype())?;
                let token = self
                    .mask_token
                    .to_dtype(stem.dtype())?
                    .reshape((1, bb.stem_channels(), 1, 1))?;
                stem.broadcast_add(&cells.broadcast_mul(&token)?)?
            }
            None => stem,
        };
        bb.trunk(&stem)
    }

    /// Teacher forward; the result carries no gradient path.
    pub fn encode_teacher(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.teacher.backbone.forward(images)?.detach())
    }

    /// 1x1 convolution then depth-to-space back to input resolution.
    pub fn reconstruct(&self, map: &Tensor) -> Result<Tensor> {
        let s = self.student.backbone.total_stride();
        let out = self.mim_head.forward(map)?;
        Ok(candle_nn::ops::pixel_shuffle(&out, s)?)
    }

    /// `teacher <- m * teacher + (1 - m) * student` over every teacher
    /// parameter (backbone and both projectors).
    pub fn ema_update(&self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(CmidError::Parameter(format!("EMA momentum {m} outside [0, 1]")));
        }
        for (name, teacher) in self.teacher_params.vars() {
            let student = self
                .student_params
                .get(&name)
                .ok_or_else(|| CmidError::Shape(format!("student lacks {name}")))?;
            if student.dims() != teacher.dims() {
                return Err(CmidError::Shape(format!("shape mismatch for {name}")));
            }
            let mixed = ((teacher.as_tensor() * m)? + (student.as_tensor() * (1.0 - m))?)?;
            teacher.set(&mixed.detach())?;
        }
        Ok(())
    }

    pub fn renormalize_prototypes(&self) -> Result<()> {
        let var = self
            .student_params
            .get("prototypes")
            .expect("prototypes are registered");
        let unit = l2_normalize(&var.as_tensor().detach())?;
        var.set(&unit)?;
        Ok(())
    }

    /// Student parameters that receive gradients and optimizer updates.
    pub fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        self.student_params.vars()
    }

    pub fn dtype(&self) -> DType {
        self.mask_token.dtype()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 32;
        cfg.mask.patch_size = 8;
        cfg.model.stage_strides = vec![1, 2];
        cfg.model.stage_widths = vec![8, 16];
        cfg.model.global_hidden = 16;
        cfg.model.global_dim = 8;
        cfg.model.local_hidden = 16;
        cfg.model.proto_dim = 8;
        cfg.model.num_prototypes = 10;
        cfg.local.num_matched_pairs = 4;
        cfg.global.queue_size = 64;
        cfg.train.batch_size = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn batch(dev: &Device) -> Tensor {
        Tensor::rand(0f32, 1f32, (2, 3, 32, 32), dev).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn empty_mask_matches_teacher_path() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let x = batch(&dev);
        let zeros = Tensor::zeros((2, 1, 4, 4), DType::F32, &dev).unwrap();
        let a = st.encode_student(&x, Some(&zeros)).unwrap();
        let b = st.encode_teacher(&x).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);
        assert_eq!(a.dims(), &[2, 16, 4, 4]);
    }

    #[test]
    fn zero_token_is_identity_and_block_replication() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let x = batch(&dev);
        let mut m = vec![0f32; 2 * 16];
        m[5] = 1.0;
        let mask = Tensor::from_vec(m, (2, 1, 4, 4), &dev).unwrap();
        let masked = st.encode_student(&x, Some(&mask)).unwrap();
        let plain = st.encode_student(&x, None).unwrap();
        assert_eq!(max_diff(&masked, &plain), 0.0);

        // patch 8 / stem 4 = 2: a single masked patch covers a 2x2 stem block.
        let up = mask.upsample_nearest2d(8, 8).unwrap();
        let v = up.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let hits: Vec<usize> = (0..64).filter(|&i| v[i] == 1.0).collect();
        assert_eq!(hits, vec![2 * 8 + 2, 2 * 8 + 3, 3 * 8 + 2, 3 * 8 + 3]);
    }

    #[test]
    fn mask_grid_mismatch_is_a_shape_error() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let mask = Tensor::zeros((2, 1, 3, 3), DType::F32, &dev).unwrap();
        assert!(matches!(
            st.encode_student(&batch(&dev), Some(&mask)),
            Err(CmidError::Shape(_))
        ));
    }

    #[test]
    fn projections_are_unit_norm() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let map = st.encode_teacher(&batch(&dev)).unwrap();
        let g = st.student.project_global(&map).unwrap();
        for n in g.sqr().unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap() {
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let l = st
            .student
            .project_local(&map, &[vec![0, 3, 3], vec![15, 1, 0]])
            .unwrap();
        let rows = l.to_vec2::<f32>().unwrap();
        assert_eq!(rows[1], rows[2]);
        for r in &rows {
            let n: f32 = r.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let perm = st
            .student
            .project_local(&map, &[vec![3, 0, 3], vec![1, 15, 0]])
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(perm[0], rows[1]);
        assert_eq!(perm[1], rows[0]);
        assert_eq!(perm[3], rows[4]);
        assert!(st.student.project_local(&map, &[vec![16], vec![0]]).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let dev = Device::Cpu;
        let map = Tensor::ones((1, 3, 4, 4), DType::F32, &dev).unwrap();
        let pooled = global_average_pool(&(map * 2.5).unwrap()).unwrap();
        assert_eq!(pooled.to_vec2::<f32>().unwrap(), vec![vec![2.5, 2.5, 2.5]]);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[0.3f32, -1.2, 2.0]], &dev).unwrap();
        let a = l2_normalize(&x).unwrap();
        let b = l2_normalize(&(x * 2.0).unwrap()).unwrap();
        assert!(max_diff(&a, &b) < 1e-7);
    }

    #[test]
    fn reconstruct_shapes_and_zero_map() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let map = st.encode_teacher(&batch(&dev)).unwrap();
        let x = st.reconstruct(&map).unwrap();
        assert_eq!(x.dims(), &[2, 3, 32, 32]);
        // Zero the bias: a zero map must then reconstruct to zero.
        let bias = st.student_params.get("mim_head.bias").unwrap();
        bias.set(&bias.zeros_like().unwrap()).unwrap();
        let zero = st.reconstruct(&map.zeros_like().unwrap()).unwrap();
        assert_eq!(zero.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn depth_to_space_layout() {
        // Channel c of a stride-s head lands on pixel (x = c mod s, y = c / s).
        let dev = Device::Cpu;
        let s = 4;
        let data: Vec<f32> = (0..s * s).map(|c| c as f32).collect();
        let map = Tensor::from_vec(data, (1, s * s, 1, 1), &dev).unwrap();
        let img = candle_nn::ops::pixel_shuffle(&map, s).unwrap();
        let px = img.reshape((s, s)).unwrap().to_vec2::<f32>().unwrap();
        for c in 0..s * s {
            assert_eq!(px[c / s][c % s], c as f32);
        }
    }

    #[test]
    fn ema_schedule_points() {
        assert!((ema_momentum(0, 1000, 0.996) - 0.996).abs() < 1e-12);
        assert!((ema_momentum(1000, 1000, 0.996) - 1.0).abs() < 1e-12);
        assert!((ema_momentum(500, 1000, 0.996) - 0.998).abs() < 1e-12);
    }

    #[test]
    fn ema_update_arithmetic() {
        let dev = Device::Cpu;
        let st = ModelState::new(&tiny_cfg(), &dev).unwrap();
        let name = "encoder.backbone.stem.bias";
        let t = st.teacher_params.get(name).unwrap();
        let s = st.student_params.get(name).unwrap();
        t.set(&t.zeros_like().unwrap()).unwrap();
        s.set(&s.ones_like().unwrap()).unwrap();
        st.ema_update(1.0).unwrap();
        assert!(t.to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        st.ema_update(0.9).unwrap();
        assert!(t.to_vec1::<f32>().unwrap().iter().all(|&v| (v - 0.1).abs() < 1e-7));
        st.ema_update(0.0).unwrap();
        assert!(t.to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
        assert!(st.ema_update(1.5).is_err());
        // Prototypes, mask token and MIM head are student-only.
        assert!(st.teacher_params.get("prototypes").is_none());
        assert!(st.teacher_params.get("mask_token").is_none());
        assert!(st.teacher_params.get("mim_head.weight").is_none());
    }

    #[test]
    fn prototypes_start_unit_norm() {
        let st = ModelState::new(&tiny_cfg(), &Device::Cpu).unwrap();
        for r in st.prototypes.to_vec2::<f32>().unwrap() {
            let n: f32 = r.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
