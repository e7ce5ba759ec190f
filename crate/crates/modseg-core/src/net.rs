//! Single-modality parallel segmentation network with dynamic fusion.
//!
//! Each modality volume passes through its own convolutional stem f_i and
//! then through one shared residual U-Net backbone T(·;θ), producing a
//! per-modality prediction h_i = T(f_i(x_i);θ) and a bottleneck feature d_i.
//! A dynamic-combination step fuses the branches that are actually present:
//! the fused prediction is the mean of the available h_i and the subset
//! feature the mean of the available d_i. Absent branches are never
//! evaluated, so inference cost scales with the number of present modalities.

use crate::error::{Error, Result};
use crate::field::ProbabilityField;
use crate::loss::LatentFeature;
use crate::nn::{
    softmax_channels, softmax_channels_backward, upsample2, upsample2_backward, Conv3d, Param,
    ParamFn, ResBlock, ResBlockCache,
};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis};

/// View a 3D volume as a single-channel 4D block.
fn as_single_channel<T: Scalar>(x: &Array3<T>) -> Array4<T> {
    let (d, h, w) = x.dim();
    x.view()
        .into_shape_with_order((1, d, h, w))
        .expect("contiguous volume")
        .to_owned()
}
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// One modality's scalar 3D intensity volume.
pub type ModalityVolume<T> = Array3<T>;

/// Shape and width of the parallel network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_modalities: usize,
    pub n_classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub norm_groups: usize,
    pub patch_shape: (usize, usize, usize),
}

impl Default for NetworkConfig {
    /// Desk-scale default: 4 modalities, 4 classes, 2 levels, 8 channels.
    fn default() -> Self {
        Self {
            n_modalities: 4,
            n_classes: 4,
            levels: 2,
            base_channels: 8,
            norm_groups: 4,
            patch_shape: (32, 32, 32),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modalities < 1 {
            return Err(Error::Config("n_modalities must be ≥ 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be ≥ 2".into()));
        }
        if self.levels < 1 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        if self.base_channels < 1 || self.norm_groups < 1 {
            return Err(Error::Config("channel and group counts must be ≥ 1".into()));
        }
        if self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by norm_groups {}",
                self.base_channels, self.norm_groups
            )));
        }
        let div = 1usize << (self.levels - 1);
        let (d, h, w) = self.patch_shape;
        if d == 0 || h == 0 || w == 0 || d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "patch shape {:?} must be divisible by 2^(levels−1) = {div}",
                self.patch_shape
            )));
        }
        Ok(())
    }

    /// Channels at pyramid level `l` (0 = full resolution).
    pub fn channels_at(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Channel count of the bottleneck feature d_i.
    pub fn deep_channels(&self) -> usize {
        self.channels_at(self.levels - 1)
    }
}

/// Non-empty subset of the N modalities, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySubset {
    bits: u32,
    n: u8,
}

impl ModalitySubset {
    pub fn from_indices(indices: &[usize], n_modalities: usize) -> Result<Self> {
        if n_modalities == 0 || n_modalities > 32 {
            return Err(Error::Config(format!(
                "modality count {n_modalities} out of range"
            )));
        }
        if indices.is_empty() {
            return Err(Error::DegenerateInput("empty modality subset".into()));
        }
        let mut bits = 0u32;
        for &i in indices {
            if i >= n_modalities {
                return Err(Error::Config(format!(
                    "modality index {i} out of range for {n_modalities}"
                )));
            }
            bits |= 1 << i;
        }
        Ok(Self {
            bits,
            n: n_modalities as u8,
        })
    }

    pub fn full(n_modalities: usize) -> Self {
        Self::from_indices(&(0..n_modalities).collect::<Vec<_>>(), n_modalities)
            .expect("full subset is valid")
    }

    pub fn single(i: usize, n_modalities: usize) -> Result<Self> {
        Self::from_indices(&[i], n_modalities)
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n as usize && self.bits & (1 << i) != 0
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.n as usize
    }

    pub fn n_modalities(&self) -> usize {
        self.n as usize
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.n as usize).filter(|i| self.contains(*i)).collect()
    }

    /// Report label built from per-modality names, e.g. `t1c+flair`.
    pub fn label(&self, names: &[String]) -> String {
        self.indices()
            .iter()
            .map(|&i| names.get(i).cloned().unwrap_or_else(|| format!("m{i}")))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl std::fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{{{}}}",
            self.indices()
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

/// All 2^n − 1 non-empty subsets, ordered by decreasing size and
/// lexicographically (by index tuple) within each size.
pub fn enumerate_subsets(n: usize) -> Result<Vec<ModalitySubset>> {
    if n == 0 {
        return Err(Error::Config("need at least one modality".into()));
    }
    if n > 24 {
        return Err(Error::Config(format!("{n} modalities is not a desk-scale run")));
    }
    let mut out = Vec::with_capacity((1usize << n) - 1);
    for size in (1..=n).rev() {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            out.push(ModalitySubset::from_indices(&combo, n)?);
            // Next index combination in lexicographic order.
            let mut i = size as isize - 1;
            while i >= 0 && combo[i as usize] == i as usize + n - size {
                i -= 1;
            }
            if i < 0 {
                break;
            }
            let i = i as usize;
            combo[i] += 1;
            for j in i + 1..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

/// Elementwise mean of latent features keyed by modality index. Iteration is
/// in ascending key order, so the result is independent of insertion order.
pub fn fuse_features<T: Scalar>(
    feats: &BTreeMap<usize, LatentFeature<T>>,
) -> Result<LatentFeature<T>> {
    if feats.is_empty() {
        return Err(Error::DegenerateInput("cannot fuse an empty feature set".into()));
    }
    let mut iter = feats.values();
    let first = iter.next().unwrap();
    let mut acc = first.values().clone();
    for f in iter {
        if f.values().dim() != acc.dim() {
            return Err(Error::Dimension(format!(
                "feature shapes {:?} vs {:?}",
                f.values().dim(),
                acc.dim()
            )));
        }
        acc += f.values();
    }
    acc.mapv_inplace(|v| v / T::c(feats.len() as f64));
    Ok(LatentFeature::new(acc)?)
}

/// Elementwise mean of probability fields keyed by modality index; a convex
/// combination of simplex points, so the result is again a valid field.
pub fn fuse_predictions<T: Scalar>(
    preds: &BTreeMap<usize, ProbabilityField<T>>,
) -> Result<ProbabilityField<T>> {
    if preds.is_empty() {
        return Err(Error::DegenerateInput("cannot fuse an empty prediction set".into()));
    }
    let mut iter = preds.values();
    let first = iter.next().unwrap();
    let mut acc = first.values().clone();
    for p in iter {
        if p.values().dim() != acc.dim() {
            return Err(Error::Dimension(format!(
                "prediction shapes {:?} vs {:?}",
                p.values().dim(),
                acc.dim()
            )));
        }
        acc += p.values();
    }
    acc.mapv_inplace(|v| v / T::c(preds.len() as f64));
    Ok(ProbabilityField::from_normalized(acc))
}

/// Everything one forward pass over a case produces.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<T: Scalar> {
    /// h_i for each modality in the subset.
    pub per_modality_preds: BTreeMap<usize, ProbabilityField<T>>,
    /// d_i for each modality that was evaluated (subset, plus all modalities
    /// when the full-modality teacher feature was requested).
    pub per_modality_deep: BTreeMap<usize, LatentFeature<T>>,
    /// Mean of the subset's h_i.
    pub fused_pred: ProbabilityField<T>,
    /// Mean of all N d_i; present only when requested.
    pub full_deep: Option<LatentFeature<T>>,
    /// Mean of the subset's d_i.
    pub subset_deep: LatentFeature<T>,
}

/// Shared residual U-Net backbone: per level one residual block, strided
/// convolutions down, nearest-neighbour upsampling + convolution up, skip
/// concatenation, and a 1×1×1 softmax head.
#[derive(Debug, Clone)]
pub(crate) struct Backbone<T: Scalar> {
    enc: Vec<ResBlock<T>>,
    down: Vec<Conv3d<T>>,
    up: Vec<Conv3d<T>>,
    dec: Vec<ResBlock<T>>,
    head: Conv3d<T>,
    levels: usize,
}

pub(crate) struct EncoderPass<T: Scalar> {
    enc_caches: Vec<ResBlockCache<T>>,
}

pub(crate) struct DecoderPass<T: Scalar> {
    up_inputs: Vec<Array4<T>>,
    dec_caches: Vec<ResBlockCache<T>>,
    pred: Array4<T>,
}

pub(crate) struct BackbonePass<T: Scalar> {
    pub(crate) enc: EncoderPass<T>,
    pub(crate) dec: Option<DecoderPass<T>>,
}

impl<T: Scalar> BackbonePass<T> {
    pub(crate) fn deep(&self) -> &Array4<T> {
        self.enc.enc_caches.last().expect("≥1 level").output()
    }

    pub(crate) fn pred(&self) -> Option<&Array4<T>> {
        self.dec.as_ref().map(|d| &d.pred)
    }
}

impl<T: Scalar> Backbone<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let l = cfg.levels;
        let g = cfg.norm_groups;
        let mut enc = Vec::with_capacity(l);
        let mut down = Vec::with_capacity(l.saturating_sub(1));
        for level in 0..l {
            let ch = cfg.channels_at(level);
            enc.push(ResBlock::new(ch, ch, g, rng));
            if level + 1 < l {
                down.push(Conv3d::new(ch, cfg.channels_at(level + 1), 3, 2, 1, rng));
            }
        }
        let mut up = Vec::with_capacity(l.saturating_sub(1));
        let mut dec = Vec::with_capacity(l.saturating_sub(1));
        for level in 0..l.saturating_sub(1) {
            let ch = cfg.channels_at(level);
            up.push(Conv3d::new(cfg.channels_at(level + 1), ch, 3, 1, 1, rng));
            dec.push(ResBlock::new(2 * ch, ch, g, rng));
        }
        let head = Conv3d::new(cfg.base_channels, cfg.n_classes, 1, 1, 0, rng);
        Self {
            enc,
            down,
            up,
            dec,
            head,
            levels: l,
        }
    }

    fn encode(&self, x: &Array4<T>) -> EncoderPass<T> {
        let mut enc_caches = Vec::with_capacity(self.levels);
        let (e0, c0) = self.enc[0].forward(x);
        enc_caches.push(c0);
        let mut cur = e0;
        for level in 1..self.levels {
            let d = self.down[level - 1].forward(&cur);
            let (e, c) = self.enc[level].forward(&d);
            enc_caches.push(c);
            cur = e;
        }
        EncoderPass { enc_caches }
    }

    fn decode(&self, enc: &EncoderPass<T>) -> DecoderPass<T> {
        let n_dec = self.levels - 1;
        let mut up_inputs = Vec::with_capacity(n_dec);
        let mut dec_caches = Vec::with_capacity(n_dec);
        let mut cur = enc.enc_caches[self.levels - 1].output().clone();
        for level in (0..n_dec).rev() {
            let up_in = upsample2(&cur);
            let up_out = self.up[level].forward(&up_in);
            let skip = enc.enc_caches[level].output();
            let cat = ndarray::concatenate(Axis(0), &[skip.view(), up_out.view()])
                .expect("skip/up shapes align")
                .as_standard_layout()
                .to_owned();
            let (next, cache) = self.dec[level].forward(&cat);
            up_inputs.push(up_in);
            dec_caches.push(cache);
            cur = next;
        }
        // Stored in decode order (deepest target level first); reverse so
        // index ≡ level.
        up_inputs.reverse();
        dec_caches.reverse();
        let logits = self.head.forward(&cur);
        let pred = softmax_channels(&logits);
        DecoderPass {
            up_inputs,
            dec_caches,
            pred,
        }
    }

    fn forward(&self, x: &Array4<T>, with_decoder: bool) -> BackbonePass<T> {
        let enc = self.encode(x);
        let dec = with_decoder.then(|| self.decode(&enc));
        BackbonePass { enc, dec }
    }

    /// Backward through decoder and encoder. `gpred` is the gradient w.r.t.
    /// the softmax output; `gdeep_extra` is an extra gradient injected at the
    /// bottleneck (the feature-transfer path). Returns the gradient w.r.t.
    /// the backbone input.
    fn backward(
        &mut self,
        cache: &BackbonePass<T>,
        gpred: Option<&Array4<T>>,
        gdeep_extra: Option<&Array4<T>>,
    ) -> Array4<T> {
        let n_dec = self.levels - 1;
        // Per-level gradient buffers for encoder outputs.
        let mut genc: Vec<Option<Array4<T>>> = vec![None; self.levels];

        if let Some(gpred) = gpred {
            let dec = cache.dec.as_ref().expect("decoder cache for pred gradient");
            let glogits = softmax_channels_backward(&dec.pred, gpred);
            let head_in = if n_dec > 0 {
                dec.dec_caches[0].output()
            } else {
                cache.enc.enc_caches[0].output()
            };
            let mut gcur = self.head.backward(head_in, &glogits);
            for level in 0..n_dec {
                let gcat = self.dec[level].backward(&dec.dec_caches[level], &gcur);
                let skip_ch = self.up[level].out_channels();
                let gskip = gcat.slice(ndarray::s![0..skip_ch, .., .., ..]).to_owned();
                let gup_out = gcat
                    .slice(ndarray::s![skip_ch.., .., .., ..])
                    .as_standard_layout()
                    .to_owned();
                genc[level] = Some(gskip);
                let gup_in = self.up[level].backward(&dec.up_inputs[level], &gup_out);
                gcur = upsample2_backward(&gup_in);
            }
            genc[self.levels - 1] = Some(gcur);
        }

        // Inject the bottleneck gradient.
        if let Some(extra) = gdeep_extra {
            match &mut genc[self.levels - 1] {
                Some(g) => *g += extra,
                slot @ None => *slot = Some(extra.clone()),
            }
        }

        // Encoder backward, deepest level first. The down-conv at level l
        // consumed the level-(l−1) block output.
        let mut gflow = genc[self.levels - 1]
            .take()
            .expect("some gradient reaches the bottleneck");
        for level in (1..self.levels).rev() {
            let ge = self.enc[level].backward(&cache.enc.enc_caches[level], &gflow);
            let down_in = cache.enc.enc_caches[level - 1].output();
            let gdown_in = self.down[level - 1].backward(down_in, &ge);
            gflow = match genc[level - 1].take() {
                Some(mut g) => {
                    g += &gdown_in;
                    g
                }
                None => gdown_in,
            };
        }
        self.enc[0].backward(&cache.enc.enc_caches[0], &gflow)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.enc{i}"), f);
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            c.visit_params(&format!("{prefix}.down{i}"), f);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            c.visit_params(&format!("{prefix}.up{i}"), f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.dec{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

/// Training-time cache for one evaluated branch.
pub(crate) struct BranchPass<T: Scalar> {
    pub(crate) modality: usize,
    pub(crate) stem_in: Array4<T>,
    pub(crate) backbone: BackbonePass<T>,
}

/// The parallel network: one stem per modality plus the shared backbone.
#[derive(Debug)]
pub struct ModalityNet<T: Scalar> {
    cfg: NetworkConfig,
    stems: Vec<Conv3d<T>>,
    backbone: Backbone<T>,
    backbone_calls: AtomicU64,
}

impl<T: Scalar> ModalityNet<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stems = (0..cfg.n_modalities)
            .map(|_| Conv3d::new(1, cfg.base_channels, 3, 1, 1, &mut rng))
            .collect();
        let backbone = Backbone::new(&cfg, &mut rng);
        Ok(Self {
            cfg,
            stems,
            backbone,
            backbone_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Number of backbone invocations since the last reset. One branch
    /// evaluation counts once, whether or not its decoder ran.
    pub fn backbone_invocations(&self) -> u64 {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn reset_backbone_invocations(&self) {
        self.backbone_calls.store(0, Ordering::Relaxed);
    }

    fn check_volume(&self, x: &Array3<T>, i: usize) -> Result<()> {
        if i >= self.cfg.n_modalities {
            return Err(Error::Config(format!(
                "modality index {i} out of range for {}",
                self.cfg.n_modalities
            )));
        }
        if x.dim() != self.cfg.patch_shape {
            return Err(Error::Dimension(format!(
                "volume shape {:?} vs patch shape {:?}",
                x.dim(),
                self.cfg.patch_shape
            )));
        }
        Ok(())
    }

    /// Channel encoder f_i: lift one modality volume into the shared feature
    /// space. Each modality has its own parameters.
    pub fn encode_modality(&self, x: &ModalityVolume<T>, i: usize) -> Result<Array4<T>> {
        self.check_volume(x, i)?;
        Ok(self.stems[i].forward(&as_single_channel(x)))
    }

    /// Shared backbone T(·;θ): per-voxel class probabilities at input
    /// resolution plus the bottleneck feature.
    pub fn backbone_forward(
        &self,
        encoded: &Array4<T>,
    ) -> (ProbabilityField<T>, LatentFeature<T>) {
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let pass = self.backbone.forward(encoded, true);
        let pred = ProbabilityField::from_normalized(pass.pred().expect("decoder ran").clone());
        let deep = LatentFeature::from_values_unchecked(pass.deep().clone());
        (pred, deep)
    }

    fn forward_branch(
        &self,
        x: &Array3<T>,
        i: usize,
        with_decoder: bool,
    ) -> Result<BranchPass<T>> {
        self.check_volume(x, i)?;
        let x4 = as_single_channel(x);
        let encoded = self.stems[i].forward(&x4);
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let backbone = self.backbone.forward(&encoded, with_decoder);
        Ok(BranchPass {
            modality: i,
            stem_in: x4,
            backbone,
        })
    }

    pub(crate) fn forward_case_cached(
        &self,
        volumes: &[ModalityVolume<T>],
        subset: ModalitySubset,
        include_all_deep: bool,
    ) -> Result<(ForwardOutputs<T>, Vec<BranchPass<T>>)> {
        if volumes.len() != self.cfg.n_modalities {
            return Err(Error::Dimension(format!(
                "{} volumes for {} modalities",
                volumes.len(),
                self.cfg.n_modalities
            )));
        }
        if subset.n_modalities() != self.cfg.n_modalities {
            return Err(Error::Config(format!(
                "subset over {} modalities used with a {}-modality network",
                subset.n_modalities(),
                self.cfg.n_modalities
            )));
        }
        let mut branches = Vec::new();
        for i in 0..self.cfg.n_modalities {
            let in_subset = subset.contains(i);
            if !in_subset && !include_all_deep {
                continue; // absent branch: never evaluated
            }
            branches.push(self.forward_branch(&volumes[i], i, in_subset)?);
        }

        let mut per_modality_preds = BTreeMap::new();
        let mut per_modality_deep = BTreeMap::new();
        for b in &branches {
            per_modality_deep.insert(
                b.modality,
                LatentFeature::from_values_unchecked(b.backbone.deep().clone()),
            );
            if let Some(pred) = b.backbone.pred() {
                per_modality_preds
                    .insert(b.modality, ProbabilityField::from_normalized(pred.clone()));
            }
        }
        let subset_deep = fuse_features(
            &per_modality_deep
                .iter()
                .filter(|(i, _)| subset.contains(**i))
                .map(|(i, f)| (*i, f.clone()))
                .collect(),
        )?;
        let full_deep = include_all_deep
            .then(|| fuse_features(&per_modality_deep))
            .transpose()?;
        let fused_pred = fuse_predictions(&per_modality_preds)?;
        Ok((
            ForwardOutputs {
                per_modality_preds,
                per_modality_deep,
                fused_pred,
                full_deep,
                subset_deep,
            },
            branches,
        ))
    }

    /// Evaluate the case on `subset`. Entries of `volumes` outside the subset
    /// are never read (pass anything, including empty arrays) unless
    /// `include_all_deep` asks for the full-modality teacher feature.
    pub fn forward_case(
        &self,
        volumes: &[ModalityVolume<T>],
        subset: ModalitySubset,
        include_all_deep: bool,
    ) -> Result<ForwardOutputs<T>> {
        Ok(self
            .forward_case_cached(volumes, subset, include_all_deep)?
            .0)
    }

    /// Backward pass for one case. `gfused` is the gradient w.r.t. the fused
    /// prediction, `gsubset_deep` w.r.t. the fused subset feature; both are
    /// distributed uniformly over the subset's branches (mean fusion).
    /// Branches outside the subset only ever feed the detached teacher
    /// feature, so they take no backward pass.
    pub(crate) fn backward_case(
        &mut self,
        branches: &[BranchPass<T>],
        subset: ModalitySubset,
        gfused: &Array4<T>,
        gsubset_deep: Option<&Array4<T>>,
    ) {
        let share = T::one() / T::c(subset.len() as f64);
        let gpred = gfused.mapv(|v| v * share);
        let gdeep = gsubset_deep.map(|g| g.mapv(|v| v * share));
        for b in branches {
            if !subset.contains(b.modality) {
                continue;
            }
            let gstem_out = self
                .backbone
                .backward(&b.backbone, Some(&gpred), gdeep.as_ref());
            let _ = self.stems[b.modality].backward(&b.stem_in, &gstem_out);
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamFn<'_, T>) {
        for (i, stem) in self.stems.iter_mut().enumerate() {
            stem.visit_params(&format!("stem{i}"), f);
        }
        self.backbone.visit_params("backbone", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param<T>| p.zero_grad());
    }
}

/// Early-fusion baseline: all modalities stacked as input channels of a
/// single stem (absent modalities zero-filled), one backbone pass.
#[derive(Debug)]
pub struct EarlyFusionNet<T: Scalar> {
    cfg: NetworkConfig,
    stem: Conv3d<T>,
    backbone: Backbone<T>,
    backbone_calls: AtomicU64,
}

impl<T: Scalar> EarlyFusionNet<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv3d::new(cfg.n_modalities, cfg.base_channels, 3, 1, 1, &mut rng);
        let backbone = Backbone::new(&cfg, &mut rng);
        Ok(Self {
            cfg,
            stem,
            backbone,
            backbone_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn backbone_invocations(&self) -> u64 {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    fn stack_volumes(
        &self,
        volumes: &[ModalityVolume<T>],
        subset: ModalitySubset,
    ) -> Result<Array4<T>> {
        if volumes.len() != self.cfg.n_modalities {
            return Err(Error::Dimension(format!(
                "{} volumes for {} modalities",
                volumes.len(),
                self.cfg.n_modalities
            )));
        }
        let (d, h, w) = self.cfg.patch_shape;
        let mut x = Array4::<T>::zeros((self.cfg.n_modalities, d, h, w));
        for i in 0..self.cfg.n_modalities {
            if !subset.contains(i) {
                continue; // zero-filled channel
            }
            if volumes[i].dim() != (d, h, w) {
                return Err(Error::Dimension(format!(
                    "volume shape {:?} vs patch shape {:?}",
                    volumes[i].dim(),
                    (d, h, w)
                )));
            }
            x.index_axis_mut(Axis(0), i).assign(&volumes[i]);
        }
        Ok(x)
    }

    pub(crate) fn forward_cached(
        &self,
        volumes: &[ModalityVolume<T>],
        subset: ModalitySubset,
    ) -> Result<(ProbabilityField<T>, Array4<T>, BackbonePass<T>)> {
        let x = self.stack_volumes(volumes, subset)?;
        let encoded = self.stem.forward(&x);
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let pass = self.backbone.forward(&encoded, true);
        let pred = ProbabilityField::from_normalized(pass.pred().expect("decoder ran").clone());
        Ok((pred, x, pass))
    }

    pub fn forward(
        &self,
        volumes: &[ModalityVolume<T>],
        subset: ModalitySubset,
    ) -> Result<ProbabilityField<T>> {
        Ok(self.forward_cached(volumes, subset)?.0)
    }

    pub(crate) fn backward(
        &mut self,
        stem_in: &Array4<T>,
        pass: &BackbonePass<T>,
        gpred: &Array4<T>,
    ) {
        let gstem_out = self.backbone.backward(pass, Some(gpred), None);
        let _ = self.stem.backward(stem_in, &gstem_out);
    }

    pub fn visit_params(&mut self, f: &mut ParamFn<'_, T>) {
        self.stem.visit_params("stem", f);
        self.backbone.visit_params("backbone", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param<T>| p.zero_grad());
    }
}
