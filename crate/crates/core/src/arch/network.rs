//! The full network: stem, residual stages, optional attention sites, classifier.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::window_out_extent;
use crate::tensor::{BnMode, Float, PoolParams, Tape, Tensor, Var};

use super::attention::{AttentionBlock, AttentionBlockSpec, Fusion, MaskSource};
use super::layers::{BatchNorm, Conv, Ctx, Linear};
use super::params::{BufferStore, ParamBuilder, ParamStore, Role};
use super::residual::{ResidualBlock, ResidualBlockSpec};

/// Declarative description of one network variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub num_classes: usize,
    pub input_frames: usize,
    /// Enabled attention sites, a subset of `{1, 2, 3}`.
    pub attention_sites: Vec<usize>,
    /// Every channel width and the hidden FC width are divided by this.
    pub channel_scale: usize,
    pub input_channels: usize,
    /// Height and width of the (square) network input.
    pub input_size: usize,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            num_classes: 83,
            input_frames: 32,
            attention_sites: vec![1, 2, 3],
            channel_scale: 1,
            input_channels: 3,
            input_size: 112,
            seed: 0,
        }
    }
}

/// Output stride of each stage of the configuration table, as
/// `(name, bottleneck, out, stride)`; attention sites follow the first three.
const RESIDUAL_STAGES: [(&str, usize, usize, usize); 7] = [
    ("res1", 32, 128, 2),
    ("res2", 64, 256, 2),
    ("res3", 128, 512, 2),
    ("res4", 256, 1028, 2),
    ("res5", 256, 1028, 1),
    ("res6", 256, 1028, 1),
    ("res7", 512, 2048, 1),
];
const STEM_CHANNELS: usize = 64;
const HIDDEN_FEATURES: usize = 512;

impl NetworkSpec {
    pub fn with_sites(mut self, sites: &[usize]) -> Self {
        self.attention_sites = sites.to_vec();
        self
    }

    pub fn scaled(&self, channels: usize) -> usize {
        (channels / self.channel_scale.max(1)).max(1)
    }

    pub fn sites(&self) -> BTreeSet<usize> {
        self.attention_sites.iter().copied().collect()
    }

    pub fn has_site(&self, site: usize) -> bool {
        self.attention_sites.contains(&site)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        [batch, self.input_channels, self.input_frames, self.input_size, self.input_size]
    }

    fn site_spec(&self, site: usize) -> Result<AttentionBlockSpec> {
        AttentionBlockSpec::for_site(site, self.scaled(RESIDUAL_STAGES[site - 1].2))
    }

    /// Checks the spec and returns the predicted `[C, F, H, W]` after each stage.
    pub fn validate(&self) -> Result<Vec<(String, [usize; 4])>> {
        if self.num_classes == 0 {
            return Err(Error::Arch("num_classes must be >= 1".into()));
        }
        if self.input_frames < 8 || !self.input_frames.is_multiple_of(8) {
            return Err(Error::Arch(format!(
                "input_frames must be >= 8 and divisible by 8, got {}",
                self.input_frames
            )));
        }
        if self.channel_scale == 0 {
            return Err(Error::Arch("channel_scale must be >= 1".into()));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::Arch(format!(
                "input_channels must be 1 (depth) or 3 (RGB), got {}",
                self.input_channels
            )));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.attention_sites {
            if !(1..=3).contains(&s) || !seen.insert(s) {
                return Err(Error::Arch(format!(
                    "attention_sites must be distinct values from {{1, 2, 3}}, got {:?}",
                    self.attention_sites
                )));
            }
        }
        if self.input_size < 2 {
            return Err(Error::Arch(format!("input_size {} is too small", self.input_size)));
        }
        let down = |n: usize| window_out_extent(n, 3, 2, 1).unwrap_or(0);
        let mut trace = Vec::new();
        let mut ext = [self.input_frames, self.input_size, self.input_size];
        trace.push(("stem".to_string(), [self.scaled(STEM_CHANNELS), ext[0], ext[1], ext[2]]));
        ext = ext.map(down);
        trace.push(("pool".to_string(), [self.scaled(STEM_CHANNELS), ext[0], ext[1], ext[2]]));
        for (i, &(name, _, out, stride)) in RESIDUAL_STAGES.iter().enumerate() {
            if stride == 2 {
                ext = ext.map(down);
            }
            let c = self.scaled(out);
            trace.push((name.to_string(), [c, ext[0], ext[1], ext[2]]));
            let site = i + 1;
            if site <= 3 && self.has_site(site) {
                self.site_spec(site)?.mask_scales(ext).map_err(|e| {
                    Error::Arch(format!("input_size {} is too small: {e}", self.input_size))
                })?;
                trace.push((format!("attention{site}"), [c, ext[0], ext[1], ext[2]]));
            }
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Residual(String, ResidualBlock),
    Attention(AttentionBlock),
}

/// Shape recorded after one stage of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput<T: Float = f32> {
    pub logits: Var<T>,
    pub trace: Vec<StageShape>,
    /// `(site, M)` for every enabled attention site.
    pub masks: Vec<(usize, Var<T>)>,
}

/// Parameters, batch-norm buffers and the fixed topology of one variant.
#[derive(Clone, Debug)]
pub struct Network<T: Float = f32> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    stem_conv: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
    final_bn: BatchNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Builds the network described by `spec`, initialized from `spec.seed`.
pub fn build_res3atn<T: Float>(spec: &NetworkSpec) -> Result<Network<T>> {
    spec.validate()?;
    let mut b = ParamBuilder::<T>::new(spec.seed);
    let stem = spec.scaled(STEM_CHANNELS);
    let stem_conv = Conv::build(&mut b, "stem.conv", spec.input_channels, stem, 3, 1, false)?;
    let stem_bn = BatchNorm::build(&mut b, "stem.bn", stem)?;
    let mut stages = Vec::new();
    let mut cin = stem;
    for (i, &(name, mid, out, stride)) in RESIDUAL_STAGES.iter().enumerate() {
        let rs = ResidualBlockSpec::new(cin, spec.scaled(mid), spec.scaled(out), stride);
        stages.push(Stage::Residual(name.to_string(), ResidualBlock::build(&mut b, name, rs)?));
        cin = rs.out_channels;
        let site = i + 1;
        if site <= 3 && spec.has_site(site) {
            let block = AttentionBlock::build(&mut b, &format!("attention{site}"), spec.site_spec(site)?)?;
            stages.push(Stage::Attention(block));
        }
    }
    let final_bn = BatchNorm::build(&mut b, "final_bn", cin)?;
    let hidden = spec.scaled(HIDDEN_FEATURES);
    let fc1 = Linear::build(&mut b, "fc1", cin, hidden)?;
    let fc2 = Linear::build(&mut b, "fc2", hidden, spec.num_classes)?;
    let (params, buffers) = b.finish();
    Ok(Network {
        spec: spec.clone(),
        params,
        buffers,
        stem_conv,
        stem_bn,
        stages,
        final_bn,
        fc1,
        fc2,
    })
}

impl<T: Float> Network<T> {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Attention(a) => Some(a),
            Stage::Residual(..) => None,
        })
    }

    pub fn has_mask_params(&self) -> bool {
        self.params.count_role(Role::Mask) > 0
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, mode: BnMode) -> Result<NetworkOutput<T>> {
        self.forward_bound(tape, x, mode, &[])
    }

    /// Forward pass with some parameter slots replaced by caller variables.
    pub fn forward_bound(
        &mut self,
        tape: &mut Tape<T>,
        x: &Var<T>,
        mode: BnMode,
        bound: &[(usize, Var<T>)],
    ) -> Result<NetworkOutput<T>> {
        let expected = self.spec.input_shape(x.shape().first().copied().unwrap_or(0));
        if x.shape() != expected || expected[0] == 0 {
            return Err(Error::Shape(format!(
                "network input must be [N, {}, {}, {}, {}], got {:?}",
                expected[1],
                expected[2],
                expected[3],
                expected[4],
                x.shape()
            )));
        }
        if mode == BnMode::Eval && !self.buffers.all_ready() {
            return Err(Error::BatchNorm(
                "eval mode needs trained or loaded running statistics".into(),
            ));
        }
        let mut ctx = Ctx::new(tape, &self.params, &mut self.buffers, mode);
        for (slot, v) in bound {
            ctx.bind(*slot, v.clone());
        }
        let mut trace = Vec::new();
        let mut masks = Vec::new();
        let mut record = |name: &str, v: &Var<T>| {
            trace.push(StageShape {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
        };

        let h = self.stem_conv.forward(&mut ctx, x)?;
        let mut h = self.stem_bn.forward_relu(&mut ctx, &h)?;
        record("stem", &h);
        h = ctx.tape.maxpool3d(&h, &PoolParams::downsample())?;
        record("pool", &h);
        for stage in &self.stages {
            match stage {
                Stage::Residual(name, block) => {
                    h = block.forward(&mut ctx, &h)?;
                    record(name, &h);
                }
                Stage::Attention(block) => {
                    let out = block.forward(&mut ctx, &h, Fusion::Residual, &MaskSource::Branch)?;
                    masks.push((block.spec.site, out.mask));
                    h = out.output;
                    record(&format!("attention{}", block.spec.site), &h);
                }
            }
        }
        let h = self.final_bn.forward_relu(&mut ctx, &h)?;
        let h = ctx.tape.avgpool3d_adaptive(&h)?;
        record("avgpool", &h);
        let h = ctx.tape.flatten(&h)?;
        let h = self.fc1.forward(&mut ctx, &h)?;
        let h = ctx.tape.relu(&h)?;
        record("fc1", &h);
        let logits = self.fc2.forward(&mut ctx, &h)?;
        record("logits", &logits);
        Ok(NetworkOutput { logits, trace, masks })
    }

    /// Parameters followed by batch-norm running statistics, by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| {
                let mut v = (*p.value).clone();
                v.clear_grad();
                (p.name.clone(), v.with_requires_grad(false))
            })
            .collect();
        for (name, s) in self.buffers.names.iter().zip(&self.buffers.stats) {
            out.push((format!("{name}running_mean"), s.running_mean.clone()));
            out.push((format!("{name}running_var"), s.running_var.clone()));
        }
        out
    }

    /// Names and shapes `named_tensors` would produce.
    pub fn expected_tensors(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (name, s) in self.buffers.names.iter().zip(&self.buffers.stats) {
            out.insert(format!("{name}running_mean"), vec![s.channels()]);
            out.insert(format!("{name}running_var"), vec![s.channels()]);
        }
        out
    }

    /// Replaces every parameter and buffer; nothing changes unless all match.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let expected = self.expected_tensors();
        let missing: Vec<&String> = expected.keys().filter(|k| !tensors.contains_key(*k)).collect();
        let extra: Vec<&String> = tensors.keys().filter(|k| !expected.contains_key(*k)).collect();
        let misshaped: Vec<String> = expected
            .iter()
            .filter_map(|(k, shape)| {
                let t = tensors.get(k)?;
                (t.shape() != shape.as_slice()).then(|| format!("{k} (file {:?}, network {:?})", t.shape(), shape))
            })
            .collect();
        if !(missing.is_empty() && extra.is_empty() && misshaped.is_empty()) {
            let mut parts = Vec::new();
            if !missing.is_empty() {
                parts.push(format!("missing {}: {}", missing.len(), join(&missing)));
            }
            if !extra.is_empty() {
                parts.push(format!("extra {}: {}", extra.len(), join(&extra)));
            }
            if !misshaped.is_empty() {
                parts.push(format!("mis-shaped {}: {}", misshaped.len(), misshaped.join(", ")));
            }
            return Err(Error::Mismatch(parts.join("; ")));
        }
        for p in self.params.iter_mut() {
            let t = &tensors[&p.name];
            *p.value_mut() = t.clone().with_requires_grad(true);
        }
        for (name, s) in self.buffers.names.iter().zip(self.buffers.stats.iter_mut()) {
            s.running_mean = tensors[&format!("{name}running_mean")].clone();
            s.running_var = tensors[&format!("{name}running_var")].clone();
            s.mark_loaded();
        }
        Ok(())
    }
}

fn join<S: AsRef<str>>(items: &[S]) -> String {
    items.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(", ")
}
