//! The multi-scale feature learning network.
//!
//! Bottom-up backbone stages produce `C2..C5` at strides {4, 8, 16, 32}. The
//! cross-scale pathway projects each `C_k` to the lateral width with a 1x1
//! convolution, adds the 2x nearest-upsampled coarser level, and smooths with
//! a 3x3 convolution to give `P2..P5`. Fusion refines `P2, P3, P4` with 3, 2
//! and 1 bottleneck blocks into `F2, F3, F4`, pools each of
//! `{F2, F3, F4, P5}`, concatenates, and maps through one embedding head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::nn::{
    BottleneckBlock, ConvBn, ConvLayer, EmbeddingHead, Forward, LinearLayer, Mode, ParamId,
    ParamStore,
};
use crate::tensor::Tensor;

/// Stage labels of the pyramid, finest first.
pub const STAGES: [usize; 4] = [2, 3, 4, 5];

/// Bottleneck depth of the refinement stack on each of P2, P3, P4.
pub const MSFF_DEPTHS: [(usize, usize); 3] = [(2, 3), (3, 2), (4, 1)];

/// Network topology and the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub lateral_width: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// Top-down pathway with lateral connections.
    pub csip: bool,
    /// Lateral 1x1 connections on stages 2..4 (stage 5 always has one).
    pub lateral: bool,
    /// Bottleneck refinement of P2..P4.
    pub msff: bool,
    /// Keep stage 5 at stride 16. Only valid for the plain backbone.
    pub last_stride_one: bool,
    /// Direct fusion without the top-down path (`csip` off): finest stage
    /// projected and fused, 2 for C2..C5, 4 for C4 and C5. 0 leaves the
    /// choice to `msff`: plain backbone without it, C2..C5 with it.
    #[serde(default)]
    pub fuse_from: usize,
}

impl ModelConfig {
    /// Small model for single-core experiments: 64x32 input.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            input_height: 64,
            input_width: 32,
            in_channels: 3,
            stem_width: 16,
            stage_widths: [16, 32, 64, 128],
            stage_blocks: [1, 1, 1, 1],
            lateral_width: 32,
            embedding_dim: 64,
            num_classes,
            csip: true,
            lateral: true,
            msff: true,
            last_stride_one: false,
            fuse_from: 0,
        }
    }

    /// ResNet-50-sized widths at 256x128.
    pub fn full_scale(num_classes: usize) -> Self {
        ModelConfig {
            input_height: 256,
            input_width: 128,
            in_channels: 3,
            stem_width: 64,
            stage_widths: [256, 512, 1024, 2048],
            stage_blocks: [3, 4, 6, 3],
            lateral_width: 512,
            embedding_dim: 512,
            num_classes,
            csip: true,
            lateral: true,
            msff: true,
            last_stride_one: false,
            fuse_from: 0,
        }
    }

    /// Plain backbone + pooled C5 + head.
    pub fn is_baseline(&self) -> bool {
        !self.csip && !self.msff && self.fuse_from == 0
    }

    /// Pyramid levels pooled into the embedding head (not counting the
    /// plain backbone, which pools C5 alone).
    pub fn fused_levels(&self) -> usize {
        if self.csip {
            4
        } else {
            6 - self.fuse_from.max(2)
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_height % 32 != 0 || self.input_width % 32 != 0 || self.input_height == 0 || self.input_width == 0 {
            errs.push(format!(
                "model input {}x{} must be a positive multiple of 32 in both axes",
                self.input_height, self.input_width
            ));
        }
        if self.stage_widths.contains(&0) || self.stage_blocks.contains(&0) {
            errs.push("model stage widths and block counts must be positive".into());
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("stem_width", self.stem_width),
            ("lateral_width", self.lateral_width),
            ("embedding_dim", self.embedding_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        if self.last_stride_one && !self.is_baseline() {
            errs.push("model.last_stride_one requires csip=off and msff=off".into());
        }
        if self.fuse_from == 1 || self.fuse_from > 5 {
            errs.push(format!("model.fuse_from must be 0 or one of 2..=5, got {}", self.fuse_from));
        } else if self.fuse_from != 0 && self.csip {
            errs.push("model.fuse_from applies to direct fusion only (csip=off)".into());
        } else if self.fuse_from > 2 && self.msff {
            errs.push("model.fuse_from above 2 cannot feed the refinement stacks (msff=off)".into());
        }
        if !self.csip && !self.lateral {
            errs.push("model.lateral=off only makes sense with csip=on".into());
        }
        errs
    }

    /// Spatial extent of each stage output for the configured input.
    pub fn stage_extents(&self) -> [(usize, usize); 4] {
        let mut out = [(0, 0); 4];
        for (i, s) in [4, 8, 16, 32].into_iter().enumerate() {
            let s = if i == 3 && self.last_stride_one { 16 } else { s };
            out[i] = (self.input_height / s, self.input_width / s);
        }
        out
    }
}

/// Named feature sets of one forward pass. `p` and `f` are absent for the
/// plain backbone.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub c: [Var; 4],
    pub p: Option<[Var; 4]>,
    /// F2, F3, F4 and the P5 passthrough.
    pub f: Option<[Var; 4]>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub input: Var,
    pub embedding: Var,
    pub logits: Var,
    pub features: PyramidFeatures,
}

#[derive(Debug, Clone)]
struct Pyramid {
    /// `None` where the lateral connection is ablated.
    lateral: Vec<Option<ConvLayer>>,
    smooth: Vec<ConvLayer>,
}

/// Layer structure of the network; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct MsflNet {
    pub config: ModelConfig,
    stem: ConvBn,
    stages: Vec<Vec<BottleneckBlock>>,
    pyramid: Option<Pyramid>,
    msff: Vec<Vec<BottleneckBlock>>,
    head: EmbeddingHead,
    classifier: LinearLayer,
}

impl MsflNet {
    /// Build the layers, registering and initializing parameters in `store`.
    pub fn build(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(crate::Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvBn::new(
            store,
            "stem",
            config.in_channels,
            config.stem_width,
            3,
            2,
            1,
            &mut rng,
        )?;
        let mut stages = Vec::new();
        let mut cin = config.stem_width;
        for (i, (&width, &blocks)) in config
            .stage_widths
            .iter()
            .zip(&config.stage_blocks)
            .enumerate()
        {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && !(i == 3 && config.last_stride_one) {
                    2
                } else {
                    1
                };
                let name = format!("backbone.c{}.{b}", STAGES[i]);
                stage.push(BottleneckBlock::new(store, &name, cin, width, stride, &mut rng)?);
                cin = width;
            }
            stages.push(stage);
        }

        let lw = config.lateral_width;
        let pyramid = if config.is_baseline() {
            None
        } else {
            let mut lateral = Vec::new();
            let mut smooth = Vec::new();
            for (i, &width) in config.stage_widths.iter().enumerate() {
                let k = STAGES[i];
                let wanted = if config.csip {
                    i == 3 || config.lateral
                } else {
                    k >= config.fuse_from.max(2)
                };
                lateral.push(if wanted {
                    Some(ConvLayer::new(
                        store,
                        &format!("csip.lateral{k}"),
                        width,
                        lw,
                        1,
                        1,
                        0,
                        true,
                        &mut rng,
                    )?)
                } else {
                    None
                });
                if config.csip {
                    smooth.push(ConvLayer::new(
                        store,
                        &format!("csip.smooth{k}"),
                        lw,
                        lw,
                        3,
                        1,
                        1,
                        true,
                        &mut rng,
                    )?);
                }
            }
            Some(Pyramid { lateral, smooth })
        };

        let mut msff = Vec::new();
        if config.msff {
            for (k, depth) in MSFF_DEPTHS {
                let mut stack = Vec::new();
                for b in 0..depth {
                    stack.push(BottleneckBlock::new(
                        store,
                        &format!("msff.f{k}.{b}"),
                        lw,
                        lw,
                        1,
                        &mut rng,
                    )?);
                }
                msff.push(stack);
            }
        }

        let fused = if config.is_baseline() {
            config.stage_widths[3]
        } else {
            config.fused_levels() * lw
        };
        let head = EmbeddingHead::new(store, "head", fused, config.embedding_dim, &mut rng)?;
        let classifier = LinearLayer::new(
            store,
            "classifier",
            config.embedding_dim,
            config.num_classes,
            &mut rng,
        )?;
        Ok(MsflNet {
            config,
            stem,
            stages,
            pyramid,
            msff,
            head,
            classifier,
        })
    }

    /// Depth of the refinement stack per stage, e.g. `[(2,3),(3,2),(4,1)]`.
    pub fn msff_depths(&self) -> Vec<(usize, usize)> {
        MSFF_DEPTHS
            .iter()
            .zip(&self.msff)
            .map(|(&(k, _), stack)| (k, stack.len()))
            .collect()
    }

    pub fn fused_width(&self) -> usize {
        self.head.bn.channels
    }

    pub fn head(&self) -> &EmbeddingHead {
        &self.head
    }

    pub fn classifier(&self) -> &LinearLayer {
        &self.classifier
    }

    pub fn stem(&self) -> &ConvBn {
        &self.stem
    }

    pub fn stage_blocks(&self, stage: usize) -> &[BottleneckBlock] {
        &self.stages[stage]
    }

    fn check_input(&self, tape: &Tape, images: Var) -> Result<()> {
        let dims = tape.shape(images).dims();
        let c = &self.config;
        if dims.len() != 4 {
            return Err(contract(format!("images must be rank 4, got {:?}", dims)));
        }
        if dims[2] % 32 != 0 || dims[3] % 32 != 0 {
            return Err(contract(format!(
                "input resolution {}x{} is not divisible by 32",
                dims[2], dims[3]
            )));
        }
        if dims[1] != c.in_channels || dims[2] != c.input_height || dims[3] != c.input_width {
            return Err(contract(format!(
                "images {:?} do not match configured ({}, {}, {})",
                dims, c.in_channels, c.input_height, c.input_width
            )));
        }
        Ok(())
    }

    /// One backbone stage: index 0 maps images to C2 (stem included), index k
    /// maps C_{k+1} to C_{k+2}.
    pub fn backbone_stage(&self, f: &mut Forward, stage: usize, input: Var) -> Result<Var> {
        let mut h = if stage == 0 {
            self.check_input(f.tape, input)?;
            let s = self.stem.forward(f, input)?;
            f.tape.relu(s)?
        } else {
            input
        };
        for block in &self.stages[stage] {
            h = block.forward(f, h)?;
        }
        Ok(h)
    }

    pub fn backbone_forward(&self, f: &mut Forward, images: Var) -> Result<[Var; 4]> {
        let c2 = self.backbone_stage(f, 0, images)?;
        let c3 = self.backbone_stage(f, 1, c2)?;
        let c4 = self.backbone_stage(f, 2, c3)?;
        let c5 = self.backbone_stage(f, 3, c4)?;
        Ok([c2, c3, c4, c5])
    }

    /// Top-down pathway with lateral connections: C2..C5 -> P2..P5.
    pub fn csip_forward(&self, f: &mut Forward, c: &[Var; 4]) -> Result<[Var; 4]> {
        let pyr = self
            .pyramid
            .as_ref()
            .ok_or_else(|| contract("plain backbone has no pyramid"))?;
        let mut p = [c[3]; 4];
        if !self.config.csip {
            // Stages below `fuse_from` pass through unprojected and unfused.
            for i in 0..4 {
                p[i] = match &pyr.lateral[i] {
                    Some(layer) => layer.forward(f, c[i])?,
                    None => c[i],
                };
            }
            return Ok(p);
        }
        let top = lateral(pyr, 3)?.forward(f, c[3])?;
        p[3] = pyr.smooth[3].forward(f, top)?;
        for i in (0..3).rev() {
            let up = f.tape.upsample2x(p[i + 1])?;
            let merged = if let Some(layer) = &pyr.lateral[i] {
                let lat = layer.forward(f, c[i])?;
                if f.tape.shape(lat) != f.tape.shape(up) {
                    return Err(contract(format!(
                        "P{} upsampled to {} but lateral C{} is {}",
                        STAGES[i + 1],
                        f.tape.shape(up),
                        STAGES[i],
                        f.tape.shape(lat)
                    )));
                }
                f.tape.add(lat, up)?
            } else {
                up
            };
            p[i] = pyr.smooth[i].forward(f, merged)?;
        }
        Ok(p)
    }

    /// Refinement stacks on P2..P4; P5 passes through.
    pub fn msff_forward(&self, f: &mut Forward, p: &[Var; 4]) -> Result<[Var; 4]> {
        let mut out = *p;
        for (i, stack) in self.msff.iter().enumerate() {
            for block in stack {
                out[i] = block.forward(f, out[i])?;
            }
        }
        Ok(out)
    }

    /// Pool each map, concatenate, embed, classify.
    pub fn fuse_and_embed(&self, f: &mut Forward, maps: &[Var]) -> Result<(Var, Var)> {
        let pooled = maps
            .iter()
            .map(|&m| f.tape.global_avg_pool(m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fused = if pooled.len() == 1 {
            pooled[0]
        } else {
            f.tape.concat(&pooled)?
        };
        let embedding = self.head.forward(f, fused)?;
        let logits = self.classifier.forward(f, embedding)?;
        Ok((embedding, logits))
    }

    /// Everything downstream of the backbone.
    pub fn head_from_stages(
        &self,
        f: &mut Forward,
        c: &[Var; 4],
    ) -> Result<(Var, Var, Option<[Var; 4]>, Option<[Var; 4]>)> {
        if self.config.is_baseline() {
            let (e, l) = self.fuse_and_embed(f, &c[3..])?;
            return Ok((e, l, None, None));
        }
        let p = self.csip_forward(f, c)?;
        let fm = self.msff_forward(f, &p)?;
        let (e, l) = self.fuse_and_embed(f, &fm[4 - self.config.fused_levels()..])?;
        Ok((e, l, Some(p), Some(fm)))
    }

    /// Full pass on an images node already on the tape.
    pub fn forward_var(&self, f: &mut Forward, images: Var) -> Result<ForwardOutput> {
        let c = self.backbone_forward(f, images)?;
        let (embedding, logits, p, fm) = self.head_from_stages(f, &c)?;
        Ok(ForwardOutput {
            input: images,
            embedding,
            logits,
            features: PyramidFeatures { c, p, f: fm },
        })
    }
}

fn lateral(pyr: &Pyramid, i: usize) -> Result<&ConvLayer> {
    pyr.lateral[i]
        .as_ref()
        .ok_or_else(|| contract(format!("no lateral connection at stage {}", STAGES[i])))
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct MsflModel {
    pub net: MsflNet,
    pub store: ParamStore,
}

impl MsflModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = MsflNet::build(config, &mut store, seed)?;
        Ok(MsflModel { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Start a forward pass over this model's parameters.
    pub fn begin<'a>(&'a mut self, tape: &'a mut Tape, mode: Mode) -> (&'a MsflNet, Forward<'a>) {
        (&self.net, Forward::new(tape, &mut self.store, mode))
    }

    /// Full forward pass of `images` as a leaf (differentiable input).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        mode: Mode,
    ) -> Result<(ForwardOutput, Vec<(ParamId, Var)>)> {
        let (net, mut f) = self.begin(tape, mode);
        let x = f.tape.leaf(images.clone());
        let out = net.forward_var(&mut f, x)?;
        Ok((out, f.bound_params()))
    }

    /// Eval-mode stage outputs by name: `C2..C5`, and with CSIP `P2..P5`
    /// and `F2..F4`.
    pub fn feature_maps(&mut self, images: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let (net, mut f) = self.begin(&mut tape, Mode::Eval);
        let x = f.tape.constant(images.clone());
        let out = net.forward_var(&mut f, x)?;
        let mut maps = Vec::new();
        let mut push = |prefix: &str, vars: &[Var], from: usize| {
            for (k, v) in vars.iter().enumerate().skip(from) {
                maps.push((format!("{prefix}{}", k + 2), f.tape.value(*v).clone()));
            }
        };
        push("C", &out.features.c, 0);
        if let Some(p) = &out.features.p {
            push("P", p, 4 - net.config.fused_levels());
        }
        if let Some(fm) = &out.features.f {
            push("F", &fm[..3], 0);
        }
        Ok(maps)
    }

    /// Eval-mode embeddings on a throwaway tape.
    pub fn embed(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (net, mut f) = self.begin(&mut tape, Mode::Eval);
        let x = f.tape.constant(images.clone());
        let out = net.forward_var(&mut f, x)?;
        Ok(f.tape.value(out.embedding).clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::tensor::Shape;
    use rand::Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Smallest legal resolution with narrow widths, for checks that run the
    /// model many times.
    pub(crate) fn tiny(num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_height: 32,
            input_width: 32,
            stem_width: 4,
            stage_widths: [4, 8, 8, 8],
            lateral_width: 4,
            embedding_dim: 6,
            ..ModelConfig::desk(num_classes)
        }
    }

    fn dims(tape: &Tape, v: Var) -> Vec<usize> {
        tape.shape(v).dims().to_vec()
    }

    #[test]
    fn desk_pyramid_shapes() {
        let mut m = MsflModel::new(ModelConfig::desk(5), 1).unwrap();
        let mut tape = Tape::new();
        let (out, _) = m.forward(&mut tape, &random(&[2, 3, 64, 32], 2), Mode::Train).unwrap();
        let ext = [(16, 8), (8, 4), (4, 2), (2, 1)];
        let widths = [16, 32, 64, 128];
        let p = out.features.p.unwrap();
        let f = out.features.f.unwrap();
        for i in 0..4 {
            let (h, w) = ext[i];
            assert_eq!(dims(&tape, out.features.c[i]), vec![2, widths[i], h, w]);
            assert_eq!(dims(&tape, p[i]), vec![2, 32, h, w]);
            assert_eq!(dims(&tape, f[i]), vec![2, 32, h, w]);
        }
        assert_eq!(f[3], p[3], "P5 bypasses refinement");
        assert_eq!(m.net.msff_depths(), vec![(2, 3), (3, 2), (4, 1)]);
        assert_eq!(m.net.fused_width(), 128);
        assert_eq!(dims(&tape, out.embedding), vec![2, 64]);
        assert_eq!(dims(&tape, out.logits), vec![2, 5]);
        assert_eq!(ModelConfig::desk(5).stage_extents(), ext);
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let mut m = MsflModel::new(ModelConfig::desk(5), 1).unwrap();
        let mut tape = Tape::new();
        let err = m.forward(&mut tape, &Tensor::zeros(&Shape::new(vec![1, 3, 250, 128]).unwrap()), Mode::Eval);
        assert!(err.unwrap_err().to_string().contains("divisible by 32"));
        let bad = ModelConfig {
            input_height: 250,
            ..ModelConfig::desk(5)
        };
        assert!(MsflModel::new(bad, 1).is_err());
        let bad = ModelConfig {
            csip: false,
            lateral: false,
            ..ModelConfig::desk(5)
        };
        assert_eq!(bad.validate().len(), 1);
    }

    #[test]
    fn baseline_is_backbone_pool_head() {
        let cfg = ModelConfig {
            csip: false,
            msff: false,
            ..ModelConfig::desk(4)
        };
        let mut m = MsflModel::new(cfg, 3).unwrap();
        assert!(m.store.find("csip.lateral5.weight").is_none());
        assert!(m.store.params().iter().all(|p| !p.name.starts_with("msff")));
        let x = random(&[2, 3, 64, 32], 4);

        let mut tape = Tape::new();
        let (out, _) = m.forward(&mut tape, &x, Mode::Eval).unwrap();
        assert!(out.features.p.is_none() && out.features.f.is_none());
        let emb = tape.value(out.embedding).clone();
        let logits = tape.value(out.logits).clone();

        // Hand-wired plain model over the same parameters.
        let mut tape = Tape::new();
        let (net, mut f) = m.begin(&mut tape, Mode::Eval);
        let xv = f.tape.leaf(x);
        let s = net.stem().forward(&mut f, xv).unwrap();
        let mut h = f.tape.relu(s).unwrap();
        for stage in 0..4 {
            for b in net.stage_blocks(stage) {
                h = b.forward(&mut f, h).unwrap();
            }
        }
        let pooled = f.tape.global_avg_pool(h).unwrap();
        let e = net.head().forward(&mut f, pooled).unwrap();
        let l = net.classifier().forward(&mut f, e).unwrap();
        assert_eq!(f.tape.value(e), &emb);
        assert_eq!(f.tape.value(l), &logits);
    }

    #[test]
    fn direct_fusion_of_coarse_stages() {
        let cfg = ModelConfig {
            csip: false,
            msff: false,
            fuse_from: 4,
            ..ModelConfig::desk(4)
        };
        let mut m = MsflModel::new(cfg.clone(), 3).unwrap();
        assert!(m.store.find("csip.lateral3.weight").is_none());
        assert!(m.store.find("csip.lateral4.weight").is_some());
        assert_eq!(m.net.head().fc.in_features, 2 * cfg.lateral_width);
        let names: Vec<String> = m
            .feature_maps(&random(&[1, 3, 64, 32], 5))
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, ["C2", "C3", "C4", "C5", "P4", "P5", "F2", "F3", "F4"]);

        let bad = ModelConfig {
            fuse_from: 4,
            ..ModelConfig::desk(4)
        };
        assert_eq!(bad.validate().len(), 1);
        let all = ModelConfig { fuse_from: 2, ..cfg };
        assert!(!all.is_baseline());
        assert_eq!(all.fused_levels(), 4);
    }

    fn pyramid_from(m: &mut MsflModel, c: &[Tensor; 4]) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let (net, mut f) = m.begin(&mut tape, Mode::Eval);
        let cv = [0, 1, 2, 3].map(|i| f.tape.constant(c[i].clone()));
        let p = net.csip_forward(&mut f, &cv).unwrap();
        p.iter().map(|&v| f.tape.value(v).clone()).collect()
    }

    fn stage_inputs(cfg: &ModelConfig, seed: u64) -> [Tensor; 4] {
        let ext = cfg.stage_extents();
        [0, 1, 2, 3].map(|i| {
            random(
                &[1, cfg.stage_widths[i], ext[i].0, ext[i].1],
                seed + i as u64,
            )
        })
    }

    #[test]
    fn without_lateral_only_c5_feeds_the_pyramid() {
        let cfg = ModelConfig {
            lateral: false,
            ..ModelConfig::desk(4)
        };
        let mut m = MsflModel::new(cfg.clone(), 5).unwrap();
        for k in [2, 3, 4] {
            assert!(m.store.find(&format!("csip.lateral{k}.weight")).is_none());
        }
        assert!(m.store.find("csip.lateral5.weight").is_some());
        let a = stage_inputs(&cfg, 10);
        let mut b = stage_inputs(&cfg, 20);
        b[3] = a[3].clone();
        assert_eq!(pyramid_from(&mut m, &a), pyramid_from(&mut m, &b));
    }

    #[test]
    fn top_down_information_flow() {
        let cfg = ModelConfig::desk(4);
        let mut m = MsflModel::new(cfg.clone(), 6).unwrap();
        let c = stage_inputs(&cfg, 30);
        let base = pyramid_from(&mut m, &c);

        let mut z5 = c.clone();
        z5[3] = z5[3].zeros_like();
        let p = pyramid_from(&mut m, &z5);
        assert!(p[0].max_abs_diff(&base[0]) > 1e-6, "C5 reaches P2");

        let mut z2 = c.clone();
        z2[0] = z2[0].zeros_like();
        let p = pyramid_from(&mut m, &z2);
        assert!(p[0].max_abs_diff(&base[0]) > 1e-6);
        for k in 1..4 {
            assert_eq!(p[k], base[k], "C2 must not leak into P{}", k + 2);
        }
    }

    #[test]
    fn p2_loss_reaches_c2() {
        let cfg = ModelConfig::desk(4);
        let mut m = MsflModel::new(cfg.clone(), 7).unwrap();
        let c = stage_inputs(&cfg, 40);
        let mut tape = Tape::new();
        let (net, mut f) = m.begin(&mut tape, Mode::Eval);
        let cv = [0, 1, 2, 3].map(|i| f.tape.leaf(c[i].clone()));
        let p = net.csip_forward(&mut f, &cv).unwrap();
        let loss = f.tape.sum(p[0]).unwrap();
        let g = f.tape.grad(loss, &cv).unwrap();
        assert!(g.iter().all(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn zeroed_refinement_is_relu_of_pyramid() {
        let cfg = ModelConfig::desk(4);
        let mut m = MsflModel::new(cfg, 8).unwrap();
        let names: Vec<String> = m
            .store
            .params()
            .iter()
            .filter(|p| p.name.starts_with("msff") && p.name.contains(".expand.bn."))
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(names.len(), 2 * 6);
        for n in names {
            let id = m.store.find(&n).unwrap();
            let p = m.store.param_mut(id);
            p.value = p.value.zeros_like();
        }
        let mut tape = Tape::new();
        let (out, _) = m.forward(&mut tape, &random(&[2, 3, 64, 32], 9), Mode::Eval).unwrap();
        let p = out.features.p.unwrap();
        let f = out.features.f.unwrap();
        for k in 0..3 {
            let relu = tape.value(p[k]).map(|v| v.max(0.0));
            assert_eq!(tape.value(f[k]), &relu);
        }
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let mut m = MsflModel::new(ModelConfig::desk(4), 10).unwrap();
        let one = random(&[1, 3, 64, 32], 11);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let e = m.embed(&Tensor::new(vec![2, 3, 64, 32], two).unwrap()).unwrap();
        let (a, b) = e.data().split_at(64);
        assert_eq!(a, b);
        assert_eq!(m.embed(&one).unwrap().data(), a);
    }

    #[test]
    fn end_to_end_grad_check() {
        let m = MsflModel::new(tiny(3), 12).unwrap();
        let x = random(&[3, 3, 32, 32], 13);
        let probe = random(&[3, 3], 14);
        let build = |target: Option<ParamId>, input: Tensor| {
            let m = &m;
            let probe = probe.clone();
            move |tape: &mut Tape, v: Var| -> crate::autodiff::Result<Var> {
                let mut store = m.store.clone();
                let mut f = Forward::new(tape, &mut store, Mode::Train);
                let xv = match target {
                    Some(id) => {
                        f.bind(id, v);
                        f.tape.constant(input.clone())
                    }
                    None => v,
                };
                let out = m.net.forward_var(&mut f, xv).expect("forward");
                let w = f.tape.constant(probe.clone());
                let lw = f.tape.mul(out.logits, w)?;
                f.tape.sum(lw)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..x.numel())).collect();
        let r = GradCheck::new(1e-4)
            .with_coords(coords)
            .run(build(None, x.clone()), &x)
            .unwrap();
        assert!(r.passed, "input: {}", r.max_rel_error);

        for name in [
            "stem.conv.weight",
            "backbone.c3.0.spatial.conv.weight",
            "csip.lateral2.weight",
            "csip.smooth4.bias",
            "msff.f2.2.expand.bn.gamma",
            "head.fc.weight",
        ] {
            let id = m.store.find(name).unwrap_or_else(|| panic!("{name}"));
            let value = m.store.param(id).value.clone();
            let n = value.numel().min(12);
            let r = GradCheck::new(1e-4)
                .with_coords((0..n).collect())
                .run(build(Some(id), x.clone()), &value)
                .unwrap();
            assert!(r.passed, "{name}: {}", r.max_rel_error);
        }
    }
}
