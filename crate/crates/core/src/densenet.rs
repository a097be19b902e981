//! Densely connected convolutional classifier for the benign/malign stage.

use levitmc_tensor::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::bin2img::IMAGE_SIDE;
use crate::error::{Error, Result};
use crate::model::{Architecture, Bound, Ctx, Forward, Init, Mode, ModelGraph, ParamStore, HEAD};

pub const ARCH_TAG: &str = "densenet-toy/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseNetConfig {
    pub growth_rate: usize,
    /// Layer count of each dense block.
    pub block_layout: Vec<usize>,
    pub init_channels: usize,
    pub num_classes: usize,
    /// Channel fraction kept by each transition.
    pub compression: f64,
    pub stem_stride: usize,
    /// Side of the square input the model accepts.
    pub input_size: usize,
    /// Average-pool factor applied to the input before the stem.
    pub input_downsample: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self {
            growth_rate: 8,
            block_layout: vec![2, 2, 2],
            init_channels: 16,
            num_classes: 2,
            compression: 0.5,
            stem_stride: 1,
            input_size: IMAGE_SIDE,
            input_downsample: 1,
        }
    }
}

impl DenseNetConfig {
    /// Small preset that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            growth_rate: 4,
            block_layout: vec![2, 2],
            init_channels: 8,
            stem_stride: 2,
            input_downsample: 4,
            ..Self::default()
        }
    }

    /// 16×16-input variant used by gradient checks.
    pub fn reduced() -> Self {
        Self {
            growth_rate: 2,
            block_layout: vec![2, 1],
            init_channels: 4,
            input_size: 16,
            ..Self::default()
        }
    }

    fn transition_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.compression).floor() as usize).max(1)
    }

    /// Channel count of the feature map entering the classifier head.
    pub fn head_channels(&self) -> usize {
        let mut c = self.init_channels;
        for &layers in &self.block_layout {
            c = self.transition_width(c + layers * self.growth_rate);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("densenet: {m}")));
        if self.growth_rate == 0 || self.init_channels == 0 || self.stem_stride == 0 {
            return bad("growth_rate, init_channels and stem_stride must be positive".into());
        }
        if self.block_layout.is_empty() || self.block_layout.contains(&0) {
            return bad(format!("block_layout {:?} needs positive layer counts", self.block_layout));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} is outside (0, 1]", self.compression));
        }
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.input_downsample == 0 || self.input_size % self.input_downsample != 0 {
            return bad(format!(
                "input_downsample {} must divide input_size {}",
                self.input_downsample, self.input_size
            ));
        }
        let mut side = (self.input_size / self.input_downsample).div_ceil(self.stem_stride);
        for _ in &self.block_layout {
            if side < 2 {
                return bad(format!("input_size {} is too small for the layout", self.input_size));
            }
            side /= 2;
        }
        Ok(())
    }
}

pub fn build_densenet(config: &DenseNetConfig, seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    init.conv(&mut store, "stem.conv", config.init_channels, 3, 3)?;
    let mut c = config.init_channels;
    for (b, &layers) in config.block_layout.iter().enumerate() {
        for l in 0..layers {
            let p = format!("block{b}.layer{l}");
            init.bn(&mut store, &format!("{p}.bn"), c)?;
            init.conv(&mut store, &format!("{p}.conv"), config.growth_rate, c, 3)?;
            c += config.growth_rate;
        }
        let out = config.transition_width(c);
        init.bn(&mut store, &format!("trans{b}.bn"), c)?;
        init.conv(&mut store, &format!("trans{b}.conv"), out, c, 1)?;
        c = out;
    }
    init.linear(&mut store, HEAD, c, config.num_classes)?;
    Ok(ModelGraph {
        arch: Architecture::DenseNet(config.clone()),
        params: store,
    })
}

pub(crate) fn forward<T: Real>(
    config: &DenseNetConfig,
    g: &mut Graph<T>,
    bound: &Bound<T>,
    input: Var,
    mode: Mode,
) -> Result<Forward> {
    let mut cx = Ctx::new(g, bound, mode);
    cx.check_input(input, config.input_size)?;
    let mut x = input;
    if config.input_downsample > 1 {
        x = cx.g.avgpool2d(x, config.input_downsample, config.input_downsample)?;
    }
    x = cx.conv(x, "stem.conv", config.stem_stride, 1)?;
    for (b, &layers) in config.block_layout.iter().enumerate() {
        for l in 0..layers {
            let p = format!("block{b}.layer{l}");
            let h = cx.bn(x, &format!("{p}.bn"))?;
            let h = cx.g.relu(h)?;
            let h = cx.conv(h, &format!("{p}.conv"), 1, 1)?;
            x = cx.g.concat(&[x, h])?;
        }
        let h = cx.bn(x, &format!("trans{b}.bn"))?;
        let h = cx.g.relu(h)?;
        let h = cx.conv(h, &format!("trans{b}.conv"), 1, 0)?;
        x = cx.g.avgpool2d(h, 2, 2)?;
    }
    let pooled = cx.g.global_avgpool(x)?;
    let logits = cx.linear(pooled, HEAD)?;
    cx.finish(logits, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use levitmc_tensor::Tensor;

    #[test]
    fn channel_arithmetic_single_block() {
        let cfg = DenseNetConfig {
            growth_rate: 2,
            block_layout: vec![1],
            init_channels: 4,
            input_size: 16,
            ..DenseNetConfig::default()
        };
        // 4 stem channels + 2 grown = 6, halved by the transition
        assert_eq!(cfg.head_channels(), 3);
        let m = build_densenet(&cfg, 1).unwrap();
        assert_eq!(m.params.get("head.weight").unwrap().shape(), &[3, 2]);
        assert_eq!(m.params.get("trans0.conv.weight").unwrap().shape(), &[3, 6, 1, 1]);
    }

    #[test]
    fn layer_inputs_follow_concatenation_rule() {
        let cfg = DenseNetConfig::default();
        let m = build_densenet(&cfg, 0).unwrap();
        let mut c = cfg.init_channels;
        for (b, &layers) in cfg.block_layout.iter().enumerate() {
            for l in 0..layers {
                let w = m.params.get(&format!("block{b}.layer{l}.conv.weight")).unwrap();
                assert_eq!(w.shape()[1], c + l * cfg.growth_rate);
            }
            c = cfg.transition_width(c + layers * cfg.growth_rate);
        }
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = DenseNetConfig::reduced();
        assert_eq!(build_densenet(&cfg, 9).unwrap(), build_densenet(&cfg, 9).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let forced = DenseNetConfig {
            num_classes: 3,
            ..DenseNetConfig::default()
        };
        assert!(matches!(build_densenet(&forced, 0), Err(Error::Config(_))));
        let empty = DenseNetConfig {
            block_layout: vec![],
            ..DenseNetConfig::default()
        };
        assert!(matches!(build_densenet(&empty, 0), Err(Error::Config(_))));
        let squash = DenseNetConfig {
            compression: 1.5,
            ..DenseNetConfig::default()
        };
        assert!(matches!(build_densenet(&squash, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_even_logits() {
        let cfg = DenseNetConfig::reduced();
        let mut m = build_densenet(&cfg, 2).unwrap();
        let c = cfg.head_channels();
        m.params.replace("head.weight", Tensor::zeros(&[c, 2])).unwrap();
        let logits = m.infer(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let m = build_densenet(&DenseNetConfig::reduced(), 2).unwrap();
        assert!(matches!(m.infer(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn toy_preset_is_valid() {
        let m = build_densenet(&DenseNetConfig::toy(), 0).unwrap();
        let logits = m.infer(&Tensor::full(&[1, 3, 224, 224], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }
}
