//! Trainable convolutional encoder producing the multi-scale feature
//! pyramid.
//!
//! Four stride-2 stages of conv → channel norm → relu, with 1×1 lateral
//! projections unifying the last three stage outputs to a common channel
//! count. Level strides are 4, 8, and 16; the stride-4 level doubles as the
//! shallow feature map for the proposal-offset path.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{init_normal, seeded_rng, MountedParams, ParamStore};
use crate::tensor::Tensor;

/// Strides of the three pyramid levels in image pixels.
pub const LEVEL_STRIDES: [f64; 3] = [4.0, 8.0, 16.0];

const NORM_EPS: f64 = 1e-5;

/// Encoder shape: shared pyramid channel count and per-stage widths.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Channel count of every pyramid level.
    pub channels: usize,
    /// Output widths of the four downsampling stages.
    pub stage_widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            stage_widths: [16, 24, 32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::Config(format!(
                "pyramid channel count must be at least 8, got {}",
                self.channels
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        Ok(())
    }
}

/// The three pyramid levels at strides 4/8/16, plus their strides.
pub struct FeaturePyramid<'t> {
    pub levels: [Var<'t>; 3],
}

impl<'t> FeaturePyramid<'t> {
    /// The stride-4 level, richest in positional information.
    pub fn shallow(&self) -> Var<'t> {
        self.levels[0]
    }
}

/// Deterministic parameter initialization. Biases and norm offsets start at
/// zero, norm gains at one.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut in_ch = 3;
    for (i, &w) in config.stage_widths.iter().enumerate() {
        let name = format!("backbone.stage{i}.conv.w");
        let rng = &mut seeded_rng(seed, &name);
        store.insert(name, init_normal(&[w, in_ch, 3, 3], in_ch * 9, rng));
        store.insert(format!("backbone.stage{i}.conv.b"), Tensor::zeros(&[w]));
        store.insert(format!("backbone.stage{i}.norm.gain"), Tensor::full(&[w], 1.0));
        store.insert(format!("backbone.stage{i}.norm.bias"), Tensor::zeros(&[w]));
        in_ch = w;
    }
    for (l, &w) in config.stage_widths.iter().skip(1).enumerate() {
        let name = format!("backbone.lateral{l}.w");
        let rng = &mut seeded_rng(seed, &name);
        store.insert(name, init_normal(&[config.channels, w, 1, 1], w, rng));
        store.insert(
            format!("backbone.lateral{l}.b"),
            Tensor::zeros(&[config.channels]),
        );
    }
    Ok(store)
}

/// Runs the encoder over a `[3, H, W]` image node; H and W must be divisible
/// by 16. The shape check happens before any computation.
pub fn extract_pyramid<'t>(
    params: &MountedParams<'t>,
    image: Var<'t>,
    config: &BackboneConfig,
) -> Result<FeaturePyramid<'t>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("image must be [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "image sides must be divisible by 16, got {h}x{w}"
        )));
    }

    let mut x = image;
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        x = x
            .conv2d(
                params.var(&format!("backbone.stage{i}.conv.w")),
                params.var(&format!("backbone.stage{i}.conv.b")),
                2,
                1,
            )
            .channel_norm(
                params.var(&format!("backbone.stage{i}.norm.gain")),
                params.var(&format!("backbone.stage{i}.norm.bias")),
                NORM_EPS,
            )
            .relu();
        stages.push(x);
    }

    let mut levels = Vec::with_capacity(3);
    for l in 0..3 {
        let level = stages[l + 1].conv2d(
            params.var(&format!("backbone.lateral{l}.w")),
            params.var(&format!("backbone.lateral{l}.b")),
            1,
            0,
        );
        let ls = level.shape();
        debug_assert_eq!(
            ls,
            vec![config.channels, h >> (l + 2), w >> (l + 2)],
            "pyramid level {l} shape"
        );
        levels.push(level);
    }
    Ok(FeaturePyramid {
        levels: [levels[0], levels[1], levels[2]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            channels: 8,
            stage_widths: [8, 8, 8, 8],
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = tiny_config();
        let a = init_backbone(&config, 0).unwrap();
        let b = init_backbone(&config, 0).unwrap();
        assert_eq!(a, b);
        let c = init_backbone(&config, 1).unwrap();
        assert_ne!(a, c);
        for (_, t) in a.iter() {
            assert!(t.is_finite());
        }
    }

    #[test]
    fn zero_channels_is_a_config_error() {
        let config = BackboneConfig {
            channels: 0,
            stage_widths: [8, 8, 8, 8],
        };
        assert!(matches!(init_backbone(&config, 0), Err(Error::Config(_))));
        let config = BackboneConfig {
            channels: 8,
            stage_widths: [8, 0, 8, 8],
        };
        assert!(matches!(init_backbone(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_shapes() {
        let config = tiny_config();
        let store = init_backbone(&config, 0).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let image = tape.input(Tensor::zeros(&[3, 128, 128]));
        let pyr = extract_pyramid(&mounted, image, &config).unwrap();
        assert_eq!(pyr.levels[0].shape(), vec![8, 32, 32]);
        assert_eq!(pyr.levels[1].shape(), vec![8, 16, 16]);
        assert_eq!(pyr.levels[2].shape(), vec![8, 8, 8]);
    }

    #[test]
    fn indivisible_sides_are_a_shape_error() {
        let config = tiny_config();
        let store = init_backbone(&config, 0).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let image = tape.input(Tensor::zeros(&[3, 130, 128]));
        assert!(matches!(
            extract_pyramid(&mounted, image, &config),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_image_with_zero_biases_yields_zero_levels() {
        let config = tiny_config();
        let store = init_backbone(&config, 3).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let image = tape.input(Tensor::zeros(&[3, 64, 64]));
        let pyr = extract_pyramid(&mounted, image, &config).unwrap();
        for lvl in &pyr.levels {
            assert!(lvl.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_difference_check_over_all_backbone_parameters() {
        let config = tiny_config();
        let store = init_backbone(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let image = Tensor::from_vec(
            &[3, 64, 64],
            (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let probes: Vec<Tensor> = [(8, 16, 16), (8, 8, 8), (8, 4, 4)]
            .iter()
            .map(|&(c, h, w)| {
                Tensor::from_vec(
                    &[c, h, w],
                    (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();

        let loss_of = |store: &ParamStore| -> f64 {
            let tape = Tape::new();
            let mounted = store.mount(&tape);
            let img = tape.input(image.clone());
            let pyr = extract_pyramid(&mounted, img, &config).unwrap();
            let mut total = pyr.levels[0].mul(tape.input(probes[0].clone())).sum();
            total = total.add(pyr.levels[1].mul(tape.input(probes[1].clone())).sum());
            total = total.add(pyr.levels[2].mul(tape.input(probes[2].clone())).sum());
            total.item()
        };

        // analytic gradients
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let img = tape.input(image.clone());
        let pyr = extract_pyramid(&mounted, img, &config).unwrap();
        let mut total = pyr.levels[0].mul(tape.input(probes[0].clone())).sum();
        total = total.add(pyr.levels[1].mul(tape.input(probes[1].clone())).sum());
        total = total.add(pyr.levels[2].mul(tape.input(probes[2].clone())).sum());
        let grads = tape.backward(total);
        let by_name = mounted.grads_by_name(&grads);

        let h = 1e-5;
        for name in store.names() {
            let analytic = &by_name[name];
            for e in 0..store.get(name).numel() {
                let mut plus = store.clone();
                plus.get_mut(name).data_mut()[e] += h;
                let mut minus = store.clone();
                minus.get_mut(name).data_mut()[e] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    err < 1e-4,
                    "{name}[{e}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
