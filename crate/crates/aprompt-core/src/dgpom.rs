//! Distribution-guided proposal offsets.
//!
//! A fixed grid of proposals (one per stride-4 cell center) is shifted twice:
//! first by offsets predicted from a distribution-decoded shallow feature map
//! (the deform stage), then by a regression head reading multi-level samples
//! at the deformed locations. A softplus density head over the same decoded
//! features carries a count supervision signal so the deform stage can pick
//! up where instances tend to lie.
//!
//! Both offset heads have zero-initialized final layers: before any optimizer
//! step the deformed proposals equal the grid bitwise, which makes the
//! module-off and module-at-init configurations indistinguishable.

use crate::autodiff::{self, Var};
use crate::backbone::{FeaturePyramid, LEVEL_STRIDES};
use crate::error::{Error, Result};
use crate::params::{init_normal, seeded_rng, MountedParams, ParamStore};
use crate::tensor::Tensor;

/// Proposal-path widths; the hidden width of both offset heads equals the
/// pyramid channel count.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DgpomConfig {
    pub channels: usize,
}

/// Snapshot of the proposal stages for one forward pass.
///
/// `deformed = initial + deform_offsets` and `points = deformed +
/// reg_offsets` hold exactly (same additions, element by element).
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub initial: Tensor,
    pub deform_offsets: Tensor,
    pub deformed: Tensor,
    pub reg_offsets: Tensor,
    pub points: Tensor,
}

/// Grid of proposals at the centers of `stride`-sized cells, row-major.
pub fn make_proposal_grid(height: usize, width: usize, stride: usize) -> Result<Tensor> {
    if stride == 0 || height % stride != 0 || width % stride != 0 {
        return Err(Error::Shape(format!(
            "stride {stride} must divide image {height}x{width}"
        )));
    }
    let (rows, cols) = (height / stride, width / stride);
    let mut grid = Tensor::zeros(&[rows * cols, 2]);
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            grid.set2(k, 0, (j as f64 + 0.5) * stride as f64);
            grid.set2(k, 1, (i as f64 + 0.5) * stride as f64);
        }
    }
    Ok(grid)
}

/// Parameters of the distribution decoder, deform head, and density head.
pub fn init_dgpom(config: &DgpomConfig, seed: u64) -> Result<ParamStore> {
    let c = config.channels;
    if c == 0 {
        return Err(Error::Config("dgpom channel count must be positive".into()));
    }
    let mut store = ParamStore::new();
    for i in 0..2 {
        let name = format!("dgpom.decode.conv{i}.w");
        let rng = &mut seeded_rng(seed, &name);
        store.insert(name, init_normal(&[c, c, 3, 3], c * 9, rng));
        store.insert(format!("dgpom.decode.conv{i}.b"), Tensor::zeros(&[c]));
    }
    let name = "dgpom.deform.fc0.w";
    store.insert(name, init_normal(&[c, c], c, &mut seeded_rng(seed, name)));
    store.insert("dgpom.deform.fc0.b", Tensor::zeros(&[c]));
    // final layer starts at zero: step-0 offsets are exactly zero
    store.insert("dgpom.deform.fc1.w", Tensor::zeros(&[c, 2]));
    store.insert("dgpom.deform.fc1.b", Tensor::zeros(&[2]));
    let name = "dgpom.density.w";
    store.insert(name, init_normal(&[1, c, 1, 1], c, &mut seeded_rng(seed, name)));
    store.insert("dgpom.density.b", Tensor::zeros(&[1]));
    Ok(store)
}

/// Parameters of the point regression head, present in every configuration
/// (with the proposal-offset path disabled it reads the raw grid).
pub fn init_reg_head(config: &DgpomConfig, seed: u64) -> Result<ParamStore> {
    let c = config.channels;
    if c == 0 {
        return Err(Error::Config("regression channel count must be positive".into()));
    }
    let mut store = ParamStore::new();
    let name = "reghead.fc0.w";
    store.insert(name, init_normal(&[3 * c, c], 3 * c, &mut seeded_rng(seed, name)));
    store.insert("reghead.fc0.b", Tensor::zeros(&[c]));
    store.insert("reghead.fc1.w", Tensor::zeros(&[c, 2]));
    store.insert("reghead.fc1.b", Tensor::zeros(&[2]));
    Ok(store)
}

/// Two conv + rectifier stages over the shallow level: the distribution
/// decoder. Output is non-negative and keeps the spatial size.
pub fn distribution_decode<'t>(params: &MountedParams<'t>, shallow: Var<'t>) -> Var<'t> {
    shallow
        .conv2d(
            params.var("dgpom.decode.conv0.w"),
            params.var("dgpom.decode.conv0.b"),
            1,
            1,
        )
        .relu()
        .conv2d(
            params.var("dgpom.decode.conv1.w"),
            params.var("dgpom.decode.conv1.b"),
            1,
            1,
        )
        .relu()
}

/// Bilinear sampling with input validation; see
/// [`autodiff::bilinear_sample`] for the interpolation contract.
pub fn bilinear_sample<'t>(features: Var<'t>, coords: Var<'t>, stride: f64) -> Result<Var<'t>> {
    if !coords.value().is_finite() {
        return Err(Error::Numeric("sample coordinates contain NaN".into()));
    }
    Ok(autodiff::bilinear_sample(features, coords, stride))
}

/// Samples the decoded shallow map at the grid and predicts per-proposal
/// offsets; returns `(offsets, deformed)` with `deformed = grid + offsets`.
pub fn deform_proposals<'t>(
    params: &MountedParams<'t>,
    decoded_shallow: Var<'t>,
    grid: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let sampled = bilinear_sample(decoded_shallow, grid, LEVEL_STRIDES[0])?;
    let hidden = autodiff::linear(
        sampled,
        params.var("dgpom.deform.fc0.w"),
        params.var("dgpom.deform.fc0.b"),
    )
    .relu();
    let offsets = autodiff::linear(
        hidden,
        params.var("dgpom.deform.fc1.w"),
        params.var("dgpom.deform.fc1.b"),
    );
    Ok((offsets, grid.add(offsets)))
}

/// Multi-level samples at the deformed proposals plus the regression output.
pub struct RegressOutput<'t> {
    /// Concatenated per-level samples at the deformed proposals, `[K, 3·C]`.
    pub embedding: Var<'t>,
    pub offsets: Var<'t>,
    pub points: Var<'t>,
}

/// Samples all three pyramid levels at the deformed proposals, concatenates,
/// and regresses final point offsets; `points = deformed + offsets`.
pub fn regress_points<'t>(
    params: &MountedParams<'t>,
    pyramid: &FeaturePyramid<'t>,
    deformed: Var<'t>,
) -> Result<RegressOutput<'t>> {
    let mut parts = Vec::with_capacity(3);
    for (level, stride) in pyramid.levels.iter().zip(LEVEL_STRIDES) {
        parts.push(bilinear_sample(*level, deformed, stride)?);
    }
    let embedding = Var::concat_cols(&parts);
    let hidden = autodiff::linear(
        embedding,
        params.var("reghead.fc0.w"),
        params.var("reghead.fc0.b"),
    )
    .relu();
    let offsets = autodiff::linear(
        hidden,
        params.var("reghead.fc1.w"),
        params.var("reghead.fc1.b"),
    );
    Ok(RegressOutput {
        embedding,
        offsets,
        points: deformed.add(offsets),
    })
}

/// Non-negative density map over the decoded shallow features (1×1 conv
/// followed by softplus), shape `[1, H/4, W/4]`.
pub fn density_map<'t>(params: &MountedParams<'t>, decoded_shallow: Var<'t>) -> Var<'t> {
    decoded_shallow
        .conv2d(params.var("dgpom.density.w"), params.var("dgpom.density.b"), 1, 0)
        .softplus()
}

/// Count loss `|Σ D - n|`: the mean absolute error of the single
/// (density mass, instance count) pair.
pub fn count_loss<'t>(density: Var<'t>, n: f64) -> Result<Var<'t>> {
    if !n.is_finite() || n < 0.0 {
        return Err(Error::Argument(format!(
            "instance count must be finite and non-negative, got {n}"
        )));
    }
    Ok(density.sum().abs_sub_const(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_closed_forms() {
        let g = make_proposal_grid(8, 8, 4).unwrap();
        assert_eq!(g.shape(), &[4, 2]);
        assert_eq!(g.data(), &[2.0, 2.0, 6.0, 2.0, 2.0, 6.0, 6.0, 6.0]);
        let g = make_proposal_grid(128, 128, 4).unwrap();
        assert_eq!(g.rows(), 1024);
        assert!(matches!(
            make_proposal_grid(10, 8, 4),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_zero_input_zero_biases_is_zero() {
        let config = DgpomConfig { channels: 8 };
        let store = init_dgpom(&config, 0).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let zero = tape.input(Tensor::zeros(&[8, 6, 6]));
        let out = distribution_decode(&mounted, zero);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_output_is_non_negative() {
        let config = DgpomConfig { channels: 8 };
        let store = init_dgpom(&config, 1).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::from_vec(
            &[8, 5, 5],
            (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let out = distribution_decode(&mounted, tape.input(input));
        assert!(out.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decode_hand_traced_center_only_kernels() {
        // 3×3 kernels whose only nonzero entry is the center act as 1×1
        // channel mixes, so each pixel is two matrix-vector+relu steps.
        let config = DgpomConfig { channels: 8 };
        let mut store = init_dgpom(&config, 0).unwrap();
        // overwrite with a hand-set 2-channel system embedded in 8 channels
        let w1 = [[1.0, -1.0], [0.5, 2.0]];
        let w2 = [[-0.5, 1.5], [1.0, 0.25]];
        for (name, w) in [("dgpom.decode.conv0.w", w1), ("dgpom.decode.conv1.w", w2)] {
            let mut t = Tensor::zeros(&[8, 8, 3, 3]);
            for (o, row) in w.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    t.set4(o, i, 1, 1, v);
                }
            }
            *store.get_mut(name) = t;
        }
        let mut input = Tensor::zeros(&[8, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    input.set3(c, y, x, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let out = distribution_decode(&mounted, tape.input(input.clone()));
        // independent per-pixel trace
        for y in 0..4 {
            for x in 0..4 {
                let v = [input.at3(0, y, x), input.at3(1, y, x)];
                let h = [
                    (w1[0][0] * v[0] + w1[0][1] * v[1]).max(0.0),
                    (w1[1][0] * v[0] + w1[1][1] * v[1]).max(0.0),
                ];
                let o = [
                    (w2[0][0] * h[0] + w2[0][1] * h[1]).max(0.0),
                    (w2[1][0] * h[0] + w2[1][1] * h[1]).max(0.0),
                ];
                assert!((out.value().at3(0, y, x) - o[0]).abs() < 1e-12);
                assert!((out.value().at3(1, y, x) - o[1]).abs() < 1e-12);
                for c in 2..8 {
                    assert_eq!(out.value().at3(c, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn bilinear_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fmap = Tensor::from_vec(
            &[3, 5, 5],
            (0..75).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        );
        let stride = 4.0;
        let mut coords = Tensor::zeros(&[100, 2]);
        for i in 0..100 {
            coords.set2(i, 0, rng.gen_range(-6.0..26.0));
            coords.set2(i, 1, rng.gen_range(-6.0..26.0));
        }
        let tape = Tape::new();
        let out = bilinear_sample(tape.input(fmap.clone()), tape.input(coords.clone()), stride)
            .unwrap();
        // independent 4-neighbor weighted sum
        for i in 0..100 {
            let u = (coords.at2(i, 0) / stride - 0.5).clamp(0.0, 4.0);
            let v = (coords.at2(i, 1) / stride - 0.5).clamp(0.0, 4.0);
            let x0 = (u.floor() as usize).min(3);
            let y0 = (v.floor() as usize).min(3);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            for c in 0..3 {
                let expect = (1.0 - fy) * (1.0 - fx) * fmap.at3(c, y0, x0)
                    + (1.0 - fy) * fx * fmap.at3(c, y0, x0 + 1)
                    + fy * (1.0 - fx) * fmap.at3(c, y0 + 1, x0)
                    + fy * fx * fmap.at3(c, y0 + 1, x0 + 1);
                let got = out.value().at2(i, c);
                assert!(
                    (got - expect).abs() < 1e-12,
                    "coord {i} channel {c}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn bilinear_rejects_nan() {
        let tape = Tape::new();
        let f = tape.input(Tensor::zeros(&[1, 2, 2]));
        let c = tape.input(Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]));
        assert!(matches!(
            bilinear_sample(f, c, 4.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn fresh_deform_layer_is_identity_bitwise() {
        let config = DgpomConfig { channels: 8 };
        let store = init_dgpom(&config, 9).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shallow = Tensor::from_vec(
            &[8, 4, 4],
            (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let decoded = distribution_decode(&mounted, tape.input(shallow));
        let grid = make_proposal_grid(16, 16, 4).unwrap();
        let gv = tape.input(grid.clone());
        let (offsets, deformed) = deform_proposals(&mounted, decoded, gv).unwrap();
        assert!(offsets.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(*deformed.value(), grid);
    }

    #[test]
    fn constant_offsets_shift_exactly() {
        let config = DgpomConfig { channels: 8 };
        let mut store = init_dgpom(&config, 0).unwrap();
        *store.get_mut("dgpom.deform.fc1.b") = Tensor::from_vec(&[2], vec![1.0, -2.0]);
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let decoded = tape.input(Tensor::zeros(&[8, 4, 4]));
        let grid = tape.input(Tensor::from_vec(&[1, 2], vec![10.0, 10.0]));
        let (offsets, deformed) = deform_proposals(&mounted, decoded, grid).unwrap();
        assert_eq!(offsets.value().data(), &[1.0, -2.0]);
        assert_eq!(deformed.value().data(), &[11.0, 8.0]);
    }

    fn tiny_pyramid(tape: &Tape, rng: &mut ChaCha8Rng) -> FeaturePyramid<'_> {
        let mk = |c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng| {
            Tensor::from_vec(
                &[c, h, w],
                (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        FeaturePyramid {
            levels: [
                tape.input(mk(8, 8, 8, rng)),
                tape.input(mk(8, 4, 4, rng)),
                tape.input(mk(8, 2, 2, rng)),
            ],
        }
    }

    #[test]
    fn zero_reg_head_keeps_points_at_deformed() {
        let config = DgpomConfig { channels: 8 };
        let store = init_reg_head(&config, 0).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pyr = tiny_pyramid(&tape, &mut rng);
        let grid = make_proposal_grid(32, 32, 4).unwrap();
        let deformed = tape.input(grid.clone());
        let out = regress_points(&mounted, &pyr, deformed).unwrap();
        assert_eq!(*out.points.value(), grid);
        assert_eq!(out.offsets.value().shape(), &[64, 2]);
        assert_eq!(out.embedding.value().shape(), &[64, 24]);
    }

    #[test]
    fn density_and_count_loss_values() {
        let tape = Tape::new();
        let d = tape.input(Tensor::full(&[1, 2, 3], 2.0)); // mass 12
        assert_eq!(count_loss(d, 12.0).unwrap().item(), 0.0);
        let d = tape.input(Tensor::full(&[1, 2, 5], 1.0)); // mass 10
        assert_eq!(count_loss(d, 12.0).unwrap().item(), 2.0);
        assert!(matches!(
            count_loss(d, -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn count_loss_gradient_is_sign_of_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = Tensor::from_vec(
            &[1, 3, 3],
            (0..9).map(|_| rng.gen_range(0.1..2.0)).collect(),
        );
        let n = 4.0;
        let tape = Tape::new();
        let d = tape.input(base.clone());
        let loss = count_loss(d, n).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.wrt(d);
        let sign = (base.sum() - n).signum();
        let h = 1e-6;
        for e in 0..base.numel() {
            assert_eq!(analytic.data()[e], sign);
            let mut plus = base.clone();
            plus.data_mut()[e] += h;
            let mut minus = base.clone();
            minus.data_mut()[e] -= h;
            let numeric = ((plus.sum() - n).abs() - (minus.sum() - n).abs()) / (2.0 * h);
            assert!((analytic.data()[e] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn density_map_is_positive_and_shaped() {
        let config = DgpomConfig { channels: 8 };
        let store = init_dgpom(&config, 11).unwrap();
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let decoded = tape.input(Tensor::from_vec(
            &[8, 6, 7],
            (0..336).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let d = density_map(&mounted, decoded);
        assert_eq!(d.value().shape(), &[1, 6, 7]);
        assert!(d.value().data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }
}
