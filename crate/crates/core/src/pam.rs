//! Bidirectional cross-view attention along image rows, validity masks and
//! occlusion filling.
//!
//! Attention tensors are laid out (N, H, W_target, W_source); validity maps and
//! features are NCHW.

use segsr_autograd::Var;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::extract::FeatureHierarchy;
use crate::nn::{expect_channels, BatchNorm2d, Conv2d, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PamConfig {
    pub softmax_temperature: f64,
    pub valid_threshold: f64,
    pub use_residual_transition: bool,
}

impl Default for PamConfig {
    fn default() -> Self {
        Self { softmax_temperature: 1.0, valid_threshold: 0.1, use_residual_transition: true }
    }
}

impl PamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite(),
            Config,
            "pam.softmax_temperature must be positive, got {}",
            self.softmax_temperature
        );
        ensure!(
            self.valid_threshold > 0.0 && self.valid_threshold < 1.0,
            Config,
            "pam.valid_threshold must lie in (0, 1), got {}",
            self.valid_threshold
        );
        Ok(())
    }
}

/// Subtracts each (n, c, h) row's mean over the width axis.
pub fn mean_subtract(f: Var<'_>) -> Var<'_> {
    f - f.mean_axes(&[3])
}

/// (N, C, H, W) → (N·H, W, C): one matrix of pixel features per image row.
fn rows(f: Var<'_>) -> Var<'_> {
    let (n, c, h, w) = f.dims4();
    f.permute(&[0, 2, 3, 1]).reshape(&[n * h, w, c])
}

/// Row-wise inner products `s(n, h, i, j) = <u(:, h, i), v(:, h, j)>`.
pub fn row_scores<'t>(u: Var<'t>, v: Var<'t>) -> Var<'t> {
    let (n, _, h, w) = u.dims4();
    rows(u).matmul(rows(v).transpose(1, 2)).reshape(&[n, h, w, w])
}

/// Row-stochastic maps in both directions.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPair<'t> {
    /// Left-view targets attending over right-view sources.
    pub r_to_l: Var<'t>,
    /// Right-view targets attending over left-view sources.
    pub l_to_r: Var<'t>,
}

/// Softmax of `scores / temperature` over sources; the reverse direction uses
/// the transposed scores.
pub fn attention_from_scores(scores: Var<'_>, temperature: f64) -> AttentionPair<'_> {
    let inv = 1.0 / temperature;
    AttentionPair {
        r_to_l: scores.mul_scalar(inv).softmax(3),
        l_to_r: scores.transpose(2, 3).mul_scalar(inv).softmax(3),
    }
}

pub fn compute_attention<'t>(f_u: Var<'t>, f_v: Var<'t>, cfg: &PamConfig) -> Result<AttentionPair<'t>> {
    let (su, sv) = (f_u.shape(), f_v.shape());
    ensure!(su.len() == 4 && su == sv, Shape, "attention inputs must share an NCHW shape, got {su:?} and {sv:?}");
    Ok(attention_from_scores(row_scores(f_u, f_v), cfg.softmax_temperature))
}

/// `out(n, c, h, w) = Σ_j m(n, h, w, j) · f(n, c, h, j)`.
pub fn warp<'t>(m: Var<'t>, f: Var<'t>) -> Var<'t> {
    let (n, c, h, w) = f.dims4();
    m.reshape(&[n * h, w, w]).matmul(rows(f)).reshape(&[n, h, w, c]).permute(&[0, 3, 1, 2])
}

/// Attention mass received by each source position, ramped to [0, 1] by
/// `threshold`. Output is (N, 1, H, W) over source positions.
pub fn valid_mask(m: Var<'_>, threshold: f64) -> Var<'_> {
    m.sum_axes(&[2]).permute(&[0, 2, 1, 3]).mul_scalar(1.0 / threshold).clamp(0.0, 1.0)
}

/// `v ⊙ warped + (1 − v) ⊙ target`, with `v` broadcast over channels.
pub fn occlusion_fill<'t>(warped: Var<'t>, target: Var<'t>, v: Var<'t>) -> Var<'t> {
    v * warped + v.neg().add_scalar(1.0) * target
}

/// Query and key features of one view, both zero-mean along width.
#[derive(Clone, Copy, Debug)]
pub struct PamFeatures<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
}

/// Everything produced by one cross-view pass.
#[derive(Clone, Copy, Debug)]
pub struct CrossView<'t> {
    /// Filled features delivered to the left view.
    pub left: Var<'t>,
    /// Filled features delivered to the right view.
    pub right: Var<'t>,
    pub attention: AttentionPair<'t>,
    pub valid_left: Var<'t>,
    pub valid_right: Var<'t>,
}

/// Shared-weight cross-view interaction block.
#[derive(Clone, Debug)]
pub struct Pam {
    bn: BatchNorm2d,
    transition: Option<(Conv2d, Conv2d)>,
    pub query: Conv2d,
    pub key: Conv2d,
    cfg: PamConfig,
    channels: usize,
}

impl Pam {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &PamConfig) -> Result<Self> {
        cfg.validate()?;
        let transition = cfg.use_residual_transition.then(|| {
            (
                Conv2d::same(store, &format!("{prefix}.resb.conv1"), channels, channels, 3),
                Conv2d::same(store, &format!("{prefix}.resb.conv2"), channels, channels, 3),
            )
        });
        Ok(Self {
            bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), channels),
            transition,
            query: Conv2d::same(store, &format!("{prefix}.query"), channels, channels, 1),
            key: Conv2d::same(store, &format!("{prefix}.key"), channels, channels, 1),
            cfg: cfg.clone(),
            channels,
        })
    }

    pub fn config(&self) -> &PamConfig {
        &self.cfg
    }

    /// Batch-norm, residual transition, then query/key 1×1 convs, each
    /// mean-subtracted along width. Statistics are per view.
    pub fn prepare<'t>(&self, ctx: &Ctx<'t, '_>, fused: Var<'t>) -> Result<PamFeatures<'t>> {
        expect_channels(fused, self.channels, "cross-view attention")?;
        let mut x = self.bn.forward(ctx, fused);
        if let Some((c1, c2)) = &self.transition {
            x = x + c2.forward(ctx, c1.forward(ctx, x).relu());
        }
        Ok(PamFeatures {
            query: mean_subtract(self.query.forward(ctx, x)),
            key: mean_subtract(self.key.forward(ctx, x)),
        })
    }

    pub fn prepare_pam_inputs<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        fused_l: Var<'t>,
        fused_r: Var<'t>,
    ) -> Result<(PamFeatures<'t>, PamFeatures<'t>)> {
        Ok((self.prepare(ctx, fused_l)?, self.prepare(ctx, fused_r)?))
    }

    /// Symmetric scores `s(i, j) = <q_L(i), k_R(j)> + <k_L(i), q_R(j)>`, so that
    /// exchanging the views transposes the score matrix exactly.
    pub fn scores<'t>(&self, left: &PamFeatures<'t>, right: &PamFeatures<'t>) -> Var<'t> {
        row_scores(left.query, right.key) + row_scores(right.query, left.key).transpose(2, 3)
    }

    pub fn interact<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        hier_l: &FeatureHierarchy<'t>,
        hier_r: &FeatureHierarchy<'t>,
    ) -> Result<CrossView<'t>> {
        let (fl, fr) = (hier_l.fused, hier_r.fused);
        ensure!(
            fl.shape() == fr.shape(),
            Shape,
            "left and right features differ in shape: {:?} vs {:?}",
            fl.shape(),
            fr.shape()
        );
        let (pl, pr) = self.prepare_pam_inputs(ctx, fl, fr)?;
        let attention = attention_from_scores(self.scores(&pl, &pr), self.cfg.softmax_temperature);
        let valid_left = valid_mask(attention.l_to_r, self.cfg.valid_threshold);
        let valid_right = valid_mask(attention.r_to_l, self.cfg.valid_threshold);
        Ok(CrossView {
            left: occlusion_fill(warp(attention.r_to_l, fr), fl, valid_left),
            right: occlusion_fill(warp(attention.l_to_r, fl), fr, valid_right),
            attention,
            valid_left,
            valid_right,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use rand::{Rng, SeedableRng};
    use segsr_autograd::{check_gradients, GradCheckOptions, Tape, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mean_subtract_cases() {
        let tape = Tape::inference();
        let row = tape.constant(Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        assert_eq!(mean_subtract(row).value().data(), &[-1.0, 0.0, 1.0]);
        let c = tape.constant(Tensor::full([1, 2, 2, 5], 0.7));
        assert!(mean_subtract(c).value().data().iter().all(|&v| v.abs() < 1e-15));
        let f = tape.constant(random(&[2, 3, 4, 5], 1));
        let once = mean_subtract(f);
        assert!(mean_subtract(once).value().max_abs_diff(&once.value()) < 1e-6);
        for v in once.mean_axes(&[3]).value().data() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn attention_single_column_is_one() {
        let tape = Tape::inference();
        let a = tape.constant(random(&[1, 3, 4, 1], 2));
        let b = tape.constant(random(&[1, 3, 4, 1], 3));
        let att = compute_attention(a, b, &PamConfig::default()).unwrap();
        assert!(att.r_to_l.value().data().iter().all(|&v| v == 1.0));
        assert!(att.l_to_r.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_two_by_two_by_hand() {
        let tape = Tape::inference();
        let u = tape.constant(Tensor::new([1, 1, 1, 2], vec![1.0, -2.0]));
        let v = tape.constant(Tensor::new([1, 1, 1, 2], vec![0.5, 3.0]));
        let att = compute_attention(u, v, &PamConfig::default()).unwrap();
        let s = [[0.5, 3.0], [-1.0, -6.0]];
        let soft = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let r0 = soft(s[0][0], s[0][1]);
        let r1 = soft(s[1][0], s[1][1]);
        let c0 = soft(s[0][0], s[1][0]);
        let c1 = soft(s[0][1], s[1][1]);
        let want_rl = [r0.0, r0.1, r1.0, r1.1];
        let want_lr = [c0.0, c0.1, c1.0, c1.1];
        for i in 0..4 {
            assert!((att.r_to_l.value().data()[i] - want_rl[i]).abs() < 1e-12);
            assert!((att.l_to_r.value().data()[i] - want_lr[i]).abs() < 1e-12);
        }
        let mismatched = tape.constant(Tensor::zeros([1, 1, 1, 3]));
        assert!(compute_attention(u, mismatched, &PamConfig::default()).is_err());
    }

    fn permutation_rows(h: usize, w: usize, perm: impl Fn(usize) -> usize) -> Tensor {
        Tensor::from_fn([1, h, w, w], |i| if perm(i[2]) == i[3] { 1.0 } else { 0.0 })
    }

    #[test]
    fn warp_cases() {
        let tape = Tape::inference();
        let f = tape.constant(random(&[1, 3, 2, 5], 4));
        let id = tape.constant(permutation_rows(2, 5, |w| w));
        assert_eq!(warp(id, f).value(), f.value());

        let shift = tape.constant(permutation_rows(2, 5, |w| (w + 1) % 5));
        let out = warp(shift, f).value();
        for c in 0..3 {
            for h in 0..2 {
                for w in 0..5 {
                    assert_eq!(out.get(&[0, c, h, w]), f.value().get(&[0, c, h, (w + 1) % 5]));
                }
            }
        }

        let uniform = tape.constant(Tensor::full([1, 2, 5, 5], 0.2));
        let out = warp(uniform, f).value();
        let means = f.mean_axes(&[3]).value();
        for c in 0..3 {
            for h in 0..2 {
                for w in 0..5 {
                    assert!((out.get(&[0, c, h, w]) - means.get(&[0, c, h, 0])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn valid_mask_cases() {
        let tape = Tape::inference();
        let id = tape.constant(permutation_rows(3, 4, |w| w));
        assert!(valid_mask(id, 0.1).value().data().iter().all(|&v| v == 1.0));
        let uniform = tape.constant(Tensor::full([1, 3, 4, 4], 0.25));
        assert!(valid_mask(uniform, 0.1).value().data().iter().all(|&v| v == 1.0));
        // every target looks at source 0: sources 1..4 receive nothing
        let collapse = tape.constant(permutation_rows(1, 4, |_| 0));
        assert_eq!(valid_mask(collapse, 0.1).value().data(), &[1.0, 0.0, 0.0, 0.0]);
        let partial = tape.constant(Tensor::full([1, 1, 4, 4], 0.0125));
        assert!(valid_mask(partial, 0.1).value().data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn occlusion_fill_cases() {
        let tape = Tape::inference();
        let a = tape.constant(random(&[1, 3, 4, 5], 5));
        let b = tape.constant(random(&[1, 3, 4, 5], 6));
        let ones = tape.constant(Tensor::ones([1, 1, 4, 5]));
        let zeros = tape.constant(Tensor::zeros([1, 1, 4, 5]));
        let half = tape.constant(Tensor::full([1, 1, 4, 5], 0.5));
        assert_eq!(occlusion_fill(a, b, ones).value(), a.value());
        assert_eq!(occlusion_fill(a, b, zeros).value(), b.value());
        let mean = a.value().zip_map(&b.value(), |x, y| (x + y) / 2.0);
        assert!(occlusion_fill(a, b, half).value().max_abs_diff(&mean) < 1e-7);
    }

    fn pam_setup(c: usize, seed: u64) -> (ParamStore, Pam) {
        let mut store = ParamStore::new();
        let pam = Pam::new(&mut store, "pam", c, &PamConfig::default()).unwrap();
        init_weights(&mut store, seed);
        (store, pam)
    }

    fn hier(f: Var<'_>) -> FeatureHierarchy<'_> {
        FeatureHierarchy { per_block: vec![f], fused: f }
    }

    #[test]
    fn prepare_shapes_and_centering() {
        let (store, pam) = pam_setup(8, 1);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(random(&[1, 8, 8, 12], 2));
        let (l, r) = pam.prepare_pam_inputs(&ctx, x, x).unwrap();
        for f in [l.query, l.key, r.query, r.key] {
            assert_eq!(f.shape(), [1, 8, 8, 12]);
            assert!(f.mean_axes(&[3]).value().data().iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn identical_views_give_identical_outputs() {
        let (store, pam) = pam_setup(4, 2);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(random(&[1, 4, 3, 6], 7));
        let out = pam.interact(&ctx, &hier(x), &hier(x)).unwrap();
        assert!(out.left.value().max_abs_diff(&out.right.value()) < 1e-5);
    }

    #[test]
    fn swapping_views_swaps_outputs() {
        let (store, pam) = pam_setup(4, 3);
        for trial in 0..5 {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, true);
            let a = tape.constant(random(&[2, 4, 3, 6], 10 + trial));
            let b = tape.constant(random(&[2, 4, 3, 6], 20 + trial));
            let ab = pam.interact(&ctx, &hier(a), &hier(b)).unwrap();
            let ba = pam.interact(&ctx, &hier(b), &hier(a)).unwrap();
            assert_eq!(ab.left.value(), ba.right.value());
            assert_eq!(ab.right.value(), ba.left.value());
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, pam) = pam_setup(4, 4);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        let a = tape.constant(random(&[1, 4, 5, 7], 1).scale(5.0));
        let b = tape.constant(random(&[1, 4, 5, 7], 2).scale(5.0));
        let out = pam.interact(&ctx, &hier(a), &hier(b)).unwrap();
        for m in [out.attention.r_to_l, out.attention.l_to_r] {
            let m = m.value();
            assert!(m.data().iter().all(|&v| v >= 0.0));
            for row in m.data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn interact_gradient() {
        let (store, pam) = pam_setup(3, 5);
        let report = check_gradients(
            &[random(&[1, 3, 4, 6], 8), random(&[1, 3, 4, 6], 9)],
            |tape, v| {
                let ctx = Ctx::new(tape, &store, true);
                let out = pam.interact(&ctx, &hier(v[0]), &hier(v[1])).unwrap();
                Var::concat(&[out.left, out.right], 1)
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn config_validation() {
        assert!(PamConfig { softmax_temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(PamConfig { valid_threshold: 1.0, ..Default::default() }.validate().is_err());
    }
}
