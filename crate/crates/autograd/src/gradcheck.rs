//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates sampled per input; inputs with fewer entries are checked exhaustively.
    pub max_coords: usize,
    /// Seeds both the output projection and the coordinate sample.
    pub seed: u64,
    /// Multiplier applied to the analytic gradient before comparison. Anything
    /// other than 1.0 deliberately corrupts the check (negative control).
    pub analytic_scale: f64,
    /// Denominator floor as a fraction of the largest numeric gradient magnitude,
    /// so near-zero components are judged on the overall gradient scale.
    pub relative_floor: f64,
    /// A coordinate whose central differences at `step` and `step / 2` disagree
    /// by more than this (relative) straddles a non-differentiable point, such
    /// as a ReLU kink, and is excluded from the comparison.
    pub kink_tolerance: f64,
    /// Largest fraction of excluded coordinates for which the check can pass.
    pub max_kink_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: 24,
            seed: 0,
            analytic_scale: 1.0,
            relative_floor: 1e-3,
            kink_tolerance: 1e-3,
            max_kink_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates excluded as non-smooth; not part of `coords_checked`.
    pub coords_skipped: usize,
    pub max_kink_fraction: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        let total = self.coords_checked + self.coords_skipped;
        self.coords_checked > 0
            && self.max_rel_error <= tol
            && self.coords_skipped as f64 <= self.max_kink_fraction * total as f64
    }
}

/// Compares the analytic gradient of `⟨r, f(inputs)⟩`, for a fixed random
/// projection `r`, with central differences on sampled input coordinates.
///
/// Coordinates where halving the step changes the central difference by more
/// than `kink_tolerance` are treated as non-smooth and skipped.
///
/// Relative error at a coordinate is `|analytic − numeric| / max(|numeric|, floor)`
/// where `floor = relative_floor · max|numeric|` over all sampled coordinates.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let out_shape = out.shape();
    let projection = Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0));
    let grads = tape.backward_with(out, projection.clone());
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let objective = |xs: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars).value();
        y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };

    let mut pairs = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let plus = objective(&work);
            work[i].data_mut()[c] = orig - opts.step;
            let minus = objective(&work);
            let half = opts.step / 2.0;
            work[i].data_mut()[c] = orig + half;
            let half_plus = objective(&work);
            work[i].data_mut()[c] = orig - half;
            let half_minus = objective(&work);
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let numeric_half = (half_plus - half_minus) / opts.step;
            pairs.push((i, c, analytic[i].data()[c] * opts.analytic_scale, numeric, numeric_half));
        }
    }

    let scale = pairs.iter().map(|p| p.3.abs()).fold(0.0, f64::max);
    let floor = (opts.relative_floor * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coords_checked: 0,
        coords_skipped: 0,
        max_kink_fraction: opts.max_kink_fraction,
    };
    for (i, c, a, n, n_half) in pairs {
        if (n - n_half).abs() > opts.kink_tolerance * n.abs().max(floor) {
            report.coords_skipped += 1;
            continue;
        }
        report.coords_checked += 1;
        let abs = (a - n).abs();
        let rel = abs / n.abs().max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((i, c));
        }
    }
    report
}
