#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgsc/loss_model.hpp"

namespace dgsc {

struct LlcSeriesPoint {
  std::uint64_t t = 0;
  double lambda_hat = 0.0;
  double std = 0.0;       // across-chain spread of λ̂
  double loss = NAN;      // test loss ℓ̂ at t, for stage tables
};

struct SmoothedCurve {
  std::vector<std::size_t> index;  // rows of LlcCurve::points that were fitted
  std::vector<double> log_t;       // log10 t
  std::vector<double> mean;
  std::vector<double> derivative;  // d mean / d log10 t
  std::vector<double> derivative_std;
  double length_scale = 1.0;
  double signal_variance = 0.0;
  double slope = 0.0;      // posterior mean of the linear mean function
  double intercept = 0.0;
};

struct LlcCurve {
  std::vector<LlcSeriesPoint> points;
  std::optional<SmoothedCurve> smoothed;
};

struct SmoothingOptions {
  double length_scale = 1.0;     // in log10-step units
  double noise_variance = -1.0;  // < 0: per-point std²
  double signal_variance = -1.0; // < 0: restricted maximum likelihood
};

/// GP regression of λ̂ on log10 t with a squared-exponential kernel and an
/// explicit linear mean function under a vague prior. Mean and derivative are
/// analytic posterior quantities. Points with t = 0 or non-finite λ̂ are
/// skipped. Requires ≥ 5 usable points (ConfigError). A singular kernel
/// matrix is retried with growing jitter before raising EstimationError.
LlcCurve smooth_curve(const LlcCurve& curve, const SmoothingOptions& opts = {});

enum class BoundaryKind { zero_crossing, saddle_plateau };
std::string to_string(BoundaryKind k);

struct StageBoundary {
  std::uint64_t t = 0;
  std::size_t index = 0;  // row in LlcCurve::points
  BoundaryKind kind = BoundaryKind::saddle_plateau;
  double derivative_value = 0.0;
};

/// Default saddle tolerance: `fraction` × max |derivative|.
double default_tolerance(const SmoothedCurve& s, double fraction = 0.05);

/// Interior zero crossings of the smoothed derivative (at each sign change,
/// the point with smaller |d|) plus interior local minima of |d| below
/// `tolerance`; sorted by t. Candidates connected by a run of points with
/// |d| < tolerance form one flat region, extended over the neighbouring points
/// with |d| < tolerance, and yield a single boundary at the point nearest the
/// region's midpoint in log t. A negative tolerance selects the default.
std::vector<StageBoundary> detect_boundaries(const LlcCurve& curve, double tolerance = -1.0);

/// Synthetic monotone staircase over log10 t: flat (zero-slope) points at
/// `plateaus` (log10 steps), a rise of `height` between consecutive plateaus,
/// plus Gaussian noise with standard deviation `noise_std` (also reported as
/// each point's std). Loss is −λ/100. Step 0 is placed at log10 t = 0, where
/// the noiseless curve is 0.
LlcCurve staircase_fixture(std::span<const std::uint64_t> steps, std::span<const double> plateaus,
                           double height, double noise_std, std::uint64_t seed);

struct StageRow {
  std::uint64_t start_t = 0;
  std::uint64_t end_t = 0;
  double delta_loss = 0.0;    // ℓ̂(end) − ℓ̂(start), raw series
  double delta_lambda = 0.0;  // λ̂(end) − λ̂(start), raw series
};

/// Consecutive intervals between the first point, each boundary, and the last.
std::vector<StageRow> stage_table(const LlcCurve& curve, const std::vector<StageBoundary>& b);
/// "1k", "40k", "126k", plain integers below 1000.
std::string format_step(std::uint64_t t);
/// Fixed-width text rendering: End-t / Δℓ̂ / Δλ̂ with %+.3g deltas.
std::string render_stage_table(const std::vector<StageRow>& rows);

struct HessianStats {
  double trace = 0.0;
  double trace_stderr = 0.0;
  std::size_t samples = 0;
  double max_eigenvalue = 0.0;
  double residual = 0.0;  // ‖Hv − λv‖ at the returned eigenpair
  bool converged = false;
  std::size_t iterations = 0;
};

struct HessianOptions {
  std::size_t hutchinson_samples = 20;
  std::size_t power_iters = 100;
  double tolerance = 1e-6;  // relative residual for convergence
  std::uint64_t seed = 0;
};

/// Hutchinson trace estimate with Rademacher probes and the largest
/// eigenvalue by power iteration on hvp (shifted when the dominant eigenvalue
/// is negative; one restart from a fresh vector on non-convergence).
HessianStats hessian_stats(const LossModel& model, std::span<const double> params,
                           const DataBatch& batch, const HessianOptions& opts = {});

struct FreeEnergyMinimum {
  double loss = 0.0;
  double llc = 0.0;
  std::string label;
};

enum class Dominance {
  crossover,      // W1 preferred until n_crit, W2 after
  w1_always,
  w2_always,
  w1_eventually,  // W2 preferred for small n, W1 for large n
  tie,
};
std::string to_string(Dominance d);

struct Crossover {
  std::optional<double> n_crit;
  Dominance dominance = Dominance::tie;
};

/// F_n(W) ≈ nℓ + λ log n. Returns the n ≥ 2 beyond which F_n(W₂) < F_n(W₁)
/// for all larger n, when W₁ is preferred somewhere on [2, n_crit].
Crossover free_energy_crossover(const FreeEnergyMinimum& w1, const FreeEnergyMinimum& w2);

}  // namespace dgsc
