#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgsc/icl_data.hpp"
#include "dgsc/loss_model.hpp"
#include "dgsc/potentials.hpp"

namespace dgsc {

struct SgldConfig {
  double epsilon = 3e-4;
  double gamma = 13.3;
  double nbeta = 66.7;
  std::size_t chains = 10;
  std::size_t steps = 5000;  // T_SGLD
  std::size_t burn_in = 1000;
  std::size_t batch_size = 1024;              // m
  std::uint64_t dataset_size = 1ULL << 20;    // μ
  std::uint64_t seed = 0;
  LossMode loss_mode = LossMode::subsequence;

  void validate() const;

  /// β̃ = εβn/2 and γ̃ = εγ/4.
  double beta_tilde() const { return epsilon * nbeta / 2.0; }
  double gamma_tilde() const { return epsilon * gamma / 4.0; }
  /// Copy of `base` with (ε, nβ, γ) set from (ε, β̃, γ̃).
  static SgldConfig from_tilde(const SgldConfig& base, double epsilon, double beta_tilde,
                               double gamma_tilde);
};

/// Sampler settings for analytic potentials: ε = 1e-5, nβ = 100, γ = 1,
/// 10 chains of T = max(10⁵, 4·10⁶/d) steps with burn-in T/5, m = 1.
SgldConfig potential_sgld_config(std::size_t dim, std::uint64_t seed = 0);

/// Chain failure modes, combinable as a bit set.
enum ChainFlag : unsigned {
  kDivergent = 1u << 0,
  kNonConverged = 1u << 1,
  kNegative = 1u << 2,
  kEscaped = 1u << 3,
};
std::vector<std::string> flag_names(unsigned flags);

/// Minibatches for the sampler. Implementations must be pure functions of
/// (chain, tau) so chains are reproducible and order-independent.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual DataBatch minibatch(std::size_t chain, std::size_t tau) const = 0;
  /// Fixed batch on which ℓ(w*) is evaluated.
  virtual DataBatch reference() const = 0;
};

/// For models that ignore their batch (analytic potentials).
class NullBatchSource final : public BatchSource {
 public:
  DataBatch minibatch(std::size_t, std::size_t) const override { return {}; }
  DataBatch reference() const override { return {}; }
};

/// Minibatches of size m drawn with replacement from a virtual dataset of
/// μ contexts; the draw for (chain, tau) comes from stream
/// (seed, "sgld-batch", chain).substream(tau).
class DatasetBatchSource final : public BatchSource {
 public:
  DatasetBatchSource(const DataConfig& data, const SgldConfig& cfg);
  DataBatch minibatch(std::size_t chain, std::size_t tau) const override;
  DataBatch reference() const override { return reference_; }
  const FixedDataset& dataset() const { return dataset_; }

 private:
  FixedDataset dataset_;
  std::size_t m_;
  std::uint64_t seed_;
  DataBatch reference_;
};

struct ChainResult {
  std::vector<double> losses;   // ℓ_m(w_τ), τ = 1..T (truncated when divergent)
  double max_excursion = 0.0;   // max ‖w_τ − w*‖
  bool divergent = false;
};

/// One SGLD chain from w₁ = w*:
///   w ← w − (ε/2)(nβ∇ℓ_m(w) + (γ/2)(w − w*)) + N(0, ε).
ChainResult run_chain(const LossModel& model, std::span<const double> w_star,
                      const SgldConfig& cfg, std::size_t chain, const BatchSource& source);

/// λ̂_τ = ((τ−1)λ̂_{τ−1} + nβ(ℓ_τ − ℓ₀))/τ with λ̂₀ = 0; returns λ̂₁..λ̂_T.
std::vector<double> online_trace(std::span<const double> losses, double nbeta, double init_loss);

struct ChainSummary {
  std::span<const double> losses;
  std::span<const double> running;  // online trace
  double init_loss = 0.0;
  double lambda = 0.0;              // the chain's post-burn-in estimate
  double across_chain_std = 0.0;
  double max_excursion = 0.0;
  bool truncated = false;
};

/// divergent: truncated, any non-finite value, or |λ̂_τ| > 1e6.
/// non_converged: OLS slope of λ̂_τ over the last 20% exceeds 1% of |λ̂| per
/// 100 steps. negative: λ < −2·across-chain std. escaped: post-burn-in mean
/// loss below init_loss by more than twice the post-burn-in loss std.
unsigned diagnose_chain(const ChainSummary& chain, const SgldConfig& cfg);

struct LlcEstimate {
  double lambda_hat = 0.0;
  double lambda_std = 0.0;               // across non-divergent chains
  std::vector<double> per_chain;
  std::vector<std::vector<double>> losses;
  std::vector<std::vector<double>> traces;  // online λ̂_τ per chain
  std::vector<unsigned> chain_flags;
  unsigned flags = 0;                    // union over chains
  double init_loss = 0.0;
};

/// λ̂ = nβ·(mean post-burn-in loss over non-divergent chains − ℓ(w*)), with
/// ℓ(w*) on the source's reference batch. Throws EstimationError when every
/// chain diverges.
LlcEstimate estimate_llc(const LossModel& model, std::span<const double> w_star,
                         const SgldConfig& cfg, const BatchSource& source);

struct CalibrationPoint {
  double epsilon = 0.0;
  double beta_tilde = 0.0;
  double gamma_tilde = 0.0;
  double lambda_hat = 0.0;
  double lambda_std = 0.0;
  unsigned flags = 0;
  bool admissible() const { return flags == 0; }
};

struct CalibrationGrid {
  std::vector<double> epsilons;
  std::vector<double> beta_tildes;
  std::vector<double> gamma_tildes;
};

/// ε ∈ {5e-6, 1e-5, 2e-5} × β̃ ∈ {5e-4, 1e-3} × γ̃ ∈ {2.5e-6, 5e-6}.
CalibrationGrid potential_calibration_grid();

/// ε ∈ {1e-4, 3e-4, 1e-3} with β̃ and γ̃ at ½, 1 and 2 times those of `base`.
CalibrationGrid model_calibration_grid(const SgldConfig& base);

struct CalibrationResult {
  std::vector<CalibrationPoint> points;
  /// Index into points of the recommendation, if any group is admissible.
  std::optional<std::size_t> recommended;
  /// (max − min)/|mean| of λ̂ across ε within the recommended (β̃, γ̃) group.
  double recommended_variation = 0.0;
};

/// Runs estimate_llc on every grid point. A (β̃, γ̃) group is admissible when
/// all its points are, and ε-robust when its λ̂ variation across ε is at most
/// `robust_tol`. Among robust groups the smallest γ̃ wins, then the largest
/// β̃; without a robust group the least varying admissible group wins. The
/// recommendation is the winner's median-ε point.
CalibrationResult calibration_sweep(const LossModel& model, std::span<const double> w_star,
                                    const SgldConfig& base, const CalibrationGrid& grid,
                                    const BatchSource& source, double robust_tol = 0.1);

struct CurvePoint {
  std::uint64_t step = 0;
  double lambda_hat = 0.0;
  double lambda_std = 0.0;  // across chains
  double init_loss = 0.0;
  unsigned flags = 0;
  bool ok = true;
  std::string error;  // set when !ok
};

struct CheckpointRef {
  std::uint64_t step = 0;
  std::function<std::vector<double>()> load;
};

/// estimate_llc at every checkpoint with the same seed, so noise and batch
/// schedules match across checkpoints. Failures become gap entries.
std::vector<CurvePoint> estimate_llc_curve(const LossModel& model,
                                           const std::vector<CheckpointRef>& checkpoints,
                                           const SgldConfig& cfg, const BatchSource& source);

struct VolumeFit {
  double lambda = 0.0;
  double std_error = 0.0;
  double intercept = 0.0;
  std::vector<double> epsilons;
  std::vector<double> volumes;  // fraction of ball volume times ball volume
  std::vector<std::uint64_t> hits;
  std::uint64_t samples = 0;
};

struct VolumeOptions {
  double ball_radius = 1.0;
  std::vector<double> epsilons;        // ≥ 6 log-spaced values
  std::uint64_t samples = 1u << 20;   // initial sample count
  std::uint64_t max_samples = 1ULL << 31;
  std::uint64_t min_hits = 100;
  std::uint64_t seed = 0;
};

/// log-spaced grid of n values from lo to hi.
std::vector<double> log_grid(double lo, double hi, std::size_t n);

/// Monte-Carlo estimate of V(ε) = vol{w ∈ ball : ℓ(w) − ℓ(w*) < ε} and an OLS
/// fit of log V against log ε. Doubles the sample count until every ε has at
/// least min_hits hits; throws EstimationError("insufficient_hits …") if the
/// cap is reached first.
VolumeFit volume_llc_oracle(const AnalyticPotential& p, const VolumeOptions& opts);

}  // namespace dgsc
