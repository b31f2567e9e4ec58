#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sscaps {

inline constexpr double kFiniteDifferenceStep = 1e-3;
inline constexpr double kPlainTolerance = 1e-4;
inline constexpr double kRoutingTolerance = 1e-3;

struct GradCheckResult {
  std::string name;
  double worst_rel_error = 0;
  double worst_abs_error = 0;
  std::size_t checked = 0;
  std::size_t seeds = 0;
  /// Entries passed over because a probe crossed a non-differentiable point.
  std::size_t skipped = 0;
  double tolerance = 0;
  bool passed = true;

  /// Folds another run of the same check into this one.
  void merge(const GradCheckResult& other);
};

/// Denominator floor for relative errors, as a fraction of the largest
/// analytic gradient magnitude in the tensor being checked. Entries whose
/// true gradient is ~0 would otherwise compare pure truncation error
/// against nothing.
inline constexpr double kGradScaleFloor = 1e-3;
/// Above the round-off of a central difference of an O(1) loss.
inline constexpr double kAbsoluteFloor = 1e-6;

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = kAbsoluteFloor);

/// Central differences of `loss` with respect to the entries of `x`
/// (perturbed in place and restored), compared against `analytic`.
/// At most `max_entries` entries are checked, chosen by `rng` when the
/// tensor is larger.
GradCheckResult check_gradient(const std::string& name, std::span<double> x,
                               std::span<const double> analytic,
                               const std::function<double()>& loss, double tolerance,
                               std::size_t max_entries, std::mt19937_64& rng,
                               double step = kFiniteDifferenceStep);

enum class GradScope { Tensor, Capsules, Losses, Network, All };

GradScope parse_grad_scope(const std::string& s);

struct GradSuiteOptions {
  GradScope scope = GradScope::All;
  std::size_t seeds = 20;
  std::uint64_t base_seed = 1;
  /// Parameters sampled per seed in the end-to-end network check
  /// (20 seeds x 10 = 200 by default).
  std::size_t network_params_per_seed = 10;
};

/// Runs every differentiable operation in `scope` against central
/// differences in double precision, one result per operation with the
/// worst error over all seeds.
std::vector<GradCheckResult> run_gradcheck_suite(const GradSuiteOptions& options);

}  // namespace sscaps
