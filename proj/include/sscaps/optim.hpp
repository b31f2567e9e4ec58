#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sscaps/network.hpp"

namespace sscaps {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a NetworkParams, optionally restricted to the parameters whose
/// names pass `select` (the pretext stage trains only "stem.*").
class Adam {
 public:
  using Selector = std::function<bool(const std::string&)>;

  Adam(const NetworkParams<float>& params, AdamConfig config = {}, Selector select = {});

  /// One update from the accumulated gradients. Returns false (and leaves
  /// parameters and moments untouched) if any selected gradient is
  /// non-finite.
  bool step(NetworkParams<float>& params, double lr);

  std::uint64_t steps_taken() const { return t_; }
  std::uint64_t steps_skipped() const { return skipped_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<std::size_t> selected_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::uint64_t t_ = 0;
  std::uint64_t skipped_ = 0;
};

/// Multiplies the learning rate by `factor` once the best validation Dice
/// has gone `patience` iterations without improving; the window then
/// restarts, so a decay happens at most once per window.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::uint64_t patience);

  /// Reports the validation Dice measured at `iteration`; returns the
  /// learning rate to use from here on.
  double observe(std::uint64_t iteration, double dice);

  double lr() const { return lr_; }
  std::size_t decays() const { return decays_; }
  double best() const { return best_; }

 private:
  double lr_;
  double factor_;
  std::uint64_t patience_;
  double best_ = -1;
  std::uint64_t anchor_ = 0;
  std::size_t decays_ = 0;
};

}  // namespace sscaps
