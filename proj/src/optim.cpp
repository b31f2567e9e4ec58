#include "sscaps/optim.hpp"

#include <cmath>

namespace sscaps {

Adam::Adam(const NetworkParams<float>& params, AdamConfig config, Selector select)
    : config_(config) {
  for (std::size_t i = 0; i < params.params().size(); ++i) {
    if (select && !select(params.param_names()[i])) continue;
    selected_.push_back(i);
    const std::size_t n = params.params()[i].value.size();
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

bool Adam::step(NetworkParams<float>& params, double lr) {
  for (auto i : selected_) {
    if (!params.params()[i].grad.all_finite()) {
      ++skipped_;
      return false;
    }
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t s = 0; s < selected_.size(); ++s) {
    auto& gp = params.params()[selected_[s]];
    float* w = gp.value.raw();
    const float* g = gp.grad.raw();
    float* m = m_[s].data();
    float* v = v_[s].data();
    for (std::size_t k = 0; k < gp.value.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1 - b1) * gk;
      const double vk = b2 * v[k] + (1 - b2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + config_.eps));
    }
  }
  return true;
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::uint64_t patience)
    : lr_(lr), factor_(factor), patience_(patience) {}

double PlateauScheduler::observe(std::uint64_t iteration, double dice) {
  if (dice > best_) {
    best_ = dice;
    anchor_ = iteration;
  } else if (iteration - anchor_ >= patience_) {
    lr_ *= factor_;
    ++decays_;
    anchor_ = iteration;
  }
  return lr_;
}

}  // namespace sscaps
