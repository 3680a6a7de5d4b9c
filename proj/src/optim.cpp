#include "mambaseg/optim.hpp"

#include "mambaseg/errors.hpp"

#include <cmath>
#include <limits>

namespace mambaseg {

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<Tensor<Scalar>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1 && cfg.eps > 0)) {
    throw ConfigError("Adam: need 0 <= beta < 1 and eps > 0");
  }
  for (const auto& p : params_) {
    m_.push_back(Array<Scalar>::Zero(p.numel()));
    v_.push_back(Array<Scalar>::Zero(p.numel()));
  }
}

template <typename Scalar>
void Adam<Scalar>::step(double lr) {
  if (!(lr > 0)) throw ConfigError("Adam: learning rate must be positive");
  ++t_;
  const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.numel() != m_[i].size()) {
      throw StateError("Adam: parameter " + std::to_string(i) + " changed size from " + std::to_string(m_[i].size()) +
                       " to " + std::to_string(p.numel()));
    }
    if (!p.has_grad()) {
      m_[i] *= b1;
      v_[i] *= b2;
    } else {
      const auto& g = p.grad();
      m_[i] = b1 * m_[i] + (1 - b1) * g;
      v_[i] = b2 * v_[i] + (1 - b2) * g.square();
    }
    const auto m_hat = m_[i] / static_cast<Scalar>(bc1);
    const auto v_hat = v_[i] / static_cast<Scalar>(bc2);
    p.mutable_data() -= static_cast<Scalar>(lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(cfg_.eps));
  }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

void PlateauConfig::validate() const {
  if (!(initial_lr > 0)) throw ConfigError("scheduler: lr must be positive");
  if (!(factor > 0 && factor < 1)) throw ConfigError("scheduler: plateau_factor must lie in (0,1)");
  if (patience < 1) throw ConfigError("scheduler: plateau_patience must be >= 1");
  if (!(threshold >= 0)) throw ConfigError("scheduler: threshold must be non-negative");
  if (!(min_lr >= 0)) throw ConfigError("scheduler: min_lr must be non-negative");
}

PlateauScheduler::PlateauScheduler(PlateauConfig cfg)
    : cfg_((cfg.validate(), cfg)), lr_(cfg.initial_lr), best_(-std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double score) {
  if (score > best_ + cfg_.threshold) {
    best_ = score;
    since_ = 0;
    return lr_;
  }
  if (++since_ >= cfg_.patience) {
    since_ = 0;
    const double next = lr_ * cfg_.factor;
    if (next >= cfg_.min_lr) {
      lr_ = next;
      ++reductions_;
    }
  }
  return lr_;
}

}  // namespace mambaseg
