#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "psvit/model.hpp"

namespace psvit {

// Linear warmup from 0 to the base rate, then cosine decay to 0 at the final
// step. Steps past the schedule clamp to the final value.
struct LrSchedule {
  double base_lr = 5e-4;
  int warmup_epochs = 5;
  int total_epochs = 300;
  int steps_per_epoch = 1;

  void validate() const {
    if (base_lr < 0) throw std::invalid_argument("schedule: base lr must be >= 0");
    if (steps_per_epoch < 1 || total_epochs < 1) throw std::invalid_argument("schedule: empty schedule");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs) {
      throw std::invalid_argument("schedule: warmup must be shorter than the total run");
    }
  }

  double lr_at(long step) const {
    validate();
    const long warmup_steps = static_cast<long>(warmup_epochs) * steps_per_epoch;
    const long total_steps = static_cast<long>(total_epochs) * steps_per_epoch;
    if (step < 0) throw std::invalid_argument("schedule: negative step");
    if (step >= total_steps) return 0.0;
    if (warmup_steps > 0 && step <= warmup_steps) {
      return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
  }
};

// AdamW with decoupled weight decay: theta <- theta - lr*wd*theta applied
// separately from the bias-corrected moment update. Decay skips entries the
// store marks exempt (norm scales, biases, class token).
template <typename S>
class AdamWT {
public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamWT(const ParamStoreT<S>& store, Hyper hyper = {}) : hyper_(hyper) {
    for (const auto& e : store.entries()) {
      slots_.push_back({e.path, std::vector<S>(e.tensor->size(), S(0)),
                        std::vector<S>(e.tensor->size(), S(0))});
    }
  }

  long step_count() const { return step_; }
  const Hyper& hyper() const { return hyper_; }

  void step(ParamStoreT<S>& store, double lr) {
    if (store.size() != slots_.size()) {
      throw std::invalid_argument("adamw: store layout changed under the optimizer");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (size_t k = 0; k < slots_.size(); ++k) {
      const auto& entry = store.entries()[k];
      auto& slot = slots_[k];
      if (slot.path != entry.path) throw std::invalid_argument("adamw: store order changed under the optimizer");
      auto& tensor = *entry.tensor;
      if (!tensor.has_grad()) {
        if (entry.decay && hyper_.weight_decay != 0.0) {
          throw std::invalid_argument("adamw: missing gradient for decayed parameter " + entry.path);
        }
        continue;
      }
      const auto& g = tensor.grad();
      const double decay = entry.decay ? hyper_.weight_decay : 0.0;
      for (size_t i = 0; i < tensor.size(); ++i) {
        if (decay != 0.0) tensor[i] -= static_cast<S>(lr * decay * tensor[i]);
        slot.m[i] = static_cast<S>(hyper_.beta1 * slot.m[i] + (1.0 - hyper_.beta1) * g[i]);
        slot.v[i] = static_cast<S>(hyper_.beta2 * slot.v[i] + (1.0 - hyper_.beta2) * g[i] * g[i]);
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        tensor[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + hyper_.eps));
      }
    }
  }

private:
  struct Slot {
    std::string path;
    std::vector<S> m, v;
  };

  Hyper hyper_;
  std::vector<Slot> slots_;
  long step_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace psvit
