#pragma once

#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "psvit/data.hpp"
#include "psvit/model.hpp"
#include "psvit/optim.hpp"

namespace psvit {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double base_lr = 5e-4;
  double weight_decay = 0.05;
  int warmup_epochs = 5;
  float label_smooth = 0.1f;
  bool random_flip = false;  // horizontal flip with probability 1/2
  uint64_t seed = 0;
};

inline Tensor flip_horizontal(const Tensor& img) {
  Tensor out = Tensor::zeros(img.shape());
  const int w = img.dim(2);
  for (int c = 0; c < img.dim(0); ++c)
    for (int y = 0; y < img.dim(1); ++y)
      for (int x = 0; x < w; ++x) out.at3(c, y, x) = img.at3(c, y, w - 1 - x);
  return out;
}

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;  // fraction of correct train predictions
  double lr = 0.0;
};

using EpochCallback = std::function<void(const Model&, const EpochMetrics&, bool /*is_best*/)>;

// Single-threaded seeded training loop: shuffle, batch, train-mode forward,
// smoothed cross entropy, backward, AdamW with the cosine schedule. Metrics
// are recorded from the train-mode forward passes.
inline std::vector<EpochMetrics> train(Model& model, const Dataset& data, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch = nullptr) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.num_classes != model.cfg.num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.num_classes) +
                                " classes but the model head expects " +
                                std::to_string(model.cfg.num_classes));
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train: bad epoch/batch config");

  const int steps_per_epoch =
      static_cast<int>((data.size() + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size));
  LrSchedule schedule{cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch};
  // short desk-scale runs clamp the warmup instead of rejecting it
  schedule.warmup_epochs = std::min(schedule.warmup_epochs, schedule.total_epochs - 1);
  schedule.validate();

  AdamW::Hyper hyper;
  hyper.weight_decay = cfg.weight_decay;
  AdamW opt(model.store, hyper);

  Rng root(cfg.seed);
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochMetrics> series;
  double best_acc = -1.0;
  long global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }

    double loss_sum = 0.0;
    int correct = 0;
    double last_lr = 0.0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Rng flip_rng = root.fork(Rng::mix(0xf11b, Rng::mix(static_cast<uint64_t>(epoch), static_cast<uint64_t>(start))));
      std::vector<Tensor> images;
      std::vector<int> targets;
      for (size_t i = start; i < end; ++i) {
        const bool flip = cfg.random_flip && flip_rng.uniform(0.0, 1.0) < 0.5;
        images.push_back(flip ? flip_horizontal(data.images[order[i]]) : data.images[order[i]]);
        targets.push_back(data.labels[order[i]]);
      }

      Rng dropout_rng = root.fork(Rng::mix(static_cast<uint64_t>(epoch), static_cast<uint64_t>(start)));
      Tape tape;
      BatchVars vars = forward_batch<float>(tape, model, images, &targets, true, &dropout_rng, nullptr,
                                            cfg.label_smooth);
      const double batch_loss = tape.val(vars.loss)[0];
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(start / static_cast<size_t>(cfg.batch_size)));
      }
      loss_sum += batch_loss * static_cast<double>(images.size());
      for (size_t j = 0; j < images.size(); ++j) {
        const auto& lg = tape.val(vars.logits[j]);
        int arg = 0;
        for (int k = 1; k < model.cfg.num_classes; ++k)
          if (lg.at(k, 0) > lg.at(arg, 0)) arg = k;
        if (arg == targets[j]) ++correct;
      }

      model.store.zero_grads();
      tape.backward(vars.loss);
      last_lr = schedule.lr_at(global_step);
      opt.step(model.store, last_lr);
      ++global_step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(data.size());
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    m.lr = last_lr;
    series.push_back(m);
    const bool is_best = m.accuracy > best_acc;
    if (is_best) best_acc = m.accuracy;
    if (on_epoch) on_epoch(model, m, is_best);
  }
  return series;
}

inline std::string metrics_to_csv(const std::vector<EpochMetrics>& series) {
  std::ostringstream os;
  os << "epoch,loss,accuracy,lr\n";
  os << std::setprecision(10);
  for (const auto& m : series) os << m.epoch << "," << m.loss << "," << m.accuracy << "," << m.lr << "\n";
  return os.str();
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& series) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("metrics: cannot open " + path + " for writing");
  f << metrics_to_csv(series);
}

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  size_t count = 0;
};

// Eval-mode accuracy; images larger than the model input are center-cropped.
inline EvalResult evaluate(const Model& model, const Dataset& data, int batch_size = 32) {
  if (data.num_classes > model.cfg.num_classes) {
    throw std::invalid_argument("eval: dataset has more classes than the model head");
  }
  EvalResult r;
  r.count = data.size();
  const int k5 = std::min(5, model.cfg.num_classes);
  for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(data.size(), start + static_cast<size_t>(batch_size));
    std::vector<Tensor> images;
    for (size_t i = start; i < end; ++i) {
      images.push_back(data.images[i].dim(1) > model.cfg.input_size ||
                               data.images[i].dim(2) > model.cfg.input_size
                           ? center_crop(data.images[i], model.cfg.input_size)
                           : data.images[i]);
    }
    Tensor logits = predict(model, images);
    for (size_t j = 0; j < images.size(); ++j) {
      const int target = data.labels[start + j];
      std::vector<int> idx(static_cast<size_t>(model.cfg.num_classes));
      for (size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<int>(k);
      std::partial_sort(idx.begin(), idx.begin() + k5, idx.end(), [&](int a, int b) {
        return logits.at(static_cast<int>(j), a) > logits.at(static_cast<int>(j), b);
      });
      if (idx[0] == target) r.top1 += 1.0;
      for (int k = 0; k < k5; ++k)
        if (idx[static_cast<size_t>(k)] == target) {
          r.top5 += 1.0;
          break;
        }
    }
  }
  if (r.count > 0) {
    r.top1 /= static_cast<double>(r.count);
    r.top5 /= static_cast<double>(r.count);
  }
  return r;
}

}  // namespace psvit
