#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "scoring.hpp"
#include "tensor.hpp"

namespace atac {

struct Schedule {
  double base_lr = 1e-3;
  double decay_factor = 0.1;
  std::size_t step_size_epochs = 10;
  std::size_t total_epochs = 30;
  std::size_t batch_size = 16;

  void validate() const {
    ATAC_CHECK(base_lr > 0 && decay_factor > 0 && step_size_epochs > 0 && total_epochs > 0 &&
                   batch_size > 0,
               "schedule: all fields must be positive");
  }
};

inline double lr_at_epoch(const Schedule& s, std::size_t epoch) {
  double lr = s.base_lr;
  for (std::size_t i = 0; i < epoch / s.step_size_epochs; ++i) lr *= s.decay_factor;
  return lr;
}

template <typename T>
class Adam {
 public:
  struct Hyper {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  };

  Adam() = default;

  explicit Adam(std::vector<std::pair<std::string, Tensor<T>>> params, Hyper hyper = {})
      : params_(std::move(params)), hyper_(hyper) {
    for (auto& [name, p] : params_) {
      (void)name;
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      (void)name;
      p.zero_grad();
    }
  }

  // Bias-corrected update; a missing grad buffer counts as an all-zero
  // gradient, which decays the moments and moves nothing from rest.
  void step(double lr) {
    ++t_;
    const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
    const T c1 = T(1) - static_cast<T>(std::pow(hyper_.beta1, static_cast<double>(t_)));
    const T c2 = T(1) - static_cast<T>(std::pow(hyper_.beta2, static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      const auto& g = p.grad();
      auto& vals = p.leaf_values();
      for (std::size_t j = 0; j < vals.size(); ++j) {
        const T gj = g.empty() ? T(0) : g[j];
        if (!std::isfinite(static_cast<double>(gj)))
          throw std::runtime_error("adam: non-finite gradient in parameter " + name);
        m_[i][j] = b1 * m_[i][j] + (T(1) - b1) * gj;
        v_[i][j] = b2 * v_[i][j] + (T(1) - b2) * gj * gj;
        const T mhat = m_[i][j] / c1;
        const T vhat = v_[i][j] / c2;
        vals[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(hyper_.eps));
      }
    }
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  const Hyper& hyper() const { return hyper_; }
  std::uint64_t step_count() const { return t_; }
  const std::vector<std::vector<T>>& moment1() const { return m_; }
  const std::vector<std::vector<T>>& moment2() const { return v_; }

  void restore(std::uint64_t step_count, std::vector<std::vector<T>> m,
               std::vector<std::vector<T>> v) {
    ATAC_CHECK(m.size() == params_.size() && v.size() == params_.size(),
               "adam: restored state has " << m.size() << " moment buffers for "
                                           << params_.size() << " parameters");
    for (std::size_t i = 0; i < params_.size(); ++i)
      ATAC_CHECK(m[i].size() == params_[i].second.size() &&
                     v[i].size() == params_[i].second.size(),
                 "adam: moment size mismatch for parameter " << params_[i].first);
    t_ = step_count;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Hyper hyper_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

enum class RefMode { analytic, sampled };

struct TrainOptions {
  Schedule schedule;
  LossConfig loss;
  ScoringConfig scoring;
  RefMode ref_mode = RefMode::analytic;
  std::size_t ref_samples = 5000;  // draws per batch in sampled mode
  CutMixConfig cutmix;
  double cutmix_rate = 0.25;  // chance a normal sample becomes a pseudo-anomaly, per batch
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double mean_score_normal = 0;
  double mean_score_anomaly = 0;
};

inline std::string epoch_log_header() {
  return "epoch,lr,mean_loss,mean_score_normal,mean_score_anomaly";
}

namespace detail {

// Sample order and every stochastic choice inside an epoch come from an rng
// derived from (seed, epoch) alone, so a resumed run replays the identical
// stream.
template <typename T>
EpochLog run_epoch(Model<T>& model, Adam<T>& opt, const std::vector<Sample<T>>& episode,
                   const TrainOptions& opts, std::size_t epoch) {
  Rng rng(derive_seed(opts.seed, "epoch", epoch));
  std::vector<std::size_t> order(episode.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  std::vector<std::size_t> normal_pool;
  for (std::size_t i = 0; i < episode.size(); ++i)
    if (episode[i].label == 0) normal_pool.push_back(i);

  const double lr = lr_at_epoch(opts.schedule, epoch);
  EpochLog log;
  log.epoch = epoch;
  log.lr = lr;
  double loss_sum = 0, normal_sum = 0, anomaly_sum = 0;
  std::size_t normal_n = 0, anomaly_n = 0, batch_index = 0;

  for (std::size_t start = 0; start < episode.size(); start += opts.schedule.batch_size) {
    const std::size_t bn = std::min(opts.schedule.batch_size, episode.size() - start);
    std::vector<Tensor<T>> images;
    std::vector<int> labels;
    images.reserve(bn);
    for (std::size_t b = 0; b < bn; ++b) {
      const std::size_t idx = order[start + b];
      const Sample<T>& s = episode[idx];
      if (s.label == 0 && rng.bernoulli(opts.cutmix_rate)) {
        std::size_t donor = idx;
        if (normal_pool.size() > 1) {
          do {
            donor = normal_pool[rng.index(normal_pool.size())];
          } while (donor == idx);
        }
        auto mixed = cutmix(s, episode[donor], opts.cutmix, rng);
        images.push_back(to_chw(mixed.image));
        labels.push_back(1);
      } else {
        images.push_back(to_chw(s.image));
        labels.push_back(s.label);
      }
    }
    auto x = stack0(images);

    ReferenceDistribution ref;
    if (opts.ref_mode == RefMode::sampled) {
      Rng ref_rng(derive_seed(opts.seed, "refdist", epoch * 1000000 + batch_index));
      ref = ReferenceDistribution::sampled(opts.ref_samples, ref_rng);
    }

    auto fw = atac_forward(model, x, opts.scoring);
    auto loss = batch_loss(fw.scores, labels, ref, opts.loss);
    const double lv = static_cast<double>(loss.value());
    if (!std::isfinite(lv))
      throw std::runtime_error("training diverged: loss is not finite at epoch " +
                               std::to_string(epoch) + ", batch " +
                               std::to_string(batch_index));
    opt.zero_grad();
    backward(loss);
    opt.step(lr);
    Tape<T>::active().clear();

    loss_sum += lv * static_cast<double>(bn);
    for (std::size_t b = 0; b < bn; ++b) {
      const double sc = static_cast<double>(fw.scores.values()[b]);
      if (labels[b] == 0) {
        normal_sum += sc;
        ++normal_n;
      } else {
        anomaly_sum += sc;
        ++anomaly_n;
      }
    }
    ++batch_index;
  }

  log.mean_loss = loss_sum / static_cast<double>(episode.size());
  log.mean_score_normal = normal_n ? normal_sum / static_cast<double>(normal_n) : 0.0;
  log.mean_score_anomaly = anomaly_n ? anomaly_sum / static_cast<double>(anomaly_n) : 0.0;
  return log;
}

}  // namespace detail

// Trains [epoch_begin, epoch_end); pass 0..total_epochs for a full run, or
// resume from a checkpoint's next epoch. The episode must already contain
// the chosen anomalies.
template <typename T>
std::vector<EpochLog> train(Model<T>& model, Adam<T>& opt,
                            const std::vector<Sample<T>>& episode, const TrainOptions& opts,
                            std::size_t epoch_begin, std::size_t epoch_end) {
  opts.schedule.validate();
  ATAC_CHECK(!episode.empty(), "train: empty episode");
  ATAC_CHECK(epoch_begin <= epoch_end, "train: epoch range is reversed");
  std::vector<EpochLog> logs;
  for (std::size_t e = epoch_begin; e < epoch_end; ++e)
    logs.push_back(detail::run_epoch(model, opt, episode, opts, e));
  return logs;
}

}  // namespace atac
