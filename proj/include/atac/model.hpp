#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace atac {

struct ModelConfig {
  std::size_t input_resolution = 64;
  std::size_t input_channels = 1;
  std::vector<std::size_t> stage_channels = {16, 32, 64, 64};  // one stride-2 stage each
  std::size_t kernel_size = 3;
  std::size_t attention_channels = 64;

  std::size_t map_resolution() const {
    std::size_t r = input_resolution;
    for (std::size_t i = 0; i < stage_channels.size(); ++i) r /= 2;
    return r;
  }

  void validate() const {
    ATAC_CHECK(stage_channels.size() >= 2, "model config: need at least 2 backbone stages");
    ATAC_CHECK(kernel_size % 2 == 1, "model config: kernel size must be odd");
    std::size_t r = input_resolution;
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      ATAC_CHECK(r % 2 == 0, "model config: resolution " << input_resolution
                                                         << " is not divisible by stage strides");
      r /= 2;
    }
    ATAC_CHECK(r >= 4, "model config: final feature map " << r << "x" << r
                                                          << " is smaller than 4x4");
  }
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  std::size_t stride = 1, pad = 0;
};

template <typename T>
struct ModelOut {
  Tensor<T> features;  // N x C' x h x w
  Tensor<T> attended;  // N x Ca x h x w, feeds both the mapper and the crop logic
  Tensor<T> map;       // N x 1 x h x w
};

// The three learnable stages: backbone feature extractor, attention
// augmentation block, single-channel anomaly mapper. All parameters are
// leaves on the shared tape; both scoring passes read the same tensors.
template <typename T>
class Model {
 public:
  ModelConfig cfg;
  std::vector<Conv2dLayer<T>> stages;
  Conv2dLayer<T> pre_attn;
  Tensor<T> wq, wk, wv;  // bias-free 1x1 projections
  Tensor<T> gain;        // residual attention gate, starts closed
  Conv2dLayer<T> mapper;

  std::size_t qk_channels() const { return std::max<std::size_t>(1, cfg.attention_channels / 8); }

  [[nodiscard]] static Model init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const std::size_t k = cfg.kernel_size;
    std::size_t in_ch = cfg.input_channels;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
      const std::size_t out_ch = cfg.stage_channels[s];
      m.stages.push_back(Conv2dLayer<T>{kaiming({out_ch, in_ch, k, k}, rng),
                                        Tensor<T>::zeros({out_ch}), 2, k / 2});
      in_ch = out_ch;
    }
    const std::size_t ca = cfg.attention_channels;
    m.pre_attn = Conv2dLayer<T>{kaiming({ca, in_ch, k, k}, rng), Tensor<T>::zeros({ca}), 1, k / 2};
    const std::size_t cq = m.qk_channels();
    m.wq = kaiming({cq, ca, 1, 1}, rng);
    m.wk = kaiming({cq, ca, 1, 1}, rng);
    m.wv = kaiming({ca, ca, 1, 1}, rng);
    m.gain = Tensor<T>::zeros({});
    m.mapper = Conv2dLayer<T>{kaiming({1, ca, 1, 1}, rng), Tensor<T>::zeros({1}), 1, 0};
    for (auto& [name, p] : m.named_parameters()) {
      (void)name;
      p.set_requires_grad(true);
    }
    return m;
  }

  // Stable order; names double as the checkpoint tensor table.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      out.emplace_back("backbone.stage" + std::to_string(s) + ".weight", stages[s].w);
      out.emplace_back("backbone.stage" + std::to_string(s) + ".bias", stages[s].b);
    }
    out.emplace_back("attention.pre.weight", pre_attn.w);
    out.emplace_back("attention.pre.bias", pre_attn.b);
    out.emplace_back("attention.query.weight", wq);
    out.emplace_back("attention.key.weight", wk);
    out.emplace_back("attention.value.weight", wv);
    out.emplace_back("attention.gain", gain);
    out.emplace_back("mapper.weight", mapper.w);
    out.emplace_back("mapper.bias", mapper.b);
    return out;
  }

  Tensor<T> feature_extract(const Tensor<T>& x) const {
    ATAC_CHECK(x.ndim() == 4, "feature_extract: input must be N×C×H×W, got "
                                  << shape_str(x.shape()));
    ATAC_CHECK(x.dim(1) == cfg.input_channels,
               "feature_extract: input has " << x.dim(1) << " channels, model expects "
                                             << cfg.input_channels);
    ATAC_CHECK(x.dim(2) == cfg.input_resolution && x.dim(3) == cfg.input_resolution,
               "feature_extract: input is " << x.dim(2) << "x" << x.dim(3)
                                            << ", model expects square "
                                            << cfg.input_resolution);
    Tensor<T> h = x;
    for (const auto& st : stages) h = relu(conv2d(h, st.w, st.b, st.stride, st.pad));
    return h;
  }

  // Single-head dot-product attention over all spatial positions, gated into
  // a residual. gain == 0 reduces this to the identity while keeping the
  // aggregate on the tape so the gate itself still receives gradient.
  Tensor<T> self_attention(const Tensor<T>& f) const {
    ATAC_CHECK(f.ndim() == 4 && f.dim(1) == cfg.attention_channels,
               "self_attention: expected N×" << cfg.attention_channels << "×h×w, got "
                                             << shape_str(f.shape()));
    const std::size_t N = f.dim(0), C = f.dim(1), h = f.dim(2), w = f.dim(3);
    const std::size_t cq = qk_channels(), hw = h * w;
    auto fq = conv2d(f, wq, 1, 0);
    auto fk = conv2d(f, wk, 1, 0);
    auto fv = conv2d(f, wv, 1, 0);
    std::vector<Tensor<T>> per_sample;
    per_sample.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
      auto q = transpose2d(reshape(select0(fq, n), {cq, hw}));  // hw x cq, rows are queries
      auto kk = reshape(select0(fk, n), {cq, hw});
      auto weights = softmax(matmul(q, kk), 1);                 // hw x hw, rows sum to 1
      auto v = reshape(select0(fv, n), {C, hw});
      auto agg = matmul(v, transpose2d(weights));               // C x hw
      per_sample.push_back(reshape(agg, {C, h, w}));
    }
    return add(f, mul_scalar(stack0(per_sample), gain));
  }

  Tensor<T> attention_augment(const Tensor<T>& f) const {
    auto h = relu(conv2d(f, pre_attn.w, pre_attn.b, pre_attn.stride, pre_attn.pad));
    return self_attention(h);
  }

  Tensor<T> anomaly_map(const Tensor<T>& att) const {
    return conv2d(att, mapper.w, mapper.b, mapper.stride, mapper.pad);
  }

  ModelOut<T> run(const Tensor<T>& x) const {
    ModelOut<T> o;
    o.features = feature_extract(x);
    o.attended = attention_augment(o.features);
    o.map = anomaly_map(o.attended);
    return o;
  }

 private:
  static Tensor<T> kaiming(Shape shape, Rng& rng) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(shape_numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_values(std::move(shape), std::move(v));
  }
};

}  // namespace atac
