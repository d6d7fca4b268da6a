#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "psvit/backbone.hpp"
#include "psvit/sampling.hpp"
#include "psvit/transformer.hpp"

namespace psvit {

// Architecture hyperparameters. Presets follow the published configurations:
// Ti = (N=4, Nv=8, C=192, M=3) and B = (N=4, Nv=10, C=384, M=6), both with
// n=14 sampling points per axis at 224x224 input.
struct PsVitConfig {
  int iterations = 4;   // N, progressive sampling steps
  int depth = 8;        // N_v, encoder layers in the vision transformer module
  int channels = 192;   // C, token dimension
  int heads = 3;        // M
  int n = 14;           // sampling points per axis
  bool share_weights = false;
  int num_classes = 1000;
  int input_size = 224;
  float dropout = 0.1f;
  BackboneConfig backbone;

  static PsVitConfig ti() { return PsVitConfig{}; }

  static PsVitConfig b() {
    PsVitConfig c;
    c.depth = 10;
    c.channels = 384;
    c.heads = 6;
    return c;
  }

  static PsVitConfig toy() {
    PsVitConfig c;
    c.iterations = 2;
    c.depth = 2;
    c.channels = 16;
    c.heads = 2;
    c.n = 2;
    c.num_classes = 2;
    c.input_size = 16;
    c.dropout = 0.0f;
    c.backbone = BackboneConfig::toy();
    return c;
  }

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("config: N must be >= 1");
    if (depth < 0) throw std::invalid_argument("config: N_v must be >= 0");
    if (channels < 1 || heads < 1 || channels % heads != 0) {
      throw std::invalid_argument("config: C=" + std::to_string(channels) + " must be divisible by M=" +
                                  std::to_string(heads));
    }
    if (n < 1) throw std::invalid_argument("config: n must be >= 1");
    if (num_classes < 2) throw std::invalid_argument("config: need at least 2 classes");
    if (input_size < 4 || input_size % 4 != 0) {
      throw std::invalid_argument("config: input size must be a positive multiple of 4");
    }
    if (n > input_size / 4) {
      throw std::invalid_argument("config: n=" + std::to_string(n) + " exceeds feature map side " +
                                  std::to_string(input_size / 4));
    }
    if (dropout < 0.0f || dropout >= 1.0f) throw std::invalid_argument("config: dropout must be in [0,1)");
  }
};

// Ordered map from parameter path to tensor. Shared parameters appear under
// exactly one path, so totals count them once. The decay flag marks entries
// subject to weight decay (norm scales, biases and the class token are
// exempt).
template <typename S>
class ParamStoreT {
public:
  using Ten = TensorT<S>;

  struct Entry {
    std::string path;
    std::shared_ptr<Ten> tensor;
    bool decay = false;
  };

  void add(const std::string& path, std::shared_ptr<Ten> tensor, bool decay) {
    if (index_.count(path)) throw std::invalid_argument("param store: duplicate path " + path);
    index_[path] = entries_.size();
    entries_.push_back({path, std::move(tensor), decay});
  }

  void remove(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown path " + path);
    entries_.erase(entries_.begin() + static_cast<long>(it->second));
    index_.clear();
    for (size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].path] = i;
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  const std::shared_ptr<Ten>& at(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown path " + path);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  unsigned long long count_values() const {
    unsigned long long total = 0;
    for (const auto& e : entries_) total += e.tensor->size();
    return total;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor->zero_grad();
  }

private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

template <typename S>
struct ModelT {
  using Ten = TensorT<S>;

  PsVitConfig cfg;
  ParamStoreT<S> store;
  BackboneParamsT<S> backbone;
  SamplerParamsT<S> sampler;
  std::vector<EncoderLayerParamsT<S>> vtm_layers;
  std::shared_ptr<Ten> cls_token;
  std::shared_ptr<Ten> head_gamma, head_beta, head_weight, head_bias;
  // Non-trainable state (batch-norm running statistics), checkpointed but
  // excluded from parameter counts.
  std::vector<std::pair<std::string, std::shared_ptr<Ten>>> buffers;

  GridSpec grid() const {
    return GridSpec(cfg.input_size / 4, cfg.input_size / 4, cfg.n);
  }
};

using Model = ModelT<float>;

namespace detail {

template <typename S>
void register_norm(ModelT<S>& m, const std::string& prefix, const NormSiteT<S>& n) {
  m.store.add(prefix + ".gamma", n.gamma, false);
  m.store.add(prefix + ".beta", n.beta, false);
  if (n.batch_mode()) {
    m.buffers.emplace_back(prefix + ".running_mean", n.running_mean);
    m.buffers.emplace_back(prefix + ".running_var", n.running_var);
  }
}

template <typename S>
void register_conv(ModelT<S>& m, const std::string& prefix, const ConvNormT<S>& c) {
  m.store.add(prefix + ".weight", c.weight, true);
  register_norm(m, prefix + ".norm", c.norm);
}

template <typename S>
void register_encoder(ModelT<S>& m, const std::string& prefix, const EncoderLayerParamsT<S>& e) {
  m.store.add(prefix + ".attn.wq", e.attn.wq, true);
  m.store.add(prefix + ".attn.wk", e.attn.wk, true);
  m.store.add(prefix + ".attn.wv", e.attn.wv, true);
  m.store.add(prefix + ".attn.wo", e.attn.wo, true);
  m.store.add(prefix + ".ln1.gamma", e.ln1_gamma, false);
  m.store.add(prefix + ".ln1.beta", e.ln1_beta, false);
  m.store.add(prefix + ".ln2.gamma", e.ln2_gamma, false);
  m.store.add(prefix + ".ln2.beta", e.ln2_beta, false);
  m.store.add(prefix + ".ffn.w1", e.ffn_w1, true);
  m.store.add(prefix + ".ffn.b1", e.ffn_b1, false);
  m.store.add(prefix + ".ffn.w2", e.ffn_w2, true);
  m.store.add(prefix + ".ffn.b2", e.ffn_b2, false);
}

}  // namespace detail

// Instantiates every module and registers parameters under stable paths.
// Deterministic under the seed: equal seeds give bit-identical stores.
template <typename S>
ModelT<S> build(const PsVitConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelT<S> m;
  m.cfg = cfg;
  Rng root(seed);

  Rng rb = root.fork(1);
  m.backbone = BackboneParamsT<S>::init(cfg.backbone, cfg.channels, rb);
  detail::register_conv(m, "backbone.stem", m.backbone.stem);
  for (size_t b = 0; b < m.backbone.blocks.size(); ++b) {
    const std::string p = "backbone.block" + std::to_string(b + 1);
    detail::register_conv(m, p + ".reduce", m.backbone.blocks[b].reduce);
    detail::register_conv(m, p + ".spatial", m.backbone.blocks[b].spatial);
    detail::register_conv(m, p + ".expand", m.backbone.blocks[b].expand);
    if (m.backbone.blocks[b].shortcut) detail::register_conv(m, p + ".shortcut", *m.backbone.blocks[b].shortcut);
  }
  detail::register_conv(m, "backbone.proj", m.backbone.proj);

  Rng rs = root.fork(2);
  m.sampler = SamplerParamsT<S>::init(cfg.channels, cfg.heads, cfg.iterations, cfg.share_weights,
                                      static_cast<S>(cfg.dropout), rs);
  m.store.add("sampler.pos_proj.weight", m.sampler.pos_proj, true);
  for (size_t i = 0; i < m.sampler.encoders.size(); ++i) {
    const std::string p = cfg.share_weights ? "sampler.shared.encoder"
                                            : "sampler.iter" + std::to_string(i + 1) + ".encoder";
    detail::register_encoder(m, p, m.sampler.encoders[i]);
  }
  for (size_t i = 0; i < m.sampler.offset_heads.size(); ++i) {
    const std::string p = cfg.share_weights ? "sampler.shared.offset"
                                            : "sampler.iter" + std::to_string(i + 1) + ".offset";
    m.store.add(p + ".weight", m.sampler.offset_heads[i], true);
  }

  for (int d = 0; d < cfg.depth; ++d) {
    Rng rv = root.fork(3 + static_cast<uint64_t>(d));
    m.vtm_layers.push_back(EncoderLayerParamsT<S>::init(cfg.channels, cfg.heads,
                                                        static_cast<S>(cfg.dropout), rv));
    detail::register_encoder(m, "vtm.layer" + std::to_string(d + 1), m.vtm_layers.back());
  }

  Rng rc = root.fork(1000);
  m.cls_token = std::make_shared<TensorT<S>>(TensorT<S>::zeros({cfg.channels, 1}));
  rc.fill_trunc_normal(*m.cls_token, kInitStd);
  m.store.add("cls.token", m.cls_token, false);

  Rng rh = root.fork(1001);
  m.head_gamma = std::make_shared<TensorT<S>>(TensorT<S>::full({cfg.channels}, S(1)));
  m.head_beta = std::make_shared<TensorT<S>>(TensorT<S>::zeros({cfg.channels}));
  m.head_weight = std::make_shared<TensorT<S>>(TensorT<S>::zeros({cfg.num_classes, cfg.channels}));
  m.head_bias = std::make_shared<TensorT<S>>(TensorT<S>::zeros({cfg.num_classes}));
  rh.fill_trunc_normal(*m.head_weight, kInitStd);
  m.store.add("head.norm.gamma", m.head_gamma, false);
  m.store.add("head.norm.beta", m.head_beta, false);
  m.store.add("head.linear.weight", m.head_weight, true);
  m.store.add("head.linear.bias", m.head_bias, false);

  return m;
}

// Aliases every sampler iteration to iteration 1's parameters and drops the
// now-redundant store paths. The model must have been built unshared.
template <typename S>
void tie_weights(ModelT<S>& m) {
  if (m.cfg.share_weights || m.sampler.shared) {
    throw std::invalid_argument("tie_weights: sampler weights are already shared");
  }
  const int n_iters = m.sampler.iterations;
  for (int t = 2; t <= n_iters; ++t) {
    const std::string p = "sampler.iter" + std::to_string(t) + ".encoder";
    for (const char* leaf : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".ln1.gamma", ".ln1.beta",
                             ".ln2.gamma", ".ln2.beta", ".ffn.w1", ".ffn.b1", ".ffn.w2", ".ffn.b2"}) {
      m.store.remove(p + leaf);
    }
  }
  for (int t = 2; t < n_iters; ++t) {
    m.store.remove("sampler.iter" + std::to_string(t) + ".offset.weight");
  }
  m.sampler.encoders.resize(1);
  if (!m.sampler.offset_heads.empty()) m.sampler.offset_heads.resize(1);
  m.sampler.shared = true;
  m.cfg.share_weights = true;
}

// Per-image forward pass results recorded on a shared tape.
struct BatchVars {
  std::vector<int> logits;  // one K x 1 var per image
  int loss = -1;            // scalar var when targets were supplied
};

// extract_features -> progressive_sample -> vtm -> head on the class token.
// When targets are given, also records the batch-mean smoothed cross entropy.
template <typename S>
BatchVars forward_batch(TapeT<S>& tape, const ModelT<S>& m, const std::vector<TensorT<S>>& images,
                        const std::vector<int>* targets, bool train_mode, Rng* rng,
                        std::vector<TrajectoryLogT<S>>* trajectories, S label_smooth = S(0.1)) {
  if (images.empty()) throw std::invalid_argument("forward: empty batch");
  if (targets && targets->size() != images.size()) {
    throw std::invalid_argument("forward: target count does not match batch size");
  }
  std::vector<int> image_vars;
  image_vars.reserve(images.size());
  for (const auto& img : images) image_vars.push_back(tape.input(img));

  std::vector<int> feats = extract_features(tape, image_vars, m.backbone, train_mode);

  BatchVars out;
  std::vector<int> losses;
  for (size_t j = 0; j < feats.size(); ++j) {
    const auto& fshape = tape.val(feats[j]).shape();
    GridSpec spec(fshape[1], fshape[2], m.cfg.n);
    TrajectoryLogT<S> log;
    int tokens = progressive_sample(tape, feats[j], m.sampler, spec, train_mode, rng,
                                    trajectories ? &log : nullptr);
    if (trajectories) trajectories->push_back(std::move(log));
    int refined = vtm(tape, tokens, m.cls_token, m.vtm_layers, train_mode, rng);
    int cls_col = tape.slice_cols(refined, 0, 1);
    int normed = tape.layer_norm_cols(cls_col, tape.param(m.head_gamma), tape.param(m.head_beta),
                                      static_cast<S>(kLayerNormEps));
    int logits = tape.add_bias_cols(tape.matmul(tape.param(m.head_weight), normed), tape.param(m.head_bias));
    out.logits.push_back(logits);
    if (targets) losses.push_back(tape.cross_entropy_smoothed(logits, (*targets)[j], label_smooth));
  }
  if (targets) out.loss = losses.size() == 1 ? losses[0] : tape.mean_of(losses);
  return out;
}

// Convenience eval-mode inference returning plain logits (batch x classes).
template <typename S>
TensorT<S> predict(const ModelT<S>& m, const std::vector<TensorT<S>>& images,
                   std::vector<TrajectoryLogT<S>>* trajectories = nullptr) {
  TapeT<S> tape;
  BatchVars vars = forward_batch<S>(tape, m, images, nullptr, false, nullptr, trajectories);
  TensorT<S> logits = TensorT<S>::zeros({static_cast<int>(images.size()), m.cfg.num_classes});
  for (size_t j = 0; j < vars.logits.size(); ++j) {
    const auto& v = tape.val(vars.logits[j]);
    for (int k = 0; k < m.cfg.num_classes; ++k) logits.at(static_cast<int>(j), k) = v.at(k, 0);
  }
  return logits;
}

// ---- analytic cost accounting -------------------------------------------

struct CostEntry {
  std::string module;
  unsigned long long params = 0;
  unsigned long long flops = 0;
};

// FLOP convention: 1 multiply-accumulate = 1 FLOP. Matrix products, convs
// and the bilinear gather are counted; norms, softmax and activations are
// not. Parameter totals count aliased tensors once.
struct CostReport {
  unsigned long long params = 0;
  unsigned long long flops = 0;
  std::vector<CostEntry> modules;
};

namespace detail {

inline unsigned long long encoder_params(int c) {
  // qkv + output projections, FFN C->3C->C with biases, two layer norms
  return 4ULL * c * c + (3ULL * c * c + 3ULL * c) + (3ULL * c * c + c) + 4ULL * c;
}

inline unsigned long long backbone_params(const BackboneConfig& b, int token_dim) {
  auto conv = [](int cin, int cout, int k) {
    return static_cast<unsigned long long>(cin) * cout * k * k + 2ULL * cout;  // weight + norm
  };
  unsigned long long total = conv(3, b.stem_channels, 7);
  int cin = b.stem_channels;
  for (int i = 0; i < b.blocks; ++i) {
    total += conv(cin, b.bottleneck_width, 1);
    total += conv(b.bottleneck_width, b.bottleneck_width, 3);
    total += conv(b.bottleneck_width, b.block_out_channels, 1);
    if (cin != b.block_out_channels) total += conv(cin, b.block_out_channels, 1);
    cin = b.block_out_channels;
  }
  total += conv(cin, token_dim, 1);
  return total;
}

inline unsigned long long sampler_params(const PsVitConfig& c) {
  const unsigned long long enc = encoder_params(c.channels);
  const unsigned long long offset = 2ULL * c.channels;
  const int enc_count = c.share_weights ? 1 : c.iterations;
  const int off_count = c.iterations > 1 ? (c.share_weights ? 1 : c.iterations - 1) : 0;
  return 2ULL * c.channels /*pos proj*/ + enc_count * enc + off_count * offset;
}

inline unsigned long long head_params(const PsVitConfig& c) {
  return 2ULL * c.channels + static_cast<unsigned long long>(c.channels) * c.num_classes + c.num_classes;
}

inline unsigned long long encoder_flops(int c, int len) {
  // 3 qkv projections + output projection + scores + attn*V + FFN
  const unsigned long long lc2 = static_cast<unsigned long long>(len) * c * c;
  const unsigned long long l2c = static_cast<unsigned long long>(len) * len * c;
  return 10ULL * lc2 + 2ULL * l2c;
}

inline unsigned long long backbone_flops(const BackboneConfig& b, int token_dim, int input_size) {
  const int s2 = input_size / 2;  // after stem conv
  const int s4 = input_size / 4;  // after max pool
  auto conv = [](int cin, int cout, int k, int out_hw) {
    return static_cast<unsigned long long>(out_hw) * out_hw * cout * cin * k * k;
  };
  unsigned long long total = conv(3, b.stem_channels, 7, s2);
  int cin = b.stem_channels;
  for (int i = 0; i < b.blocks; ++i) {
    total += conv(cin, b.bottleneck_width, 1, s4);
    total += conv(b.bottleneck_width, b.bottleneck_width, 3, s4);
    total += conv(b.bottleneck_width, b.block_out_channels, 1, s4);
    if (cin != b.block_out_channels) total += conv(cin, b.block_out_channels, 1, s4);
    cin = b.block_out_channels;
  }
  total += conv(cin, token_dim, 1, s4);
  return total;
}

inline unsigned long long sampler_flops(const PsVitConfig& c, int n) {
  const unsigned long long len = static_cast<unsigned long long>(n) * n;
  unsigned long long per_iter = encoder_flops(c.channels, static_cast<int>(len));
  per_iter += 4ULL * c.channels * len;  // bilinear gather (4 taps per channel)
  per_iter += 2ULL * c.channels * len;  // positional projection
  unsigned long long total = static_cast<unsigned long long>(c.iterations) * per_iter;
  total += static_cast<unsigned long long>(c.iterations - 1) * 2ULL * c.channels * len;  // offset heads
  return total;
}

}  // namespace detail

/// Exact analytic parameter count; matches the built ParamStore.
inline unsigned long long count_params(const PsVitConfig& cfg) {
  cfg.validate();
  return detail::backbone_params(cfg.backbone, cfg.channels) + detail::sampler_params(cfg) +
         static_cast<unsigned long long>(cfg.depth) * detail::encoder_params(cfg.channels) +
         cfg.channels /*class token*/ + detail::head_params(cfg);
}

/// Analytic multiply-accumulate count for one image at the given input size
/// and sampling density.
inline unsigned long long count_flops(const PsVitConfig& cfg, int input_size, int n) {
  if (input_size % 4 != 0) throw std::invalid_argument("flops: input size must be divisible by 4");
  if (n < 1 || n > input_size / 4) throw std::invalid_argument("flops: invalid sampling count n");
  unsigned long long total = detail::backbone_flops(cfg.backbone, cfg.channels, input_size);
  total += detail::sampler_flops(cfg, n);
  const int len = n * n + 1;
  total += static_cast<unsigned long long>(cfg.depth) * detail::encoder_flops(cfg.channels, len);
  total += static_cast<unsigned long long>(cfg.channels) * cfg.num_classes;  // head
  return total;
}

inline CostReport cost_report(const PsVitConfig& cfg) {
  CostReport r;
  const int n = cfg.n, sz = cfg.input_size;
  r.modules.push_back({"backbone", detail::backbone_params(cfg.backbone, cfg.channels),
                       detail::backbone_flops(cfg.backbone, cfg.channels, sz)});
  r.modules.push_back({"sampler", detail::sampler_params(cfg), detail::sampler_flops(cfg, n)});
  r.modules.push_back({"vtm",
                       static_cast<unsigned long long>(cfg.depth) * detail::encoder_params(cfg.channels),
                       static_cast<unsigned long long>(cfg.depth) *
                           detail::encoder_flops(cfg.channels, n * n + 1)});
  r.modules.push_back({"head", static_cast<unsigned long long>(cfg.channels) /*cls*/ + detail::head_params(cfg),
                       static_cast<unsigned long long>(cfg.channels) * cfg.num_classes});
  for (const auto& e : r.modules) {
    r.params += e.params;
    r.flops += e.flops;
  }
  return r;
}

}  // namespace psvit
