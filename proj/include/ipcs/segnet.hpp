#pragma once

// A small point-wise segmentation network:
//
//   features -> [linear -> BN -> ReLU] x B -> linear -> logits -> softmax
//
// with one aggregation stage after block `aggregate_after` that concatenates
// each point's activation with the mean activation of its k nearest
// neighbors. All weights are shared across points.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ipcs/cloud.hpp"
#include "ipcs/encoding.hpp"
#include "ipcs/errors.hpp"
#include "ipcs/optim.hpp"
#include "ipcs/spatial.hpp"
#include "ipcs/tensor.hpp"

namespace ipcs {

struct SegNetConfig {
  std::size_t input_dim = kDefaultFeatureDim;
  std::vector<std::size_t> hidden_dims{32, 32, 64};
  std::size_t num_classes = 8;
  std::size_t knn_k = 16;
  /// Number of encoder blocks that run before the neighbor aggregation.
  std::size_t aggregate_after = 2;
  std::uint64_t seed = 0;
};

inline void validate(const SegNetConfig& c) {
  if (c.num_classes < 2) throw ContractError("segnet: num_classes must be >= 2");
  if (c.knn_k < 1) throw ContractError("segnet: knn_k must be >= 1");
  if (c.hidden_dims.empty()) throw ContractError("segnet: hidden_dims must be non-empty");
  if (c.input_dim == 0) throw ContractError("segnet: input_dim must be positive");
  if (c.aggregate_after < 1 || c.aggregate_after > c.hidden_dims.size())
    throw ContractError("segnet: aggregate_after must name an encoder block");
}

/// Hash of everything that determines tensor shapes (the seed is excluded).
inline std::uint64_t architecture_fingerprint(const SegNetConfig& c) {
  std::ostringstream s;
  s << "in=" << c.input_dim << ";hidden=";
  for (const auto h : c.hidden_dims) s << h << ",";
  s << ";classes=" << c.num_classes << ";k=" << c.knn_k << ";agg=" << c.aggregate_after;
  return fnv1a(s.str());
}

struct LinearLayer {
  Var weight;  // in x out
  Var bias;    // out
};

namespace detail {

inline Var clone_var(const Var& v) {
  if (!v) return v;
  auto copy = make_var(v->value, v->requires_grad, v->name);
  copy->grad = v->grad;
  return copy;
}

inline BatchNormState clone_bn(const BatchNormState& s) {
  BatchNormState c = s;
  c.gamma = clone_var(s.gamma);
  c.beta = clone_var(s.beta);
  return c;
}

}  // namespace detail

/// Learnable weights plus batch-norm state. Copies are deep.
class NetworkParams {
 public:
  SegNetConfig config;
  std::uint64_t fingerprint = 0;
  std::vector<LinearLayer> blocks;
  std::vector<BatchNormState> norms;
  LinearLayer head;

  NetworkParams() = default;
  NetworkParams(const NetworkParams& o) { *this = o; }
  NetworkParams& operator=(const NetworkParams& o) {
    if (this == &o) return *this;
    config = o.config;
    fingerprint = o.fingerprint;
    blocks.clear();
    for (const auto& b : o.blocks) blocks.push_back({detail::clone_var(b.weight), detail::clone_var(b.bias)});
    norms.clear();
    for (const auto& n : o.norms) norms.push_back(detail::clone_bn(n));
    head = {detail::clone_var(o.head.weight), detail::clone_var(o.head.bias)};
    return *this;
  }
  NetworkParams(NetworkParams&&) = default;
  NetworkParams& operator=(NetworkParams&&) = default;

  /// Every trainable tensor in a fixed order. BN running statistics are not
  /// included.
  std::vector<Var> learnable() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      out.push_back(blocks[i].weight);
      out.push_back(blocks[i].bias);
      out.push_back(norms[i].gamma);
      out.push_back(norms[i].beta);
    }
    out.push_back(head.weight);
    out.push_back(head.bias);
    return out;
  }

  void zero_grad() const {
    for (const auto& v : learnable()) v->zero_grad();
  }

  /// Named flat arrays covering the full state, used by checkpoints and
  /// bit-exact comparisons.
  std::vector<std::pair<std::string, std::vector<float>>> named_arrays() const {
    std::vector<std::pair<std::string, std::vector<float>>> out;
    for (const auto& v : learnable()) out.emplace_back(v->name, v->value.storage());
    for (std::size_t i = 0; i < norms.size(); ++i) {
      out.emplace_back("block" + std::to_string(i) + ".running_mu", norms[i].running_mu);
      out.emplace_back("block" + std::to_string(i) + ".running_sigma2", norms[i].running_sigma2);
    }
    return out;
  }

  bool bit_equal(const NetworkParams& o) const {
    const auto a = named_arrays();
    const auto b = o.named_arrays();
    if (a.size() != b.size() || fingerprint != o.fingerprint) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].first != b[i].first || a[i].second.size() != b[i].second.size()) return false;
      if (std::memcmp(a[i].second.data(), b[i].second.data(), a[i].second.size() * sizeof(float)) != 0) return false;
    }
    return true;
  }
};

/// Input width of encoder block i.
inline std::size_t block_input_dim(const SegNetConfig& c, std::size_t i) {
  if (i == 0) return c.input_dim;
  const std::size_t prev = c.hidden_dims[i - 1];
  return i == c.aggregate_after ? 2 * prev : prev;
}

inline std::size_t head_input_dim(const SegNetConfig& c) {
  const std::size_t last = c.hidden_dims.back();
  return c.aggregate_after == c.hidden_dims.size() ? 2 * last : last;
}

inline NetworkParams init_params(const SegNetConfig& config) {
  validate(config);
  NetworkParams p;
  p.config = config;
  p.fingerprint = architecture_fingerprint(config);
  std::mt19937_64 rng(config.seed);
  auto linear = [&](std::size_t in, std::size_t out, const std::string& name) {
    const float bound = std::sqrt(6.0f / static_cast<float>(in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    Tensor w({in, out});
    for (float& v : w.values()) v = dist(rng);
    return LinearLayer{make_var(std::move(w), true, name + ".weight"), make_var(Tensor({out}), true, name + ".bias")};
  };
  for (std::size_t i = 0; i < config.hidden_dims.size(); ++i) {
    const std::string name = "block" + std::to_string(i);
    p.blocks.push_back(linear(block_input_dim(config, i), config.hidden_dims[i], name));
    p.norms.push_back(make_batch_norm_state(config.hidden_dims[i], name));
  }
  p.head = linear(head_input_dim(config), config.num_classes, "head");
  return p;
}

/// k nearest neighbors per point, row-major N x k.
struct NeighborTable {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;

  std::span<const std::uint32_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }
};

/// Each row lists the k nearest other points by Euclidean distance; ties go
/// to the lower index.
inline NeighborTable knn_index(std::span<const float> positions, std::size_t k) {
  const std::size_t n = positions.size() / 3;
  if (k < 1) throw ContractError("knn_index: k must be >= 1");
  if (n <= k) throw DimensionError("knn_index: need more than k=" + std::to_string(k) + " points, got " +
                                   std::to_string(n));
  float lo[3], hi[3];
  for (int a = 0; a < 3; ++a) lo[a] = hi[a] = positions[a];
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], positions[3 * i + a]);
      hi[a] = std::max(hi[a], positions[3 * i + a]);
    }
  const double ex = hi[0] - lo[0], ey = hi[1] - lo[1], ez = hi[2] - lo[2];
  const double ratio = static_cast<double>(k) / static_cast<double>(n);
  // Room-like clouds concentrate on surfaces, so size cells from the bounding
  // box surface area; fall back to volume for thin configurations.
  const double by_area = std::sqrt(2.0 * (ex * ey + ey * ez + ez * ex) * ratio);
  const double by_volume = std::cbrt(ex * ey * ez * ratio);
  double cell = std::max(by_area, by_volume);
  if (!(cell > 0.0)) cell = std::max({ex, ey, ez, 1e-3});

  PointGrid grid(positions, cell);
  NeighborTable t{n, k, std::vector<std::uint32_t>(n * k)};
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto nb = grid.knn(i, k);
    std::copy(nb.begin(), nb.end(), t.indices.begin() + static_cast<std::ptrdiff_t>(i) * k);
  }
  return t;
}

struct SegmentationState {
  Tensor logits;  // N x M
  Tensor probs;   // N x M
  std::vector<int> labels;
  std::vector<float> entropies;

  std::size_t size() const { return labels.size(); }
};

/// Argmax per row; the lowest index wins ties.
inline std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.rows(), m = probs.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (probs(i, j) > probs(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

struct ForwardOutput {
  Var logits;
  Var probs;
  std::vector<Var> bn_inputs;  // pre-normalization activations, one per block
};

/// Runs the network. With a tape the graph is recorded for backward; with a
/// null tape this is pure inference.
inline ForwardOutput forward_graph(Tape* tape, const LabeledCloud& cloud, const NeighborTable& neighbors,
                                   const NetworkParams& params, BnMode bn_mode) {
  const auto& cfg = params.config;
  if (cloud.feature_dim != cfg.input_dim)
    throw DimensionError("segnet: cloud has " + std::to_string(cloud.feature_dim) + " feature channels, network expects " +
                         std::to_string(cfg.input_dim));
  const std::size_t n = cloud.size();
  if (neighbors.n != n || neighbors.k != cfg.knn_k) throw DimensionError("segnet: neighbor table does not match cloud");

  auto check = [](const Var& v, const std::string& layer) {
    for (const float x : v->value.values())
      if (!std::isfinite(x)) throw NumericError("segnet: non-finite activation in " + layer);
  };

  ForwardOutput out;
  Var h = make_var(Tensor({n, cfg.input_dim}, cloud.features));
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    if (i == cfg.aggregate_after) {
      h = concat_cols(tape, h, neighbor_mean(tape, h, neighbors.indices, neighbors.k));
    }
    const std::string name = "block" + std::to_string(i);
    Var z = add_bias(tape, matmul(tape, h, params.blocks[i].weight), params.blocks[i].bias);
    check(z, name + ".linear");
    out.bn_inputs.push_back(z);
    h = relu(tape, batch_norm(tape, z, params.norms[i], bn_mode));
    check(h, name + ".norm");
  }
  if (cfg.aggregate_after == params.blocks.size()) {
    h = concat_cols(tape, h, neighbor_mean(tape, h, neighbors.indices, neighbors.k));
  }
  out.logits = add_bias(tape, matmul(tape, h, params.head.weight), params.head.bias);
  check(out.logits, "head");
  out.probs = softmax(tape, out.logits);
  return out;
}

inline SegmentationState make_state(const ForwardOutput& fw) {
  SegmentationState s;
  s.logits = fw.logits->value;
  s.probs = fw.probs->value;
  s.labels = argmax_rows(s.probs);
  const auto h = row_entropy(nullptr, fw.probs);
  s.entropies = h->value.storage();
  return s;
}

inline SegmentationState forward(const LabeledCloud& cloud, const NeighborTable& neighbors, const NetworkParams& params,
                                 BnMode bn_mode) {
  return make_state(forward_graph(nullptr, cloud, neighbors, params, bn_mode));
}

struct TrainConfig {
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-2f);
  std::size_t epochs = 20;
  /// Clouds per optimization step; BN statistics are taken over the batch.
  std::size_t batch_size = 4;
  float bn_momentum = 0.9f;
  std::uint64_t seed = 0;
};

/// Stacks clouds into one, offsetting each neighbor table so that no
/// neighborhood crosses cloud boundaries.
inline std::pair<LabeledCloud, NeighborTable> concat_batch(const std::vector<const LabeledCloud*>& clouds,
                                                           const std::vector<const NeighborTable*>& tables) {
  LabeledCloud out;
  out.name = "batch";
  out.feature_dim = clouds.front()->feature_dim;
  out.labels.emplace();
  NeighborTable t{0, tables.front()->k, {}};
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    const auto offset = static_cast<std::uint32_t>(out.size());
    out.positions.insert(out.positions.end(), clouds[c]->positions.begin(), clouds[c]->positions.end());
    out.features.insert(out.features.end(), clouds[c]->features.begin(), clouds[c]->features.end());
    out.labels->insert(out.labels->end(), clouds[c]->labels->begin(), clouds[c]->labels->end());
    for (const auto j : tables[c]->indices) t.indices.push_back(j + offset);
    t.n += tables[c]->n;
  }
  return {std::move(out), std::move(t)};
}

struct TrainResult {
  NetworkParams params;
  std::vector<double> epoch_losses;
};

/// Cross-entropy training over mini-batches of clouds, starting from
/// `initial`. BN layers normalize with batch statistics and their running
/// statistics track an exponential moving average.
inline TrainResult train_supervised(const std::vector<LabeledCloud>& train_set, NetworkParams initial,
                                    const TrainConfig& tc) {
  if (train_set.empty()) throw ContractError("train_supervised: empty train set");
  if (tc.batch_size < 1) throw ContractError("train_supervised: batch_size must be >= 1");
  std::vector<NeighborTable> tables;
  for (const auto& c : train_set) {
    if (!c.labels) throw ContractError("train_supervised: cloud '" + c.name + "' has no labels");
    validate(c, initial.config.num_classes);
    tables.push_back(knn_index(c.positions, initial.config.knn_k));
  }
  TrainResult result{std::move(initial), {}};
  auto& params = result.params;
  const auto learnable = params.learnable();
  OptimizerState state;
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      std::vector<const LabeledCloud*> clouds;
      std::vector<const NeighborTable*> nts;
      for (std::size_t b = start; b < std::min(order.size(), start + tc.batch_size); ++b) {
        clouds.push_back(&train_set[order[b]]);
        nts.push_back(&tables[order[b]]);
      }
      const auto [batch, table] = concat_batch(clouds, nts);
      const Tensor targets = one_hot(*batch.labels, params.config.num_classes);
      Tape tape;
      params.zero_grad();
      const auto fw = forward_graph(&tape, batch, table, params, BnMode::InstanceStats);
      const std::vector<float> mask(batch.size(), 1.0f);
      const auto loss = masked_weighted_cross_entropy(&tape, fw.probs, targets, mask, Reduction::MeanRows);
      tape.backward(loss);
      step(learnable, tc.optimizer, state);
      for (std::size_t b = 0; b < params.norms.size(); ++b)
        update_running_stats(params.norms[b], fw.bn_inputs[b]->value, tc.bn_momentum);
      total += loss->value.item();
      ++steps;
    }
    result.epoch_losses.push_back(total / static_cast<double>(steps));
  }
  return result;
}

inline TrainResult train_supervised(const std::vector<LabeledCloud>& train_set, const SegNetConfig& config,
                                    const TrainConfig& tc) {
  return train_supervised(train_set, init_params(config), tc);
}

// Checkpoint layout (little-endian):
//   "IPCS" | u32 version | config record | u64 fingerprint | u32 array count |
//   per array: u32 name length, name bytes, u64 element count, f32 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError(std::string("checkpoint truncated reading ") + what);
  return v;
}

}  // namespace detail

inline void save_params(const NetworkParams& p, std::ostream& os) {
  os.write("IPCS", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const auto& c = p.config;
  detail::put<std::uint64_t>(os, c.input_dim);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.hidden_dims.size()));
  for (const auto h : c.hidden_dims) detail::put<std::uint64_t>(os, h);
  detail::put<std::uint64_t>(os, c.num_classes);
  detail::put<std::uint64_t>(os, c.knn_k);
  detail::put<std::uint64_t>(os, c.aggregate_after);
  detail::put<std::uint64_t>(os, c.seed);
  detail::put<std::uint64_t>(os, p.fingerprint);
  const auto arrays = p.named_arrays();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, values] : arrays) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint64_t>(os, values.size());
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
}

inline void save_params(const NetworkParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_params(p, os);
  if (!os) throw Error("failed writing checkpoint '" + path + "'");
}

/// Reads a checkpoint; when `expected` is given its architecture must match.
inline NetworkParams load_params(std::istream& is, const SegNetConfig* expected = nullptr) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "IPCS", 4) != 0) throw ParseError("checkpoint: bad magic");
  const auto version = detail::take<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  SegNetConfig c;
  c.input_dim = detail::take<std::uint64_t>(is, "input_dim");
  const auto layers = detail::take<std::uint32_t>(is, "layer count");
  if (layers == 0 || layers > 64) throw ParseError("checkpoint: implausible layer count");
  c.hidden_dims.clear();
  for (std::uint32_t i = 0; i < layers; ++i) c.hidden_dims.push_back(detail::take<std::uint64_t>(is, "hidden dim"));
  c.num_classes = detail::take<std::uint64_t>(is, "num_classes");
  c.knn_k = detail::take<std::uint64_t>(is, "knn_k");
  c.aggregate_after = detail::take<std::uint64_t>(is, "aggregate_after");
  c.seed = detail::take<std::uint64_t>(is, "seed");
  const auto fingerprint = detail::take<std::uint64_t>(is, "fingerprint");
  if (fingerprint != architecture_fingerprint(c)) throw ParseError("checkpoint: fingerprint does not match its config record");
  if (expected && architecture_fingerprint(*expected) != fingerprint)
    throw IncompatibleCheckpointError("checkpoint architecture differs from the requested network configuration");

  NetworkParams p = init_params(c);
  auto arrays = p.named_arrays();
  const auto count = detail::take<std::uint32_t>(is, "array count");
  if (count != arrays.size()) throw ParseError("checkpoint: expected " + std::to_string(arrays.size()) + " arrays");
  std::vector<std::vector<float>> loaded;
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto len = detail::take<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("checkpoint truncated reading array name");
    if (name != arrays[a].first) throw ParseError("checkpoint: unexpected array '" + name + "'");
    const auto numel = detail::take<std::uint64_t>(is, "element count");
    if (numel != arrays[a].second.size()) throw ParseError("checkpoint: array '" + name + "' has wrong size");
    std::vector<float> values(numel);
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(numel * sizeof(float))))
      throw ParseError("checkpoint truncated inside array '" + name + "'");
    loaded.push_back(std::move(values));
  }
  const auto learnable = p.learnable();
  for (std::size_t i = 0; i < learnable.size(); ++i) learnable[i]->value.storage() = loaded[i];
  for (std::size_t b = 0; b < p.norms.size(); ++b) {
    p.norms[b].running_mu = loaded[learnable.size() + 2 * b];
    p.norms[b].running_sigma2 = loaded[learnable.size() + 2 * b + 1];
  }
  return p;
}

inline NetworkParams load_params(const std::string& path, const SegNetConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open checkpoint '" + path + "'");
  return load_params(is, expected);
}

}  // namespace ipcs
