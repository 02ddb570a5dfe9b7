#pragma once

// Dual-encoder contrastive training: query->target and target->query softmax
// losses over in-batch and uniformly sampled negatives, with a learned scale.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pfeed/autodiff.hpp"
#include "pfeed/catalog.hpp"
#include "pfeed/encoder.hpp"

namespace pfeed::train {

enum class Sampling : std::uint8_t { in_batch, uniform, mixed, mixed_plus_self };

std::string_view to_string(Sampling s);
Sampling parse_sampling(std::string_view s);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t uniform_negatives = 64;
  Sampling sampling = Sampling::mixed;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  double clip_norm = 0.5;
  std::uint64_t seed = 0;
  double beta_init = 10.0;
  std::string optimizer = "adam";
  std::size_t max_steps = 0;  // 0: no cap

  bool uses_in_batch() const { return sampling != Sampling::uniform; }
  bool uses_uniform() const { return sampling != Sampling::in_batch; }
  void validate() const;
};

/// Row of Q for the pair's relation.
const std::vector<float>& select_query_embedding(const model::ItemEmbeddings& emb, Relation r);

/// Query->target loss. Row i of `q` is scored against every row of `t`
/// (positive at column i) and every row of `t_neg`. With `in_batch` false the
/// only batch column of row i is its own positive. `t_neg` may be undefined.
template <typename T>
ad::Tensor<T> loss_query_to_target(const ad::Tensor<T>& q, const ad::Tensor<T>& t, const ad::Tensor<T>& t_neg,
                                   const ad::Tensor<T>& beta, bool in_batch = true);

/// Target->query loss; the mirror of the above with the roles exchanged.
template <typename T>
ad::Tensor<T> loss_target_to_query(const ad::Tensor<T>& q, const ad::Tensor<T>& t, const ad::Tensor<T>& q_neg,
                                   const ad::Tensor<T>& beta, bool in_batch = true);

/// Positive pairs refer to items by index into `Batch::tokens`-compatible
/// item tables; identical indices mean identical items.
struct Batch {
  std::vector<std::size_t> query_items;
  std::vector<Relation> relations;
  std::vector<std::size_t> target_items;
  std::vector<std::size_t> negative_items;
};

template <typename T>
struct LossParts {
  ad::Tensor<T> total;
  ad::Tensor<T> l1;
  ad::Tensor<T> l2;
  std::size_t l1_columns = 0;  // candidates per query row
  std::size_t l2_columns = 0;  // candidates per target row
  std::size_t masked = 0;      // collisions with the positive item, removed
};

/// Encodes every distinct item of the batch once and evaluates L1 + L2.
/// Candidates that are the same item as a row's positive (other than the
/// positive itself) are masked out.
template <typename T>
LossParts<T> total_loss(const model::Encoder<T>& encoder, std::span<const tok::TokenIds> item_tokens,
                        const Batch& batch, const TrainConfig& config, std::mt19937_64* dropout_rng = nullptr);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<ad::Tensor<T>> params, double max_norm);

template <typename T>
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(std::span<ad::Tensor<T>> params);

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct PositivePair {
  std::size_t query;
  Relation relation;
  std::size_t target;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0, l1 = 0, l2 = 0, beta = 0, grad_norm = 0;
};

struct TrainData {
  std::vector<tok::TokenIds> item_tokens;  // indexed by item
  std::vector<PositivePair> pairs;
  std::vector<std::size_t> negative_pool;  // item indices eligible as uniform negatives
};

using StepCallback = std::function<void(const TraceRow&)>;

/// Trains `encoder` in place and returns the per-step loss trace. The loss
/// scale is reset to beta_init before the first step.
template <typename T>
std::vector<TraceRow> fit(model::Encoder<T>& encoder, const TrainData& data, const TrainConfig& config,
                          const StepCallback& on_step = {});

void write_trace(const std::filesystem::path& path, std::span<const TraceRow> trace, std::string_view header = {});
std::vector<TraceRow> read_trace(const std::filesystem::path& path);

}  // namespace pfeed::train
