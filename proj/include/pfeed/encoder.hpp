#pragma once

// Transformer item encoder. In SIMO mode one pass over
// [Q_V] [Q_B] [TGT] ++ tokens yields all three role embeddings; in SISO mode a
// pass over <role token> ++ tokens yields one.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pfeed/autodiff.hpp"
#include "pfeed/catalog.hpp"
#include "pfeed/tokenizer.hpp"

namespace pfeed::model {

enum class EncoderMode : std::uint8_t { simo = 0, siso = 1 };
enum class Role : std::uint8_t { view_query = 0, buy_query = 1, target = 2 };

inline constexpr std::size_t kRoleCount = 3;

int role_token(Role role);
Role query_role(Relation r);
std::string_view to_string(EncoderMode m);
EncoderMode parse_encoder_mode(std::string_view s);

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t heads = 8;
  std::size_t hidden_dim = 128;
  std::size_t ffn_dim = 0;  // 0 means 4 * hidden_dim
  std::size_t max_seq = tok::kDefaultMaxLen + kRoleCount;
  std::size_t vocab_size = tok::kDefaultVocabSize;
  double dropout = 0.0;
  EncoderMode mode = EncoderMode::simo;

  std::size_t ffn() const { return ffn_dim ? ffn_dim : 4 * hidden_dim; }
  std::size_t prefix_length() const { return mode == EncoderMode::simo ? kRoleCount : 1; }
  void validate() const;
  /// Number of trainable scalars including the loss scale.
  std::size_t closed_form_parameter_count() const;
};

/// Multiply-adds counted as two FLOPs, for one pass over `seq_len` positions.
double attention_flops(const EncoderConfig& config, std::size_t seq_len);
double forward_flops(const EncoderConfig& config, std::size_t seq_len, std::size_t outputs);

/// The three unit vectors describing one item.
struct ItemEmbeddings {
  std::string item_id;
  std::vector<float> q_view;
  std::vector<float> q_buy;
  std::vector<float> target;

  const std::vector<float>& query(Relation r) const { return r == Relation::view ? q_view : q_buy; }
};

template <typename T>
class Encoder {
 public:
  using Tensor = ad::Tensor<T>;

  /// Deterministic initialisation: Xavier-uniform weights, N(0, 0.02)
  /// embedding tables, unit layer-norm gains, zero biases, log(10) scale.
  Encoder(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  std::span<Tensor> parameters() { return params_; }
  std::span<const Tensor> parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;
  Tensor& log_beta() { return params_.back(); }
  const Tensor& log_beta() const { return params_.back(); }
  void zero_grad();

  /// [3n x d]; rows 3i, 3i+1, 3i+2 hold item i in the view-query, buy-query
  /// and target roles. SIMO does one pass per item, SISO three.
  Tensor embed_all_roles(std::span<const tok::TokenIds> items, std::mt19937_64* rng = nullptr) const;
  /// [n x d]; row i holds items[i] in roles[i].
  Tensor embed_roles(std::span<const tok::TokenIds> items, std::span<const Role> roles,
                     std::mt19937_64* rng = nullptr) const;

  /// One SIMO pass regardless of the configured mode.
  Tensor simo_pass(std::span<const tok::TokenIds> items, std::mt19937_64* rng = nullptr) const;
  /// One SISO pass per item regardless of the configured mode.
  Tensor siso_pass(std::span<const tok::TokenIds> items, std::span<const Role> roles,
                   std::mt19937_64* rng = nullptr) const;

  ItemEmbeddings forward_simo(const tok::TokenIds& tokens) const;
  std::vector<T> forward_siso(const tok::TokenIds& tokens, Role role) const;

  /// Inference over many items in batches without recording a graph.
  std::vector<ItemEmbeddings> embed_items(std::span<const tok::TokenIds> items, std::span<const std::string> ids,
                                          std::size_t batch_size = 256) const;

  /// "PFW1" checkpoint: config block, then named little-endian float32 blobs.
  void save(const std::filesystem::path& path) const;
  static Encoder load(const std::filesystem::path& path);

 private:
  Tensor forward_packed(const std::vector<std::vector<int>>& sequences, std::size_t outputs_per_sequence,
                        std::mt19937_64* rng) const;
  const Tensor& param(std::size_t index) const { return params_[index]; }

  EncoderConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace pfeed::model
