#include "pfeed/encoder.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include "pfeed/errors.hpp"
#include "pfeed/instrumentation.hpp"
#include "pfeed/io.hpp"

namespace pfeed::model {

namespace {

constexpr std::size_t kPerLayer = 12;
constexpr std::size_t kTokenEmbedding = 0;
constexpr std::size_t kPositionEmbedding = 1;
constexpr std::size_t kFirstLayer = 2;

// Offsets inside one transformer block.
enum : std::size_t {
  kLn1Gain,
  kLn1Bias,
  kQkvWeight,
  kQkvBias,
  kOutWeight,
  kOutBias,
  kLn2Gain,
  kLn2Bias,
  kFfnInWeight,
  kFfnInBias,
  kFfnOutWeight,
  kFfnOutBias,
};

}  // namespace

int role_token(Role role) {
  switch (role) {
    case Role::view_query:
      return tok::kQueryView;
    case Role::buy_query:
      return tok::kQueryBuy;
    case Role::target:
      return tok::kTarget;
  }
  return tok::kTarget;
}

Role query_role(Relation r) { return r == Relation::view ? Role::view_query : Role::buy_query; }

std::string_view to_string(EncoderMode m) { return m == EncoderMode::simo ? "simo" : "siso"; }

EncoderMode parse_encoder_mode(std::string_view s) {
  if (s == "simo") return EncoderMode::simo;
  if (s == "siso") return EncoderMode::siso;
  throw InputError("unknown encoder mode '" + std::string(s) + "'");
}

void EncoderConfig::validate() const {
  if (layers == 0) throw ContractError("encoder: layers must be positive");
  if (heads == 0 || hidden_dim == 0 || hidden_dim % heads != 0) {
    throw ContractError("encoder: hidden_dim must be a positive multiple of heads");
  }
  if (vocab_size <= tok::kReservedCount) throw ContractError("encoder: vocab_size must exceed the reserved tokens");
  if (max_seq <= prefix_length()) throw ContractError("encoder: max_seq leaves no room for item tokens");
  if (dropout < 0 || dropout >= 1) throw ContractError("encoder: dropout must lie in [0, 1)");
}

std::size_t EncoderConfig::closed_form_parameter_count() const {
  const std::size_t d = hidden_dim, f = ffn();
  const std::size_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  return vocab_size * d + max_seq * d + layers * block + 2 * d + d * d + d + 1;
}

double attention_flops(const EncoderConfig& config, std::size_t seq_len) {
  const double L = static_cast<double>(seq_len);
  const double d = static_cast<double>(config.hidden_dim);
  return static_cast<double>(config.layers) * 4.0 * L * L * d;
}

double forward_flops(const EncoderConfig& config, std::size_t seq_len, std::size_t outputs) {
  const double L = static_cast<double>(seq_len);
  const double d = static_cast<double>(config.hidden_dim);
  const double f = static_cast<double>(config.ffn());
  const double linear = static_cast<double>(config.layers) * 2.0 * L * (3 * d * d + d * d + 2 * d * f);
  return linear + attention_flops(config, seq_len) + 2.0 * static_cast<double>(outputs) * d * d;
}

template <typename T>
Encoder<T>::Encoder(EncoderConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden_dim, f = config_.ffn();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> embed_init(0.0, 0.02);

  auto add_param = [&](std::string name, ad::Shape shape, auto&& fill) {
    std::vector<T> values(ad::numel_of(shape));
    for (auto& v : values) v = static_cast<T>(fill());
    params_.push_back(Tensor::from(std::move(shape), std::move(values), true));
    names_.push_back(std::move(name));
  };
  auto normal = [&] { return embed_init(rng); };
  auto zero = [] { return 0.0; };
  auto one = [] { return 1.0; };
  auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return [&rng, bound] { return std::uniform_real_distribution<double>(-bound, bound)(rng); };
  };

  add_param("token_embedding", {config_.vocab_size, d}, normal);
  add_param("position_embedding", {config_.max_seq, d}, normal);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add_param(p + "ln1.gain", {d}, one);
    add_param(p + "ln1.bias", {d}, zero);
    add_param(p + "attn.qkv.weight", {d, 3 * d}, xavier(d, 3 * d));
    add_param(p + "attn.qkv.bias", {3 * d}, zero);
    add_param(p + "attn.out.weight", {d, d}, xavier(d, d));
    add_param(p + "attn.out.bias", {d}, zero);
    add_param(p + "ln2.gain", {d}, one);
    add_param(p + "ln2.bias", {d}, zero);
    add_param(p + "ffn.in.weight", {d, f}, xavier(d, f));
    add_param(p + "ffn.in.bias", {f}, zero);
    add_param(p + "ffn.out.weight", {f, d}, xavier(f, d));
    add_param(p + "ffn.out.bias", {d}, zero);
  }
  add_param("final_ln.gain", {d}, one);
  add_param("final_ln.bias", {d}, zero);
  add_param("projection.weight", {d, d}, xavier(d, d));
  add_param("projection.bias", {d}, zero);
  add_param("log_beta", {1}, [] { return std::log(10.0); });
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

template <typename T>
void Encoder<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
typename Encoder<T>::Tensor Encoder<T>::forward_packed(const std::vector<std::vector<int>>& sequences,
                                                       std::size_t outputs_per_sequence,
                                                       std::mt19937_64* rng) const {
  if (sequences.empty()) throw ContractError("encoder: empty batch");
  instrumentation::encoder_forward_calls() += sequences.size();
  const T drop = rng ? static_cast<T>(config_.dropout) : T(0);

  std::vector<std::size_t> token_rows, position_rows, output_rows;
  std::vector<ad::Segment> segments;
  for (const auto& seq : sequences) {
    const std::size_t offset = token_rows.size();
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
      token_rows.push_back(static_cast<std::size_t>(seq[pos]));
      position_rows.push_back(pos);
    }
    segments.push_back({offset, seq.size()});
    for (std::size_t k = 0; k < outputs_per_sequence; ++k) output_rows.push_back(offset + k);
  }

  auto maybe_drop = [&](const Tensor& t) { return drop > T(0) ? ad::dropout(t, drop, *rng) : t; };

  Tensor x = ad::add(ad::gather_rows(param(kTokenEmbedding), std::span<const std::size_t>(token_rows)),
                     ad::gather_rows(param(kPositionEmbedding), std::span<const std::size_t>(position_rows)));
  x = maybe_drop(x);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::size_t b = kFirstLayer + l * kPerLayer;
    Tensor h = ad::layer_norm(x, param(b + kLn1Gain), param(b + kLn1Bias));
    Tensor qkv = ad::add_bias(ad::matmul(h, param(b + kQkvWeight)), param(b + kQkvBias));
    Tensor attn = ad::multi_head_attention(qkv, std::span<const ad::Segment>(segments), config_.heads);
    attn = ad::add_bias(ad::matmul(attn, param(b + kOutWeight)), param(b + kOutBias));
    x = ad::add(x, maybe_drop(attn));
    h = ad::layer_norm(x, param(b + kLn2Gain), param(b + kLn2Bias));
    Tensor ff = ad::gelu(ad::add_bias(ad::matmul(h, param(b + kFfnInWeight)), param(b + kFfnInBias)));
    ff = ad::add_bias(ad::matmul(ff, param(b + kFfnOutWeight)), param(b + kFfnOutBias));
    x = ad::add(x, maybe_drop(ff));
  }
  const std::size_t tail = kFirstLayer + config_.layers * kPerLayer;
  Tensor picked = ad::gather_rows(x, std::span<const std::size_t>(output_rows));
  picked = ad::layer_norm(picked, param(tail), param(tail + 1));
  Tensor projected = ad::add_bias(ad::matmul(picked, param(tail + 2)), param(tail + 3));
  return ad::l2_normalize_rows(projected);
}

namespace {

std::vector<int> with_prefix(std::span<const int> prefix, const tok::TokenIds& tokens, const EncoderConfig& config) {
  const std::size_t room = config.max_seq - prefix.size();
  std::vector<int> seq(prefix.begin(), prefix.end());
  const std::size_t n = std::min(room, tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    const int t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw InputError("encoder: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
    seq.push_back(t);
  }
  return seq;
}

}  // namespace

template <typename T>
typename Encoder<T>::Tensor Encoder<T>::simo_pass(std::span<const tok::TokenIds> items, std::mt19937_64* rng) const {
  static constexpr int kPrefix[] = {tok::kQueryView, tok::kQueryBuy, tok::kTarget};
  if (config_.max_seq <= kRoleCount) throw ContractError("encoder: max_seq too small for a SIMO pass");
  std::vector<std::vector<int>> seqs;
  seqs.reserve(items.size());
  for (const auto& item : items) seqs.push_back(with_prefix(kPrefix, item, config_));
  return forward_packed(seqs, kRoleCount, rng);
}

template <typename T>
typename Encoder<T>::Tensor Encoder<T>::siso_pass(std::span<const tok::TokenIds> items, std::span<const Role> roles,
                                                  std::mt19937_64* rng) const {
  if (items.size() != roles.size()) throw DimensionError("encoder: one role per item required");
  std::vector<std::vector<int>> seqs;
  seqs.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const int prefix[1] = {role_token(roles[i])};
    seqs.push_back(with_prefix(prefix, items[i], config_));
  }
  return forward_packed(seqs, 1, rng);
}

template <typename T>
typename Encoder<T>::Tensor Encoder<T>::embed_all_roles(std::span<const tok::TokenIds> items,
                                                        std::mt19937_64* rng) const {
  if (config_.mode == EncoderMode::simo) return simo_pass(items, rng);
  std::vector<tok::TokenIds> repeated;
  std::vector<Role> roles;
  repeated.reserve(items.size() * kRoleCount);
  for (const auto& item : items) {
    for (Role r : {Role::view_query, Role::buy_query, Role::target}) {
      repeated.push_back(item);
      roles.push_back(r);
    }
  }
  return siso_pass(repeated, roles, rng);
}

template <typename T>
typename Encoder<T>::Tensor Encoder<T>::embed_roles(std::span<const tok::TokenIds> items, std::span<const Role> roles,
                                                    std::mt19937_64* rng) const {
  if (items.size() != roles.size()) throw DimensionError("encoder: one role per item required");
  if (config_.mode == EncoderMode::siso) return siso_pass(items, roles, rng);
  Tensor all = simo_pass(items, rng);
  std::vector<std::size_t> rows(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) rows[i] = kRoleCount * i + static_cast<std::size_t>(roles[i]);
  return ad::gather_rows(all, std::span<const std::size_t>(rows));
}

template <typename T>
ItemEmbeddings Encoder<T>::forward_simo(const tok::TokenIds& tokens) const {
  ad::NoGradGuard guard;
  const tok::TokenIds items[1] = {tokens};
  Tensor out = simo_pass(items);
  const std::size_t d = config_.hidden_dim;
  auto row = [&](std::size_t r) {
    std::vector<float> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = static_cast<float>(out.data()[r * d + j]);
    return v;
  };
  return ItemEmbeddings{"", row(0), row(1), row(2)};
}

template <typename T>
std::vector<T> Encoder<T>::forward_siso(const tok::TokenIds& tokens, Role role) const {
  ad::NoGradGuard guard;
  const tok::TokenIds items[1] = {tokens};
  const Role roles[1] = {role};
  Tensor out = siso_pass(items, roles);
  return {out.data().begin(), out.data().end()};
}

template <typename T>
std::vector<ItemEmbeddings> Encoder<T>::embed_items(std::span<const tok::TokenIds> items,
                                                    std::span<const std::string> ids, std::size_t batch_size) const {
  if (items.size() != ids.size()) throw DimensionError("embed_items: one id per item required");
  ad::NoGradGuard guard;
  const std::size_t d = config_.hidden_dim;
  std::vector<ItemEmbeddings> out;
  out.reserve(items.size());
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, items.size() - start);
    Tensor e = embed_all_roles(items.subspan(start, n));
    const auto data = e.data();
    for (std::size_t i = 0; i < n; ++i) {
      ItemEmbeddings emb;
      emb.item_id = ids[start + i];
      for (auto* dst : {&emb.q_view, &emb.q_buy, &emb.target}) dst->resize(d);
      for (std::size_t j = 0; j < d; ++j) {
        emb.q_view[j] = static_cast<float>(data[(3 * i + 0) * d + j]);
        emb.q_buy[j] = static_cast<float>(data[(3 * i + 1) * d + j]);
        emb.target[j] = static_cast<float>(data[(3 * i + 2) * d + j]);
      }
      out.push_back(std::move(emb));
    }
  }
  return out;
}

template <typename T>
void Encoder<T>::save(const std::filesystem::path& path) const {
  io::write_atomic(
      path,
      [&](std::ostream& os) {
        os.write("PFW1", 4);
        io::write_u32(os, static_cast<std::uint32_t>(config_.layers));
        io::write_u32(os, static_cast<std::uint32_t>(config_.heads));
        io::write_u32(os, static_cast<std::uint32_t>(config_.hidden_dim));
        io::write_u32(os, static_cast<std::uint32_t>(config_.ffn()));
        io::write_u32(os, static_cast<std::uint32_t>(config_.max_seq));
        io::write_u32(os, static_cast<std::uint32_t>(config_.vocab_size));
        io::write_u32(os, static_cast<std::uint32_t>(config_.mode));
        io::write_f32(os, static_cast<float>(config_.dropout));
        io::write_u32(os, static_cast<std::uint32_t>(params_.size()));
        std::vector<float> buf;
        for (std::size_t i = 0; i < params_.size(); ++i) {
          io::write_string(os, names_[i]);
          const auto& shape = params_[i].shape();
          io::write_u32(os, static_cast<std::uint32_t>(shape.size()));
          for (auto dim : shape) io::write_u32(os, static_cast<std::uint32_t>(dim));
          buf.assign(params_[i].data().begin(), params_[i].data().end());
          io::write_f32_block(os, buf);
        }
      },
      true);
}

template <typename T>
Encoder<T> Encoder<T>::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path.string());
  io::expect_magic(is, "PFW1", path);
  EncoderConfig config;
  config.layers = io::read_u32(is);
  config.heads = io::read_u32(is);
  config.hidden_dim = io::read_u32(is);
  config.ffn_dim = io::read_u32(is);
  config.max_seq = io::read_u32(is);
  config.vocab_size = io::read_u32(is);
  const auto mode = io::read_u32(is);
  if (mode > 1) throw InputError(path.string() + ": unknown encoder mode");
  config.mode = static_cast<EncoderMode>(mode);
  config.dropout = io::read_f32(is);
  Encoder enc(config, 0);
  const auto count = io::read_u32(is);
  if (count != enc.params_.size()) throw InputError(path.string() + ": parameter count does not match config");
  std::vector<float> buf;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = io::read_string(is);
    if (name != enc.names_[i]) throw InputError(path.string() + ": unexpected parameter '" + name + "'");
    const auto ndim = io::read_u32(is);
    ad::Shape shape(ndim);
    for (auto& dim : shape) dim = io::read_u32(is);
    if (shape != enc.params_[i].shape()) throw InputError(path.string() + ": shape mismatch for '" + name + "'");
    buf.resize(ad::numel_of(shape));
    io::read_f32_block(is, buf);
    auto dst = enc.params_[i].mutable_data();
    for (std::size_t j = 0; j < buf.size(); ++j) dst[j] = static_cast<T>(buf[j]);
  }
  return enc;
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace pfeed::model
