#include "pfeed/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"
#include "pfeed/pair_miner.hpp"

namespace pfeed::train {

using model::Role;

std::string_view to_string(Sampling s) {
  switch (s) {
    case Sampling::in_batch: return "in_batch";
    case Sampling::uniform: return "uniform";
    case Sampling::mixed: return "mixed";
    case Sampling::mixed_plus_self: return "mixed_plus_self";
  }
  return "?";
}

Sampling parse_sampling(std::string_view s) {
  for (Sampling v : {Sampling::in_batch, Sampling::uniform, Sampling::mixed, Sampling::mixed_plus_self}) {
    if (to_string(v) == s) return v;
  }
  throw InputError("unknown sampling strategy '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (uses_in_batch() && batch_size < 2) {
    throw ContractError("batch_size must be >= 2 when in-batch negatives are used");
  }
  if (uses_uniform() && uniform_negatives < 1) {
    throw ContractError("uniform_negatives must be >= 1 for sampling '" + std::string(to_string(sampling)) + "'");
  }
  if (!(clip_norm > 0)) throw ContractError("clip_norm must be > 0");
  if (!(learning_rate > 0)) throw ContractError("learning_rate must be > 0");
  if (!(beta_init > 0)) throw ContractError("beta_init must be > 0");
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (optimizer != "adam") throw ContractError("unsupported optimizer '" + optimizer + "' (available: adam)");
}

const std::vector<float>& select_query_embedding(const model::ItemEmbeddings& emb, Relation r) {
  return emb.query(r);
}

namespace {

template <typename T>
void require_unit_rows(const ad::Tensor<T>& m, const char* what) {
  if (!m.defined()) return;
  if (m.dim() != 2) throw DimensionError(std::string(what) + " must be a matrix");
  const std::size_t c = m.cols();
  const auto v = m.data();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += double(v[r * c + j]) * double(v[r * c + j]);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-3) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " is not unit norm");
    }
  }
}

// Rows of `anchor` against their own positive (and, with in_batch, every other
// positive), followed by extra negative logit blocks [rows x m]. `mask`, when
// non-empty, is an additive row-major mask over the concatenated columns.
template <typename T>
ad::Tensor<T> directional_loss(const ad::Tensor<T>& anchor, const ad::Tensor<T>& positive, bool in_batch,
                               std::vector<ad::Tensor<T>> blocks, const ad::Tensor<T>& beta,
                               const std::vector<T>& mask) {
  const std::size_t rows = anchor.rows();
  std::vector<std::size_t> targets(rows, 0);
  ad::Tensor<T> first;
  if (in_batch) {
    first = ad::matmul(anchor, ad::transpose(positive));
    for (std::size_t i = 0; i < rows; ++i) targets[i] = i;
  } else {
    first = ad::rowwise_dot(anchor, positive);
  }
  blocks.insert(blocks.begin(), first);
  ad::Tensor<T> logits = blocks.size() == 1 ? first : ad::concat_cols(std::span<const ad::Tensor<T>>(blocks));
  logits = ad::mul(logits, beta);
  if (!mask.empty()) logits = ad::add(logits, ad::Tensor<T>::from(logits.shape(), mask));
  return ad::softmax_cross_entropy_rows(logits, std::span<const std::size_t>(targets));
}

template <typename T>
void check_pair_shapes(const ad::Tensor<T>& q, const ad::Tensor<T>& t, const ad::Tensor<T>& neg,
                       const ad::Tensor<T>& beta) {
  if (q.dim() != 2 || t.dim() != 2 || q.rows() != t.rows() || q.cols() != t.cols()) {
    throw DimensionError("loss: Q and T must both be [B x d]");
  }
  if (q.rows() < 1) throw ContractError("loss: empty batch");
  if (neg.defined() && (neg.dim() != 2 || neg.cols() != q.cols())) {
    throw DimensionError("loss: negatives must be [N x d]");
  }
  if (beta.numel() != 1) throw DimensionError("loss: beta must hold one value");
  require_unit_rows(q, "Q");
  require_unit_rows(t, "T");
  require_unit_rows(neg, "negatives");
}

}  // namespace

template <typename T>
ad::Tensor<T> loss_query_to_target(const ad::Tensor<T>& q, const ad::Tensor<T>& t, const ad::Tensor<T>& t_neg,
                                   const ad::Tensor<T>& beta, bool in_batch) {
  check_pair_shapes(q, t, t_neg, beta);
  std::vector<ad::Tensor<T>> blocks;
  if (t_neg.defined()) blocks.push_back(ad::matmul(q, ad::transpose(t_neg)));
  return directional_loss(q, t, in_batch, std::move(blocks), beta, {});
}

template <typename T>
ad::Tensor<T> loss_target_to_query(const ad::Tensor<T>& q, const ad::Tensor<T>& t, const ad::Tensor<T>& q_neg,
                                   const ad::Tensor<T>& beta, bool in_batch) {
  check_pair_shapes(q, t, q_neg, beta);
  std::vector<ad::Tensor<T>> blocks;
  if (q_neg.defined()) blocks.push_back(ad::matmul(t, ad::transpose(q_neg)));
  return directional_loss(t, q, in_batch, std::move(blocks), beta, {});
}

namespace {

// Maps (item, role) requests onto rows of one encoder output. SIMO encodes
// each distinct item once; SISO encodes each distinct (item, role) once.
class RowPlan {
 public:
  explicit RowPlan(bool simo) : simo_(simo) {}

  std::size_t request(std::size_t item, Role role) {
    if (simo_) {
      auto [it, inserted] = item_slot_.try_emplace(item, items_.size());
      if (inserted) items_.push_back(item);
      return model::kRoleCount * it->second + static_cast<std::size_t>(role);
    }
    auto [it, inserted] = pair_slot_.try_emplace({item, role}, items_.size());
    if (inserted) {
      items_.push_back(item);
      roles_.push_back(role);
    }
    return it->second;
  }

  template <typename T>
  ad::Tensor<T> encode(const model::Encoder<T>& encoder, std::span<const tok::TokenIds> item_tokens,
                       std::mt19937_64* rng) const {
    std::vector<tok::TokenIds> tokens;
    tokens.reserve(items_.size());
    for (auto i : items_) tokens.push_back(item_tokens[i]);
    if (simo_) return encoder.simo_pass(tokens, rng);
    return encoder.siso_pass(tokens, roles_, rng);
  }

 private:
  bool simo_;
  std::vector<std::size_t> items_;
  std::vector<Role> roles_;
  std::map<std::size_t, std::size_t> item_slot_;
  std::map<std::pair<std::size_t, Role>, std::size_t> pair_slot_;
};

template <typename T>
ad::Tensor<T> gather(const ad::Tensor<T>& all, const std::vector<std::size_t>& rows) {
  return ad::gather_rows(all, std::span<const std::size_t>(rows));
}

}  // namespace

template <typename T>
LossParts<T> total_loss(const model::Encoder<T>& encoder, std::span<const tok::TokenIds> item_tokens,
                        const Batch& batch, const TrainConfig& config, std::mt19937_64* dropout_rng) {
  config.validate();
  const std::size_t B = batch.query_items.size();
  if (B == 0) throw ContractError("total_loss: empty batch");
  if (batch.relations.size() != B || batch.target_items.size() != B) {
    throw ContractError("total_loss: query, relation and target lists differ in length");
  }
  if (config.uses_in_batch() && B < 2) throw ContractError("total_loss: in-batch negatives need |B| >= 2");
  const std::size_t N = batch.negative_items.size();
  if (N != (config.uses_uniform() ? config.uniform_negatives : 0)) {
    throw ContractError("total_loss: expected " + std::to_string(config.uses_uniform() ? config.uniform_negatives : 0) +
                        " uniform negatives, got " + std::to_string(N));
  }
  auto check_item = [&](std::size_t i) {
    if (i >= item_tokens.size()) throw InputError("total_loss: item index out of range");
  };
  for (auto i : batch.query_items) check_item(i);
  for (auto i : batch.target_items) check_item(i);
  for (auto i : batch.negative_items) check_item(i);

  const bool self = config.sampling == Sampling::mixed_plus_self;
  std::vector<std::size_t> buy_pairs;
  if (self) {
    for (std::size_t i = 0; i < B; ++i)
      if (batch.relations[i] == Relation::buy) buy_pairs.push_back(i);
  }
  bool any_view = false, any_buy = false;
  for (auto r : batch.relations) (r == Relation::view ? any_view : any_buy) = true;

  RowPlan plan(encoder.config().mode == model::EncoderMode::simo);
  std::vector<std::size_t> q_rows, t_rows, tneg_rows, qv_neg_rows, qb_neg_rows, self_t_rows, self_q_rows;
  for (std::size_t i = 0; i < B; ++i) {
    q_rows.push_back(plan.request(batch.query_items[i], model::query_role(batch.relations[i])));
    t_rows.push_back(plan.request(batch.target_items[i], Role::target));
  }
  for (auto n : batch.negative_items) {
    tneg_rows.push_back(plan.request(n, Role::target));
    if (any_view) qv_neg_rows.push_back(plan.request(n, Role::view_query));
    if (any_buy) qb_neg_rows.push_back(plan.request(n, Role::buy_query));
  }
  for (auto j : buy_pairs) {
    self_t_rows.push_back(plan.request(batch.query_items[j], Role::target));
    self_q_rows.push_back(plan.request(batch.target_items[j], Role::buy_query));
  }

  const ad::Tensor<T> all = plan.encode(encoder, item_tokens, dropout_rng);
  const ad::Tensor<T> Q = gather(all, q_rows);
  const ad::Tensor<T> Tp = gather(all, t_rows);
  const ad::Tensor<T> beta = ad::exp(encoder.log_beta());

  // Column item identities, used to mask accidental hits on the positive item.
  constexpr T kMasked = T(-1e30);
  LossParts<T> out;
  const bool in_batch = config.uses_in_batch();

  // Query -> target.
  std::vector<ad::Tensor<T>> blocks1;
  std::vector<std::size_t> cols1;  // item of each extra column
  if (N > 0) {
    blocks1.push_back(ad::matmul(Q, ad::transpose(gather(all, tneg_rows))));
    cols1.insert(cols1.end(), batch.negative_items.begin(), batch.negative_items.end());
  }
  if (!buy_pairs.empty()) {
    blocks1.push_back(ad::matmul(Q, ad::transpose(gather(all, self_t_rows))));
    for (auto j : buy_pairs) cols1.push_back(batch.query_items[j]);
  }
  const std::size_t first1 = in_batch ? B : 1;
  out.l1_columns = first1 + cols1.size();
  std::vector<T> mask1(B * out.l1_columns, T(0));
  bool any_mask1 = false;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t pos = batch.target_items[i];
    auto hit = [&](std::size_t c) {
      mask1[i * out.l1_columns + c] = kMasked;
      any_mask1 = true;
      ++out.masked;
    };
    if (in_batch) {
      for (std::size_t j = 0; j < B; ++j)
        if (j != i && batch.target_items[j] == pos) hit(j);
    }
    for (std::size_t c = 0; c < cols1.size(); ++c)
      if (cols1[c] == pos) hit(first1 + c);
  }
  if (!any_mask1) mask1.clear();
  out.l1 = directional_loss(Q, Tp, in_batch, std::move(blocks1), beta, mask1);

  // Target -> query. Uniform negatives are scored in the query role of the
  // row's own relation.
  std::vector<ad::Tensor<T>> blocks2;
  if (N > 0) {
    ad::Tensor<T> sv, sb;
    if (any_view) sv = ad::matmul(Tp, ad::transpose(gather(all, qv_neg_rows)));
    if (any_buy) sb = ad::matmul(Tp, ad::transpose(gather(all, qb_neg_rows)));
    if (any_view && any_buy) {
      std::vector<T> mv(B * N, T(0)), mb(B * N, T(0));
      for (std::size_t i = 0; i < B; ++i) {
        auto& m = batch.relations[i] == Relation::view ? mv : mb;
        std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(i * N), N, T(1));
      }
      blocks2.push_back(ad::add(ad::mul(sv, ad::Tensor<T>::from({B, N}, std::move(mv))),
                                ad::mul(sb, ad::Tensor<T>::from({B, N}, std::move(mb)))));
    } else {
      blocks2.push_back(any_view ? sv : sb);
    }
  }
  if (!buy_pairs.empty()) blocks2.push_back(ad::matmul(Tp, ad::transpose(gather(all, self_q_rows))));
  const std::size_t first2 = in_batch ? B : 1;
  out.l2_columns = first2 + N + buy_pairs.size();
  std::vector<T> mask2(B * out.l2_columns, T(0));
  bool any_mask2 = false;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t qi = batch.query_items[i];
    const Relation ri = batch.relations[i];
    auto hit = [&](std::size_t c) {
      mask2[i * out.l2_columns + c] = kMasked;
      any_mask2 = true;
      ++out.masked;
    };
    if (in_batch) {
      for (std::size_t j = 0; j < B; ++j)
        if (j != i && batch.query_items[j] == qi && batch.relations[j] == ri) hit(j);
    }
    for (std::size_t c = 0; c < N; ++c)
      if (batch.negative_items[c] == qi) hit(first2 + c);
    if (ri == Relation::buy) {
      for (std::size_t c = 0; c < buy_pairs.size(); ++c)
        if (batch.target_items[buy_pairs[c]] == qi) hit(first2 + N + c);
    }
  }
  if (!any_mask2) mask2.clear();
  out.l2 = directional_loss(Tp, Q, in_batch, std::move(blocks2), beta, mask2);

  out.total = ad::add(out.l1, out.l2);
  return out;
}

template <typename T>
double clip_grad_norm(std::span<ad::Tensor<T>> params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    // Slightly under max_norm so rounding in T never lands above it.
    const T factor = static_cast<T>(max_norm / norm * (1.0 - 1e-6));
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
void Adam<T>::step(std::span<ad::Tensor<T>> params) {
  if (m_.empty()) {
    for (auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = b1_ * m[i] + (1 - b1_) * gi;
      v[i] = b2_ * v[i] + (1 - b2_) * gi * gi;
      w[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
    }
  }
}

template <typename T>
std::vector<TraceRow> fit(model::Encoder<T>& encoder, const TrainData& data, const TrainConfig& config,
                          const StepCallback& on_step) {
  config.validate();
  if (data.pairs.empty()) throw InputError("train: no training pairs");
  for (const auto& p : data.pairs) {
    if (p.query >= data.item_tokens.size() || p.target >= data.item_tokens.size()) {
      throw InputError("train: pair references an unknown item");
    }
  }
  if (config.uses_uniform() && data.negative_pool.size() < config.uniform_negatives) {
    throw InputError("train: negative pool holds " + std::to_string(data.negative_pool.size()) + " items, need " +
                     std::to_string(config.uniform_negatives));
  }

  encoder.log_beta().mutable_data()[0] = static_cast<T>(std::log(config.beta_init));
  std::mt19937_64 rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<T> adam(config.learning_rate);
  const std::size_t min_batch = config.uses_in_batch() ? 2 : 1;

  std::vector<TraceRow> trace;
  std::vector<std::size_t> order(data.pairs.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
    }
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) return trace;
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      if (n < min_batch) continue;
      Batch batch;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& p = data.pairs[order[start + k]];
        batch.query_items.push_back(p.query);
        batch.relations.push_back(p.relation);
        batch.target_items.push_back(p.target);
      }
      if (config.uses_uniform()) {
        for (auto idx : mining::sample_without_replacement(data.negative_pool.size(), config.uniform_negatives, rng)) {
          batch.negative_items.push_back(data.negative_pool[idx]);
        }
      }

      encoder.zero_grad();
      const double beta_before = std::exp(double(encoder.log_beta().item()));
      auto parts = total_loss(encoder, data.item_tokens, batch, config, &dropout_rng);
      const double loss = parts.total.item();
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at step " << step + 1 << " (L1=" << parts.l1.item() << ", L2=" << parts.l2.item()
            << ", beta=" << beta_before << ")";
        throw NumericError(msg.str());
      }
      parts.total.backward();
      const double norm = clip_grad_norm<T>(encoder.parameters(), config.clip_norm);
      adam.step(encoder.parameters());
      ++step;
      TraceRow row{step, loss, double(parts.l1.item()), double(parts.l2.item()), beta_before, norm};
      trace.push_back(row);
      if (on_step) on_step(row);
    }
  }
  return trace;
}

void write_trace(const std::filesystem::path& path, std::span<const TraceRow> trace, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    os << "# step\tL\tL1\tL2\tbeta\tgrad_norm\n";
    os << std::setprecision(9);
    for (const auto& r : trace) {
      os << r.step << '\t' << r.loss << '\t' << r.l1 << '\t' << r.l2 << '\t' << r.beta << '\t' << r.grad_norm << '\n';
    }
  });
}

std::vector<TraceRow> read_trace(const std::filesystem::path& path) {
  std::vector<TraceRow> out;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t line) {
    if (f.size() != 6) throw InputError(path.string() + ":" + std::to_string(line) + ": expected 6 trace fields");
    out.push_back({static_cast<std::size_t>(io::parse_int(f[0])), io::parse_double(f[1]), io::parse_double(f[2]),
                   io::parse_double(f[3]), io::parse_double(f[4]), io::parse_double(f[5])});
  });
  return out;
}

#define PFEED_INSTANTIATE(T)                                                                                         \
  template ad::Tensor<T> loss_query_to_target(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,   \
                                              const ad::Tensor<T>&, bool);                                         \
  template ad::Tensor<T> loss_target_to_query(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,   \
                                              const ad::Tensor<T>&, bool);                                         \
  template LossParts<T> total_loss(const model::Encoder<T>&, std::span<const tok::TokenIds>, const Batch&,        \
                                   const TrainConfig&, std::mt19937_64*);                                           \
  template double clip_grad_norm(std::span<ad::Tensor<T>>, double);                                                 \
  template class Adam<T>;                                                                                           \
  template std::vector<TraceRow> fit(model::Encoder<T>&, const TrainData&, const TrainConfig&, const StepCallback&);

PFEED_INSTANTIATE(float)
PFEED_INSTANTIATE(double)

}  // namespace pfeed::train
