#pragma once

// Deterministic byte-pair-encoding tokenizer for item metadata.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pfeed::tok {

/// Reserved ids. They occupy the first five vocabulary slots in this order.
inline constexpr int kQueryView = 0;
inline constexpr int kQueryBuy = 1;
inline constexpr int kTarget = 2;
inline constexpr int kPad = 3;
inline constexpr int kUnk = 4;
inline constexpr std::size_t kReservedCount = 5;

inline constexpr std::size_t kDefaultVocabSize = 20000;
inline constexpr std::size_t kDefaultMaxLen = 64;

using TokenIds = std::vector<int>;

/// Lowercases ASCII and splits on whitespace; every ASCII punctuation
/// character becomes a word of its own. Non-ASCII code points are kept whole.
std::vector<std::string> pre_segment(std::string_view text);

/// UTF-8 code points of a normalized word.
std::vector<std::string> code_points(std::string_view word);

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Learns merges by descending pair frequency (ties: lexicographically
  /// smallest pair) until `size` entries exist or nothing is left to merge,
  /// then fills the remaining budget with single characters by frequency.
  static Vocabulary train(std::span<const std::string> corpus, std::size_t size = kDefaultVocabSize);

  static Vocabulary load(const std::filesystem::path& path);
  /// One token per line, line number == id.
  void save(const std::filesystem::path& path) const;

  /// Greedy longest match against the learned tokens, word by word; characters
  /// that no token covers become [UNK]. Output is truncated to `max_len`.
  TokenIds encode(std::string_view text, std::size_t max_len = kDefaultMaxLen) const;
  /// Concatenated token strings (word boundaries are not recoverable).
  std::string detokenize(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<int> id(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t max_token_bytes_ = 1;
};

const std::vector<std::string>& reserved_tokens();

}  // namespace pfeed::tok
