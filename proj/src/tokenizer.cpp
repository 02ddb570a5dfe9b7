#include "pfeed/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <ostream>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed::tok {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kReserved{"[Q_V]", "[Q_B]", "[TGT]", "[PAD]", "[UNK]"};
  return kReserved;
}

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

}  // namespace

std::vector<std::string> pre_segment(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    const std::size_t len = std::min(utf8_length(c), text.size() - i);
    if (len == 1) {
      if (std::isspace(c)) {
        flush();
      } else if (std::ispunct(c)) {
        flush();
        words.emplace_back(1, static_cast<char>(c));
      } else {
        current.push_back(static_cast<char>(std::tolower(c)));
      }
    } else {
      current.append(text.substr(i, len));
    }
    i += len;
  }
  flush();
  return words;
}

std::vector<std::string> code_points(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw InputError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
    if (i >= kReservedCount) max_token_bytes_ = std::max(max_token_bytes_, tokens_[i].size());
  }
}

Vocabulary Vocabulary::train(std::span<const std::string> corpus, std::size_t size) {
  if (corpus.empty()) throw InputError("train_vocab: empty corpus");
  if (size <= kReservedCount) throw ContractError("train_vocab: size must exceed the 5 reserved tokens");

  // Symbol table: every distinct symbol string gets a small integer.
  std::vector<std::string> symbols;
  std::unordered_map<std::string, std::uint32_t> symbol_ids;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_ids.emplace(s, static_cast<std::uint32_t>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };

  std::map<std::string, std::size_t> word_freq;
  for (const auto& text : corpus) {
    for (auto& w : pre_segment(text)) ++word_freq[w];
  }
  std::map<std::string, std::size_t> char_freq;
  std::vector<std::vector<std::uint32_t>> words;
  std::vector<std::size_t> freqs;
  for (const auto& [w, f] : word_freq) {
    std::vector<std::uint32_t> seq;
    for (const auto& cp : code_points(w)) {
      seq.push_back(intern(cp));
      char_freq[cp] += f;
    }
    words.push_back(std::move(seq));
    freqs.push_back(f);
  }

  std::vector<std::string> tokens = reserved_tokens();
  std::unordered_map<std::string, bool> present;
  for (const auto& t : tokens) present[t] = true;
  const std::size_t budget = size;

  std::unordered_map<std::uint64_t, std::size_t> pair_counts;
  while (tokens.size() < budget) {
    pair_counts.clear();
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& seq = words[w];
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        pair_counts[(static_cast<std::uint64_t>(seq[i]) << 32) | seq[i + 1]] += freqs[w];
      }
    }
    if (pair_counts.empty()) break;

    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count < best_count) continue;
      if (count > best_count) {
        best = key;
        best_count = count;
        continue;
      }
      const auto& a = symbols[key >> 32];
      const auto& b = symbols[key & 0xffffffffu];
      const auto& ba = symbols[best >> 32];
      const auto& bb = symbols[best & 0xffffffffu];
      if (std::tie(a, b) < std::tie(ba, bb)) best = key;
    }
    const auto left = static_cast<std::uint32_t>(best >> 32);
    const auto right = static_cast<std::uint32_t>(best & 0xffffffffu);
    const std::string merged = symbols[left] + symbols[right];
    const auto merged_id = intern(merged);
    for (auto& seq : words) {
      if (seq.size() < 2) continue;
      std::vector<std::uint32_t> next;
      next.reserve(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(seq[i]);
        }
      }
      seq = std::move(next);
    }
    // A merge can rebuild a string reached earlier through another split.
    if (!present[merged]) {
      present[merged] = true;
      tokens.push_back(merged);
    }
  }

  std::vector<std::pair<std::string, std::size_t>> chars(char_freq.begin(), char_freq.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [c, f] : chars) {
    if (tokens.size() >= budget) break;
    if (!present[c]) {
      present[c] = true;
      tokens.push_back(c);
    }
  }
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  const auto& reserved = reserved_tokens();
  if (tokens.size() < kReservedCount || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw InputError(path.string() + ": vocabulary must start with the reserved tokens");
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  io::write_atomic(path, [&](std::ostream& os) {
    for (const auto& t : tokens_) os << t << '\n';
  });
}

std::optional<int> Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenIds Vocabulary::encode(std::string_view text, std::size_t max_len) const {
  TokenIds out;
  if (max_len == 0) return out;
  for (const auto& word : pre_segment(text)) {
    std::size_t pos = 0;
    while (pos < word.size()) {
      int found = -1;
      std::size_t found_len = 0;
      const std::size_t longest = std::min(max_token_bytes_, word.size() - pos);
      for (std::size_t len = longest; len >= 1; --len) {
        // Only consider candidates ending on a code point boundary.
        if (pos + len < word.size() && (static_cast<unsigned char>(word[pos + len]) & 0xC0) == 0x80) continue;
        auto it = ids_.find(word.substr(pos, len));
        if (it != ids_.end() && it->second >= static_cast<int>(kReservedCount)) {
          found = it->second;
          found_len = len;
          break;
        }
      }
      if (found < 0) {
        found = kUnk;
        found_len = std::min(utf8_length(static_cast<unsigned char>(word[pos])), word.size() - pos);
      }
      out.push_back(found);
      if (out.size() == max_len) return out;
      pos += found_len;
    }
  }
  return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token(id);
  return out;
}

}  // namespace pfeed::tok
