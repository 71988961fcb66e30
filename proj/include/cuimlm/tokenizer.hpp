#pragma once

// Closed word-level vocabulary, sentence encoding with semantic-group ids,
// masked-LM corruption and target construction.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cuimlm/errors.hpp"
#include "cuimlm/lexicon.hpp"
#include "cuimlm/rng.hpp"

namespace cuimlm {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kMaskId = 3;
inline constexpr std::size_t kReservedCount = 4;

inline std::vector<std::string> split_words(std::string_view line) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) words.push_back(to_lower(line.substr(start, i - start)));
  }
  return words;
}

class Vocab {
 public:
  Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[MASK]"} {}

  /// Builds a vocabulary whose non-reserved tokens are `words`, in order.
  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) {
      if (w.empty() || v.ids_.count(w) != 0 || is_reserved_spelling(w))
        throw DataError("duplicate or invalid vocabulary token '" + w + "'");
      v.ids_.emplace(w, static_cast<TokenId>(v.tokens_.size()));
      v.tokens_.push_back(w);
    }
    return v;
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

  const std::string& token(TokenId id) const { return tokens_.at(id); }

  /// Non-reserved tokens in id order.
  std::span<const std::string> words() const {
    return std::span<const std::string>(tokens_).subspan(kReservedCount);
  }

  static bool is_reserved(TokenId id) noexcept { return id < kReservedCount; }

  void write(std::ostream& out) const {
    for (const auto& w : words()) out << w << '\n';
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  static bool is_reserved_spelling(std::string_view w) {
    return w == "[pad]" || w == "[unk]" || w == "[cls]" || w == "[mask]" || w == "[PAD]" ||
           w == "[UNK]" || w == "[CLS]" || w == "[MASK]";
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Most frequent tokens first (ties lexicographic), at least `min_freq`
/// occurrences, at most `max_size` ids including the 4 reserved ones.
inline Vocab build_vocab(std::istream& corpus, std::size_t min_freq, std::size_t max_size) {
  if (min_freq < 1) throw DataError("min_freq must be >= 1");
  if (max_size < kReservedCount) throw DataError("max_size must be >= 4");
  std::map<std::string, std::size_t> counts;
  std::string line;
  while (std::getline(corpus, line))
    for (auto& w : split_words(line)) ++counts[w];

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : counts)
    if (c >= min_freq && w != "[pad]" && w != "[unk]" && w != "[cls]" && w != "[mask]")
      ranked.emplace_back(w, c);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size - kReservedCount) ranked.resize(max_size - kReservedCount);

  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, c] : ranked) words.push_back(w);
  return Vocab::from_words(words);
}

inline Vocab build_vocab(const std::vector<std::string>& lines, std::size_t min_freq,
                         std::size_t max_size) {
  std::ostringstream joined;
  for (const auto& l : lines) joined << l << '\n';
  std::istringstream in(joined.str());
  return build_vocab(in, min_freq, max_size);
}

/// Vocab file: one token per line, line k (0-based) holds id k + 4.
inline Vocab load_vocab(std::istream& in) {
  std::vector<std::string> words;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty() || split_words(line).size() != 1 || split_words(line)[0] != line)
      throw ParseError(lineno, "vocab line must hold exactly one lowercase token");
    words.push_back(line);
  }
  try {
    return Vocab::from_words(words);
  } catch (const DataError& e) {
    throw ParseError(0, e.what());
  }
}

inline Vocab load_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocab '" + path + "'");
  try {
    return load_vocab(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.reason(), path);
  }
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    detail::strip_cr(line);
    if (!detail::is_blank(line)) lines.push_back(line);
  }
  return lines;
}

struct EncodedSentence {
  std::vector<TokenId> token_ids;
  std::vector<GroupId> group_ids;
  std::vector<std::uint8_t> segment_ids;
  std::size_t attention_len = 0;

  std::size_t length() const noexcept { return token_ids.size(); }

  bool operator==(const EncodedSentence&) const = default;
};

/// CLS + lowercased whitespace tokens, truncated and PAD-filled to max_len.
inline EncodedSentence encode(std::string_view sentence, const Vocab& vocab, const Lexicon& lex,
                              std::size_t max_len) {
  if (max_len < 2) throw DataError("max_len must be >= 2");
  EncodedSentence enc;
  enc.token_ids.assign(max_len, kPadId);
  enc.group_ids.assign(max_len, kNoGroup);
  enc.segment_ids.assign(max_len, 0);
  enc.token_ids[0] = kClsId;
  std::size_t pos = 1;
  for (const auto& w : split_words(sentence)) {
    if (pos == max_len) break;
    const TokenId id = vocab.id(w);
    enc.token_ids[pos] = id;
    if (id != kUnkId)
      if (auto g = lex.group_of(w)) enc.group_ids[pos] = *g;
    ++pos;
  }
  enc.attention_len = pos;
  return enc;
}

/// Space-joined non-reserved tokens of the attended span.
inline std::string decode(const EncodedSentence& enc, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < enc.attention_len; ++i) {
    const TokenId id = enc.token_ids[i];
    if (id == kClsId || id == kPadId) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

struct MaskingOutcome {
  std::vector<TokenId> corrupted_ids;
  std::vector<std::size_t> masked_positions;
  std::vector<TokenId> original_ids;

  bool operator==(const MaskingOutcome&) const = default;
};

struct MaskingOptions {
  /// BERT-style 80% MASK / 10% random token / 10% unchanged. Off by default:
  /// every selected token becomes MASK.
  bool classic_split = false;
  /// Needed only for classic_split; random replacements are drawn from the
  /// non-reserved ids.
  std::size_t vocab_size = 0;
};

/// Selects each position in [1, attention_len) with probability `rate`. If
/// nothing was selected, one eligible position is drawn uniformly instead.
inline MaskingOutcome apply_masking(const EncodedSentence& enc, double rate, Rng& rng,
                                    const MaskingOptions& opts = {}) {
  if (!(rate > 0.0 && rate < 1.0)) throw DataError("mask rate must be in (0, 1)");
  if (enc.attention_len < 2) throw DataError("sentence has no maskable position");
  if (opts.classic_split && opts.vocab_size <= kReservedCount)
    throw DataError("classic masking needs a vocabulary with non-reserved tokens");

  MaskingOutcome out;
  out.corrupted_ids = enc.token_ids;
  for (std::size_t i = 1; i < enc.attention_len; ++i)
    if (rng.bernoulli(rate)) out.masked_positions.push_back(i);
  if (out.masked_positions.empty())
    out.masked_positions.push_back(1 + rng.below(enc.attention_len - 1));

  for (std::size_t pos : out.masked_positions) {
    out.original_ids.push_back(enc.token_ids[pos]);
    TokenId replacement = kMaskId;
    if (opts.classic_split) {
      const double u = rng.uniform();
      if (u >= 0.9)
        replacement = enc.token_ids[pos];
      else if (u >= 0.8)
        replacement = static_cast<TokenId>(kReservedCount + rng.below(opts.vocab_size - kReservedCount));
    }
    out.corrupted_ids[pos] = replacement;
  }
  return out;
}

enum class TargetMode { OneHot, CuiExpanded };

/// One {0,1} row of vocabulary width per masked position.
class TargetMatrix {
 public:
  TargetMatrix(TargetMode mode, std::size_t rows, std::size_t width)
      : mode_(mode), rows_(rows), width_(width), bits_(rows * width, 0) {}

  TargetMode mode() const noexcept { return mode_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t width() const noexcept { return width_; }

  std::span<const std::uint8_t> row(std::size_t r) const {
    return std::span<const std::uint8_t>(bits_).subspan(r * width_, width_);
  }
  std::span<std::uint8_t> row(std::size_t r) {
    return std::span<std::uint8_t>(bits_).subspan(r * width_, width_);
  }

  void set(std::size_t r, std::size_t c) { bits_.at(r * width_ + c) = 1; }
  bool at(std::size_t r, std::size_t c) const { return bits_.at(r * width_ + c) != 0; }

  /// Ids of the set bits in row r, ascending.
  std::vector<TokenId> set_ids(std::size_t r) const {
    std::vector<TokenId> ids;
    auto bits = row(r);
    for (std::size_t c = 0; c < width_; ++c)
      if (bits[c]) ids.push_back(static_cast<TokenId>(c));
    return ids;
  }

  bool operator==(const TargetMatrix&) const = default;

 private:
  TargetMode mode_;
  std::size_t rows_;
  std::size_t width_;
  std::vector<std::uint8_t> bits_;
};

/// One-hot rows, or rows that also mark every in-vocabulary word sharing a
/// CUI with the masked word.
inline TargetMatrix build_targets(std::span<const TokenId> original_ids, const Lexicon& lex,
                                  const Vocab& vocab, TargetMode mode) {
  TargetMatrix t(mode, original_ids.size(), vocab.size());
  for (std::size_t r = 0; r < original_ids.size(); ++r) {
    const TokenId id = original_ids[r];
    t.set(r, id);
    if (mode == TargetMode::CuiExpanded && !Vocab::is_reserved(id)) {
      for (const auto& sib : lex.siblings(vocab.token(id)))
        if (vocab.contains(sib)) t.set(r, vocab.id(sib));
    }
  }
  return t;
}

inline TargetMatrix build_targets(const MaskingOutcome& outcome, const Lexicon& lex,
                                  const Vocab& vocab, TargetMode mode) {
  return build_targets(std::span<const TokenId>(outcome.original_ids), lex, vocab, mode);
}

}  // namespace cuimlm
