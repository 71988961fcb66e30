#pragma once

// Thesaurus lookup: word -> (CUIs, semantic group) and the inverse CUI index.
//
// File format, one entry per line, no header:
//
//   word<TAB>cui[,cui...]<TAB>GROUP_NAME
//
// Lines starting with '#' and blank lines are skipped. Words are lowercased.
// A word may repeat on several lines (its CUI sets are merged) but must keep
// the same group. Group ids are assigned in order of first appearance.

#include <algorithm>
#include <cctype>
#include <compare>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cuimlm/errors.hpp"

namespace cuimlm {

using GroupId = std::uint32_t;

/// Marks a token with no semantic group (reserved token or non-clinical word).
inline constexpr GroupId kNoGroup = UINT32_MAX;

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Concept unique identifier: 'C' followed by exactly 7 decimal digits.
class ConceptId {
 public:
  static bool is_valid(std::string_view s) {
    if (s.size() != 8 || s[0] != 'C') return false;
    return std::all_of(s.begin() + 1, s.end(),
                       [](unsigned char c) { return std::isdigit(c) != 0; });
  }

  explicit ConceptId(std::string value) : value_(std::move(value)) {
    if (!is_valid(value_)) throw DataError("invalid CUI '" + value_ + "'");
  }

  const std::string& str() const noexcept { return value_; }

  auto operator<=>(const ConceptId&) const = default;

 private:
  std::string value_;
};

struct SemanticGroup {
  GroupId id = 0;
  std::string name;

  bool operator==(const SemanticGroup&) const = default;
};

struct LexiconEntry {
  std::string word;
  std::set<ConceptId> cuis;
  GroupId group = 0;

  bool operator==(const LexiconEntry&) const = default;
};

class Lexicon {
 public:
  Lexicon() = default;

  std::optional<GroupId> group_of(std::string_view word) const {
    auto it = entries_.find(to_lower(word));
    if (it == entries_.end()) return std::nullopt;
    return it->second.group;
  }

  /// Every lexicon word sharing at least one CUI with `word`, including the
  /// word itself. Empty when the word is not in the lexicon.
  std::set<std::string> siblings(std::string_view word) const {
    std::set<std::string> out;
    auto it = entries_.find(to_lower(word));
    if (it == entries_.end()) return out;
    for (const ConceptId& cui : it->second.cuis) {
      const auto& words = cui_index_.at(cui);
      out.insert(words.begin(), words.end());
    }
    return out;
  }

  std::size_t group_count() const noexcept { return groups_.size(); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  bool contains(std::string_view word) const { return entries_.count(to_lower(word)) != 0; }

  const LexiconEntry* find(std::string_view word) const {
    auto it = entries_.find(to_lower(word));
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, LexiconEntry>& entries() const noexcept { return entries_; }
  const std::map<ConceptId, std::set<std::string>>& cui_index() const noexcept {
    return cui_index_;
  }
  const std::vector<SemanticGroup>& groups() const noexcept { return groups_; }

  const std::string& group_name(GroupId id) const { return groups_.at(id).name; }

  std::optional<GroupId> group_id(std::string_view name) const {
    for (const auto& g : groups_)
      if (g.name == name) return g.id;
    return std::nullopt;
  }

  /// Adds or merges one entry. Returns false if the word already exists with
  /// a different group.
  bool add(std::string_view word, const std::set<ConceptId>& cuis, std::string_view group_name) {
    const std::string key = to_lower(word);
    GroupId gid;
    if (auto found = group_id(group_name)) {
      gid = *found;
    } else {
      gid = static_cast<GroupId>(groups_.size());
      auto existing = entries_.find(key);
      if (existing != entries_.end()) return false;
      groups_.push_back({gid, std::string(group_name)});
    }
    auto [it, inserted] = entries_.try_emplace(key, LexiconEntry{key, {}, gid});
    if (!inserted && it->second.group != gid) return false;
    for (const ConceptId& cui : cuis) {
      it->second.cuis.insert(cui);
      cui_index_[cui].insert(key);
    }
    return true;
  }

  /// Writes the lexicon back in the TSV format. Entries are ordered by group
  /// id, then word, so reloading reproduces the same group numbering.
  void write_tsv(std::ostream& out) const {
    std::vector<const LexiconEntry*> order;
    order.reserve(entries_.size());
    for (const auto& [word, entry] : entries_) order.push_back(&entry);
    std::stable_sort(order.begin(), order.end(),
                     [](const LexiconEntry* a, const LexiconEntry* b) { return a->group < b->group; });
    for (const LexiconEntry* e : order) {
      out << e->word << '\t';
      bool first = true;
      for (const ConceptId& cui : e->cuis) {
        if (!first) out << ',';
        out << cui.str();
        first = false;
      }
      out << '\t' << groups_[e->group].name << '\n';
    }
  }

  bool operator==(const Lexicon&) const = default;

 private:
  std::map<std::string, LexiconEntry> entries_;
  std::map<ConceptId, std::set<std::string>> cui_index_;
  std::vector<SemanticGroup> groups_;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline Lexicon load_lexicon(std::istream& in) {
  Lexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (detail::is_blank(line) || line[0] == '#') continue;

    const auto cols = detail::split(line, '\t');
    if (cols.size() != 3)
      throw ParseError(lineno, "expected 3 tab-separated columns, found " + std::to_string(cols.size()));

    const std::string_view word = cols[0];
    if (word.empty()) throw ParseError(lineno, "empty word");
    if (std::any_of(word.begin(), word.end(), [](unsigned char c) { return std::isspace(c) != 0; }))
      throw ParseError(lineno, "multi-word entry '" + std::string(word) + "' is not supported");

    std::set<ConceptId> cuis;
    for (std::string_view cui : detail::split(cols[1], ',')) {
      if (!ConceptId::is_valid(cui))
        throw ParseError(lineno, "bad CUI '" + std::string(cui) + "'");
      cuis.emplace(std::string(cui));
    }

    const std::string_view group = cols[2];
    if (group.empty() || !std::all_of(group.begin(), group.end(), [](unsigned char c) {
          return std::isupper(c) != 0 || std::isdigit(c) != 0 || c == '_';
        }))
      throw ParseError(lineno, "bad semantic group name '" + std::string(group) + "'");

    if (!lex.add(word, cuis, group))
      throw ParseError(lineno, "word '" + to_lower(word) + "' already assigned to group " +
                                   lex.group_name(*lex.group_of(word)));
  }
  return lex;
}

inline Lexicon load_lexicon_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon '" + path + "'");
  try {
    return load_lexicon(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.reason(), path);
  }
}

inline Lexicon parse_lexicon(std::string_view text) {
  std::istringstream in{std::string(text)};
  return load_lexicon(in);
}

}  // namespace cuimlm
