#pragma once

// Deterministic synthetic clinical-style corpus: typed slot templates filled
// with words from six semantic groups, ten planted synonym pairs that share a
// CUI, and a tagged variant whose tags are the words' semantic groups.

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cuimlm/lexicon.hpp"
#include "cuimlm/rng.hpp"

namespace cuimlm {

/// Sampling weight of the second word of each planted synonym pair relative
/// to every other slot word, so each pair has a common and a rare spelling.
inline constexpr double kRareSynonymWeight = 0.15;

struct SyntheticCorpus {
  std::string lexicon_tsv;
  Lexicon lexicon;
  std::vector<std::string> sentences;
  std::vector<std::string> tagged_lines;  // word/TAG tokens, O for non-lexicon words
  std::vector<std::pair<std::string, std::string>> synonym_pairs;
};

namespace detail {

struct SynthGroup {
  const char* name;
  std::vector<std::vector<const char*>> concepts;  // words sharing one CUI
};

inline const std::vector<SynthGroup>& synth_groups() {
  static const std::vector<SynthGroup> groups{
      {"ANATOMY",
       {{"kidney", "ren"}, {"lung", "pulmonary"}, {"heart"}, {"liver"}, {"brain"}, {"colon"}, {"spleen"}, {"bladder"}}},
      {"DISORDER",
       {{"mass", "lump"},
        {"bleeding", "hemorrhage"},
        {"pneumonia"},
        {"fracture"},
        {"infection"},
        {"tumor"},
        {"stroke"},
        {"sepsis"}}},
      {"DRUG",
       {{"aspirin", "asa"},
        {"acetaminophen", "tylenol"},
        {"insulin"},
        {"warfarin"},
        {"morphine"},
        {"lasix"},
        {"vancomycin"},
        {"metoprolol"}}},
      {"PROCEDURE",
       {{"catheterization", "cath"},
        {"dialysis", "hemodialysis"},
        {"biopsy"},
        {"surgery"},
        {"transfusion"},
        {"endoscopy"},
        {"ultrasound"},
        {"xray"}}},
      {"FINDING",
       {{"fever", "pyrexia"}, {"pain", "ache"}, {"cough"}, {"nausea"}, {"edema"}, {"rash"}, {"fatigue"}, {"dyspnea"}}},
      {"LAB",
       {{"sodium"},
        {"potassium"},
        {"glucose"},
        {"creatinine"},
        {"hemoglobin"},
        {"platelets"},
        {"lactate"},
        {"troponin"},
        {"albumin"},
        {"bilirubin"}}},
  };
  return groups;
}

inline const std::map<std::string, std::vector<std::string>>& synth_fillers() {
  static const std::map<std::string, std::vector<std::string>> f{
      {"ADJ", {"elevated", "low", "high", "normal", "stable", "mild", "severe", "acute", "chronic", "new", "worsening",
               "improved"}},
      {"TIME", {"today", "yesterday", "overnight", "earlier", "again", "recently", "initially", "later"}},
      {"SIDE", {"left", "right", "bilateral", "upper", "lower"}},
      {"WHO", {"patient", "she", "he", "resident", "team", "nurse"}},
  };
  return f;
}

inline const std::vector<const char*>& synth_templates() {
  static const std::vector<const char*> t{
      "the WHO has DISORDER in the SIDE ANATOMY",
      "SIDE ANATOMY DISORDER was noted on PROCEDURE",
      "started DRUG for DISORDER TIME",
      "WHO reports FINDING and FINDING since TIME",
      "LAB level is ADJ",
      "underwent PROCEDURE of the ANATOMY TIME",
      "given DRUG for FINDING TIME",
      "denies FINDING but has ADJ DISORDER",
      "LAB was ADJ after DRUG",
      "PROCEDURE showed ADJ DISORDER of the ANATOMY",
      "WHO was admitted with FINDING and ADJ LAB",
      "continue DRUG and monitor LAB",
      "ADJ FINDING with DISORDER of the ANATOMY",
      "plan PROCEDURE if DISORDER persists",
      "DRUG was held because of ADJ LAB",
      "no evidence of DISORDER in ANATOMY on PROCEDURE",
      "WHO tolerated PROCEDURE without FINDING",
      "discussed DRUG dose with the WHO",
  };
  return t;
}

}  // namespace detail

/// Synthetic corpus of `sentence_count` lines; the word lists are fixed and
/// `seed` only drives template and slot choices.
inline SyntheticCorpus make_synthetic_corpus(std::size_t sentence_count = 2000, std::uint64_t seed = 0) {
  SyntheticCorpus out;
  std::map<std::string, std::vector<std::string>> slot_words;
  std::map<std::string, std::vector<double>> slot_weights;
  std::ostringstream tsv;
  tsv << "# synthetic lexicon: word<TAB>cui<TAB>group\n";
  std::uint32_t cui = 9000001;
  for (const auto& g : detail::synth_groups()) {
    for (const auto& concept_words : g.concepts) {
      char id[16];
      std::snprintf(id, sizeof id, "C%07u", cui++);
      for (std::size_t k = 0; k < concept_words.size(); ++k) {
        tsv << concept_words[k] << '\t' << id << '\t' << g.name << '\n';
        slot_words[g.name].emplace_back(concept_words[k]);
        slot_weights[g.name].push_back(k == 0 ? 1.0 : kRareSynonymWeight);
      }
      if (concept_words.size() == 2) out.synonym_pairs.emplace_back(concept_words[0], concept_words[1]);
    }
  }
  out.lexicon_tsv = tsv.str();
  out.lexicon = parse_lexicon(out.lexicon_tsv);
  Rng rng(derive_seed(seed, "synthetic"));
  for (const auto& [slot, words] : detail::synth_fillers()) {
    slot_words[slot] = words;
    slot_weights[slot].assign(words.size(), 1.0);
  }

  auto pick = [&](const std::string& slot) -> const std::string& {
    const auto& ws = slot_weights[slot];
    double total = 0.0;
    for (double w : ws) total += w;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i + 1 < ws.size(); ++i) {
      if (u < ws[i]) return slot_words[slot][i];
      u -= ws[i];
    }
    return slot_words[slot].back();
  };

  const auto& templates = detail::synth_templates();
  for (std::size_t i = 0; i < sentence_count; ++i) {
    std::istringstream in(templates[rng.below(templates.size())]);
    std::string tok, plain, tagged;
    while (in >> tok) {
      std::string word = tok, tag = "O";
      if (auto it = slot_words.find(tok); it != slot_words.end()) {
        word = pick(tok);
        if (auto g = out.lexicon.group_of(word)) tag = out.lexicon.group_name(*g);
      }
      if (!plain.empty()) {
        plain += ' ';
        tagged += ' ';
      }
      plain += word;
      tagged += word + "/" + tag;
    }
    out.sentences.push_back(std::move(plain));
    out.tagged_lines.push_back(std::move(tagged));
  }
  return out;
}

}  // namespace cuimlm
