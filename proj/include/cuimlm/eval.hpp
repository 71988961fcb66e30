#pragma once

// Read-only analyses of a trained model: nearest neighbours in the token
// table, semantic-group silhouette, synonym similarity, 2-D PCA export, and
// token-classification fine-tuning with a single linear head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cuimlm/errors.hpp"
#include "cuimlm/lexicon.hpp"
#include "cuimlm/losses.hpp"
#include "cuimlm/model.hpp"
#include "cuimlm/rng.hpp"
#include "cuimlm/tokenizer.hpp"
#include "cuimlm/training.hpp"

namespace cuimlm {

enum class EmbeddingSpace {
  InputTable,      // token table row
  AugmentedInput,  // token table row + group table row of the word's group
};

inline std::string to_string(EmbeddingSpace s) { return s == EmbeddingSpace::InputTable ? "input" : "augmented"; }

inline EmbeddingSpace parse_space(std::string_view s) {
  if (s == "input") return EmbeddingSpace::InputTable;
  if (s == "augmented") return EmbeddingSpace::AugmentedInput;
  throw DataError("unknown embedding space '" + std::string(s) + "' (expected input or augmented)");
}

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vectors of length " + std::to_string(a.size()) + " and " +
                                             std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_distance(std::span<const double> a, std::span<const double> b) { return 1.0 - cosine(a, b); }

/// Vector of a vocabulary word in the chosen space.
inline std::vector<double> word_vector(const ModelParams& params, const Vocab& vocab, const Lexicon& lex,
                                       std::string_view word, EmbeddingSpace space) {
  const std::string w = to_lower(word);
  if (!vocab.contains(w)) throw DataError("word '" + w + "' is not in the vocabulary");
  auto row = params.token_table.row(vocab.id(w));
  std::vector<double> v(row.begin(), row.end());
  if (space == EmbeddingSpace::AugmentedInput) {
    if (auto g = lex.group_of(w); g && *g < params.group_table.dim(0)) {
      auto sg = params.group_table.row(*g);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += sg[i];
    }
  }
  return v;
}

struct Neighbor {
  std::string word;
  double similarity = 0.0;
};

struct NeighborReport {
  std::string query;
  EmbeddingSpace space = EmbeddingSpace::InputTable;
  std::vector<Neighbor> neighbors;  // descending similarity, query excluded
};

inline NeighborReport nearest_neighbors(std::string_view word, std::size_t k, const ModelParams& params,
                                        const Vocab& vocab, const Lexicon& lex, EmbeddingSpace space) {
  if (k < 1) throw DataError("k must be >= 1");
  const std::string q = to_lower(word);
  const std::vector<double> qv = word_vector(params, vocab, lex, q, space);
  NeighborReport rep{q, space, {}};
  for (const auto& w : vocab.words()) {
    if (w == q) continue;
    rep.neighbors.push_back({w, cosine(qv, word_vector(params, vocab, lex, w, space))});
  }
  std::stable_sort(rep.neighbors.begin(), rep.neighbors.end(),
                   [](const Neighbor& a, const Neighbor& b) { return a.similarity > b.similarity; });
  if (rep.neighbors.size() > k) rep.neighbors.resize(k);
  return rep;
}

/// 1-based rank of `other` among the neighbours of `word` (full list).
inline std::size_t neighbor_rank(std::string_view word, std::string_view other, const ModelParams& params,
                                 const Vocab& vocab, const Lexicon& lex, EmbeddingSpace space) {
  NeighborReport rep = nearest_neighbors(word, vocab.size(), params, vocab, lex, space);
  const std::string o = to_lower(other);
  for (std::size_t i = 0; i < rep.neighbors.size(); ++i)
    if (rep.neighbors[i].word == o) return i + 1;
  throw DataError("word '" + o + "' is not in the vocabulary");
}

/// Per-point silhouette with cosine distance. Labels must be dense 0..L-1 and
/// every label must have at least 2 points. Distances are computed once per
/// pair and sums run over points in index order.
inline std::vector<double> silhouette_samples(const std::vector<std::vector<double>>& points,
                                              const std::vector<std::size_t>& labels) {
  const std::size_t n = points.size();
  if (labels.size() != n) throw ShapeError("silhouette: label count does not match point count");
  const std::size_t label_count = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> sizes(label_count, 0);
  for (std::size_t l : labels) ++sizes[l];
  if (label_count < 2) throw DataError("silhouette needs at least 2 clusters");
  for (std::size_t s : sizes)
    if (s < 2) throw DataError("silhouette needs at least 2 points per cluster");

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist[i * n + j] = dist[j * n + i] = cosine_distance(points[i], points[j]);

  std::vector<double> s(n);
  std::vector<double> sums(label_count);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[labels[j]] += dist[i * n + j];
    const std::size_t own = labels[i];
    const double a = sums[own] / static_cast<double>(sizes[own] - 1);
    double b = INFINITY;
    for (std::size_t l = 0; l < label_count; ++l)
      if (l != own) b = std::min(b, sums[l] / static_cast<double>(sizes[l]));
    const double denom = std::max(a, b);
    s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return s;
}

inline double mean_of(std::span<const double> xs) {
  double t = 0.0;
  for (double x : xs) t += x;
  return t / static_cast<double>(xs.size());
}

struct GroupSilhouette {
  std::string group;
  std::size_t size = 0;
  double silhouette = 0.0;
};

struct ClusterReport {
  EmbeddingSpace space = EmbeddingSpace::InputTable;
  double overall = 0.0;
  std::vector<GroupSilhouette> groups;
  std::vector<GroupSilhouette> skipped;  // fewer than 2 members; silhouette unset
};

/// Silhouette of vocabulary words that appear in the lexicon, labelled by
/// their semantic group.
inline ClusterReport group_silhouette(const ModelParams& params, const Vocab& vocab, const Lexicon& lex,
                                      EmbeddingSpace space) {
  std::vector<std::vector<std::string>> members(lex.group_count());
  for (const auto& w : vocab.words())
    if (auto g = lex.group_of(w)) members[*g].push_back(w);

  ClusterReport rep;
  rep.space = space;
  std::vector<std::vector<double>> points;
  std::vector<std::size_t> labels;
  std::vector<GroupId> kept;
  for (GroupId g = 0; g < members.size(); ++g) {
    if (members[g].size() < 2) {
      rep.skipped.push_back({lex.group_name(g), members[g].size(), 0.0});
      continue;
    }
    for (const auto& w : members[g]) {
      points.push_back(word_vector(params, vocab, lex, w, space));
      labels.push_back(kept.size());
    }
    kept.push_back(g);
  }
  if (kept.size() < 2) throw DataError("need at least 2 semantic groups with 2+ vocabulary members");

  const std::vector<double> s = silhouette_samples(points, labels);
  rep.overall = mean_of(s);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    std::vector<double> mine;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (labels[i] == k) mine.push_back(s[i]);
    rep.groups.push_back({lex.group_name(kept[k]), mine.size(), mean_of(mine)});
  }
  return rep;
}

inline double synonym_similarity(const std::vector<std::pair<std::string, std::string>>& pairs,
                                 const ModelParams& params, const Vocab& vocab, const Lexicon& lex,
                                 EmbeddingSpace space) {
  if (pairs.empty()) throw DataError("synonym_similarity: empty pair list");
  double total = 0.0;
  for (const auto& [a, b] : pairs)
    total += cosine(word_vector(params, vocab, lex, a, space), word_vector(params, vocab, lex, b, space));
  return total / static_cast<double>(pairs.size());
}

/// Every unordered pair of distinct vocabulary words sharing a CUI.
inline std::vector<std::pair<std::string, std::string>> sibling_pairs(const Lexicon& lex, const Vocab& vocab) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& w : vocab.words())
    for (const auto& s : lex.siblings(w))
      if (w < s && vocab.contains(s)) out.emplace_back(w, s);
  return out;
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Projection onto the top-2 principal components of the mean-centred
/// vectors. Each component's sign is chosen so its largest-magnitude loading
/// is positive.
inline std::vector<Point2> project_2d(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 3) throw DataError("project_2d needs at least 3 vectors");
  const std::size_t n = vectors.size(), d = vectors[0].size();
  if (d < 2) throw DataError("project_2d needs vectors of dimension >= 2");
  Eigen::MatrixXd X(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (vectors[i].size() != d) throw ShapeError("project_2d: vectors differ in length");
    for (std::size_t j = 0; j < d; ++j) X(i, j) = vectors[i][j];
  }
  bool distinct = false;
  for (std::size_t i = 1; i < n && !distinct; ++i) distinct = (X.row(i) - X.row(0)).norm() > 0.0;
  if (!distinct) throw DataError("project_2d needs at least 2 distinct points");

  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; take the last two columns.
  Eigen::MatrixXd comps(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    comps.col(c) = v;
  }
  const Eigen::MatrixXd proj = X * comps;
  std::vector<Point2> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {proj(i, 0), proj(i, 1)};
  return out;
}

// ---------------------------------------------------------------------------
// Token classification
// ---------------------------------------------------------------------------

/// Sentences of word/TAG tokens.
struct TaggedCorpus {
  std::vector<std::vector<std::string>> words;
  std::vector<std::vector<std::size_t>> tags;
  std::vector<std::string> tag_names;  // first-appearance order

  std::size_t size() const noexcept { return words.size(); }
};

inline TaggedCorpus load_tagged_corpus(std::istream& in) {
  TaggedCorpus tc;
  std::map<std::string, std::size_t> tag_ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (detail::is_blank(line)) continue;
    std::vector<std::string> ws;
    std::vector<std::size_t> ts;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      const std::size_t start = i;
      while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      if (i == start) break;
      const std::string tok = line.substr(start, i - start);
      const std::size_t slash = tok.rfind('/');
      if (slash == std::string::npos || slash == 0 || slash + 1 == tok.size())
        throw ParseError(lineno, "token '" + tok + "' is not word/TAG");
      const std::string tag = tok.substr(slash + 1);
      auto [it, inserted] = tag_ids.try_emplace(tag, tc.tag_names.size());
      if (inserted) tc.tag_names.push_back(tag);
      ws.push_back(to_lower(tok.substr(0, slash)));
      ts.push_back(it->second);
    }
    tc.words.push_back(std::move(ws));
    tc.tags.push_back(std::move(ts));
  }
  return tc;
}

inline TaggedCorpus load_tagged_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tagged corpus '" + path + "'");
  try {
    return load_tagged_corpus(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.reason(), path);
  }
}

struct NerHead {
  Tensor weight;  // [tags, d]
  Tensor bias;    // [tags]
};

struct FinetuneConfig {
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  NerHead head;
  ModelParams params;  // fine-tuned encoder
  double accuracy = 0.0;
  std::vector<double> per_tag_f1;
  std::vector<std::string> tag_names;
  std::size_t train_sentences = 0;
  std::size_t test_sentences = 0;
  std::size_t test_tokens = 0;
};

namespace detail {

struct TaggedExample {
  EncodedSentence enc;
  std::vector<std::size_t> tags;  // one per position 1..attention_len-1
};

/// logits [rows, tags] of the real tokens (positions 1..len-1) of a batch.
inline Var tag_logits(const BoundParams& bp, Var head_w, Var head_b, const std::vector<TaggedExample>& batch,
                      const ModelConfig& cfg, std::vector<std::size_t>* gold) {
  std::vector<EncodedSentence> sents;
  for (const auto& ex : batch) sents.push_back(ex.enc);
  ModelInput in = make_input(sents, /*trim=*/true);
  EncoderOutput enc = encoder_forward(input_embed(in, bp, cfg).normalized, in, bp, cfg);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t pos = 1; pos < batch[b].enc.attention_len; ++pos) {
      rows.push_back(b * in.seq + pos);
      if (gold) gold->push_back(batch[b].tags[pos - 1]);
    }
  return add_broadcast(matmul(gather_rows(enc.hidden.back(), std::move(rows)), transpose(head_w)), head_b);
}

}  // namespace detail

/// Fine-tunes encoder and a linear tag head jointly with cross-entropy over
/// real tokens, then scores the held-out split.
inline FinetuneResult finetune_token_classifier(const Checkpoint& ckpt, const Lexicon& lex, const TaggedCorpus& tagged,
                                                const FinetuneConfig& cfg) {
  if (tagged.size() == 0) throw DataError("tagged corpus is empty");
  const std::size_t tag_count = tagged.tag_names.size();
  const Vocab vocab = ckpt.vocab();
  const ModelConfig& mcfg = ckpt.model;

  std::vector<detail::TaggedExample> examples;
  for (std::size_t i = 0; i < tagged.size(); ++i) {
    if (tagged.words[i].size() != tagged.tags[i].size()) throw DataError("tagged sentence length mismatch");
    for (std::size_t t : tagged.tags[i])
      if (t >= tag_count) throw DataError("unseen tag id " + std::to_string(t));
    std::string joined;
    for (const auto& w : tagged.words[i]) joined += w + " ";
    detail::TaggedExample ex{encode(joined, vocab, lex, mcfg.max_seq_len), {}};
    ex.tags.assign(tagged.tags[i].begin(), tagged.tags[i].begin() + (ex.enc.attention_len - 1));
    if (ex.enc.attention_len >= 2) examples.push_back(std::move(ex));
  }
  if (examples.size() < 2) throw DataError("tagged corpus needs at least 2 usable sentences");

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(cfg.seed, "split"));
  split_rng.shuffle(std::span<std::size_t>(order));
  std::size_t test_n = static_cast<std::size_t>(std::round(cfg.holdout_fraction * static_cast<double>(examples.size())));
  test_n = std::clamp<std::size_t>(test_n, 1, examples.size() - 1);
  std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(test_n));
  std::vector<std::size_t> test_idx(order.end() - static_cast<std::ptrdiff_t>(test_n), order.end());

  FinetuneResult res;
  res.params = ckpt.params;
  res.tag_names = tagged.tag_names;
  res.train_sentences = train_idx.size();
  res.test_sentences = test_idx.size();
  Rng head_rng(derive_seed(cfg.seed, "head"));
  res.head.weight = Tensor({tag_count, mcfg.hidden_dim});
  for (double& v : res.head.weight.values()) v = head_rng.truncated_normal(0.02);
  res.head.bias = Tensor({tag_count});

  OptimizerState opt = OptimizerState::zeros_like(res.params);
  OptimizerState head_opt;
  head_opt.m = {Tensor(res.head.weight.shape()), Tensor(res.head.bias.shape())};
  head_opt.v = head_opt.m;
  const std::size_t param_slots = res.params.tensors().size();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle(derive_seed(cfg.seed, "finetune-shuffle", epoch));
    std::vector<std::size_t> ep = train_idx;
    shuffle.shuffle(std::span<std::size_t>(ep));
    for (std::size_t start = 0; start < ep.size(); start += cfg.batch_size) {
      std::vector<detail::TaggedExample> batch;
      for (std::size_t j = start; j < std::min(ep.size(), start + cfg.batch_size); ++j) batch.push_back(examples[ep[j]]);
      Tape tape;
      BoundParams bp = bind_params(tape, res.params);
      Var hw = tape.parameter(res.head.weight, param_slots);
      Var hb = tape.parameter(res.head.bias, param_slots + 1);
      std::vector<std::size_t> gold;
      Var logits = detail::tag_logits(bp, hw, hb, batch, mcfg, &gold);
      Var loss = cross_entropy(logits, gold);
      if (!std::isfinite(loss.value().item())) throw NumericError(epoch, "non-finite fine-tuning loss");
      Gradients grads = tape.backward(loss);
      Gradients head_grads{grads[param_slots], grads[param_slots + 1]};
      grads.resize(param_slots);
      adam_update(res.params, opt, grads, cfg.learning_rate);
      Tensor* head_ps[2] = {&res.head.weight, &res.head.bias};
      adam_update(std::span<Tensor* const>(head_ps), head_opt, head_grads, cfg.learning_rate);
    }
  }

  std::vector<std::size_t> tp(tag_count, 0), fp(tag_count, 0), fn(tag_count, 0);
  std::size_t correct = 0, total = 0;
  for (std::size_t start = 0; start < test_idx.size(); start += cfg.batch_size) {
    std::vector<detail::TaggedExample> batch;
    for (std::size_t j = start; j < std::min(test_idx.size(), start + cfg.batch_size); ++j)
      batch.push_back(examples[test_idx[j]]);
    Tape tape;
    BoundParams bp = bind_params(tape, res.params, false);
    std::vector<std::size_t> gold;
    Tensor logits = detail::tag_logits(bp, tape.constant(res.head.weight), tape.constant(res.head.bias), batch, mcfg,
                                       &gold)
                        .value();
    for (std::size_t r = 0; r < gold.size(); ++r) {
      auto row = logits.row(r);
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      ++total;
      if (pred == gold[r]) {
        ++correct;
        ++tp[pred];
      } else {
        ++fp[pred];
        ++fn[gold[r]];
      }
    }
  }
  res.test_tokens = total;
  res.accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  for (std::size_t t = 0; t < tag_count; ++t) {
    const std::size_t denom = 2 * tp[t] + fp[t] + fn[t];
    res.per_tag_f1.push_back(denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[t]) / static_cast<double>(denom));
  }
  return res;
}

}  // namespace cuimlm
