#pragma once

// Command-line front end. run() never exits the process; it returns
//   0 success, 1 usage error, 2 data or format error, 3 numerical failure.
// Results go to `out`, diagnostics to `err`.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cuimlm/checkpoint.hpp"
#include "cuimlm/errors.hpp"
#include "cuimlm/eval.hpp"
#include "cuimlm/gradcheck.hpp"
#include "cuimlm/lexicon.hpp"
#include "cuimlm/tokenizer.hpp"
#include "cuimlm/training.hpp"

namespace cuimlm::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

using ojson = nlohmann::ordered_json;

/// Reads a key=value file ('#' comments, blank lines ignored).
inline std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected key=value", path);
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(lineno, "empty key", path);
    if (key.rfind("--", 0) == 0) key = key.substr(2);
    kv.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

/// Expands `--config FILE` into flags, skipping keys already given on the
/// command line so explicit flags take precedence.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path) return args;
  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(args.begin(), args.end(),
                        [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  for (const auto& [key, value] : read_config(*path)) {
    if (given(key)) continue;
    if (value == "true") {
      args.push_back("--" + key);
    } else if (value != "false") {
      args.push_back("--" + key);
      args.push_back(value);
    }
  }
  return args;
}

namespace detail {

struct TrainArgs {
  std::string corpus, lexicon, vocab, out, resume, dump_targets;
  std::string loss = "ce";
  std::size_t steps = 2000, batch = 16, checkpoint_every = 0, threads = 1;
  std::uint64_t seed = 0;
  double lr = 3e-4, mask_rate = 0.15, init_std = 0.02;
  bool classic_masking = false, no_augment = false;
  std::size_t min_freq = 1, max_vocab = 30000;
  ModelConfig model;
};

struct EvalArgs {
  std::string checkpoint, lexicon, space = "input", pairs, tagged, out;
  std::vector<std::string> words;
  std::size_t k = 10;
  bool all_words = false;
};

inline Lexicon load_lexicon_or_empty(const std::string& path) {
  return path.empty() ? Lexicon{} : load_lexicon_file(path);
}

inline void check_groups(const Checkpoint& ck, const Lexicon& lex) {
  std::vector<std::string> names;
  for (const auto& g : lex.groups()) names.push_back(g.name);
  if (names != ck.group_names) throw DataError("lexicon semantic groups do not match the checkpoint");
}

inline int cmd_build_vocab(const TrainArgs& a, std::ostream& out) {
  const Vocab vocab = build_vocab(read_lines(a.corpus), a.min_freq, a.max_vocab);
  std::ofstream f(a.out);
  if (!f) throw IoError("cannot write vocabulary '" + a.out + "'");
  vocab.write(f);
  out << ojson{{"vocab_size", vocab.size()}, {"out", a.out}}.dump() << '\n';
  return kOk;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const Lexicon lex = load_lexicon_file(a.lexicon);
  const std::vector<std::string> lines = read_lines(a.corpus);
  if (lines.empty()) throw DataError("corpus '" + a.corpus + "' has no sentences");

  Checkpoint ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint_file(a.resume);
    check_groups(ck, lex);
    ck.train.total_steps = a.steps;
    ck.train.validate();
  } else {
    const Vocab vocab = a.vocab.empty() ? build_vocab(lines, a.min_freq, a.max_vocab) : load_vocab_file(a.vocab);
    ModelConfig mcfg = a.model;
    mcfg.augment_inputs = !a.no_augment;
    mcfg = model_config_for(mcfg, vocab, lex);
    TrainConfig tcfg;
    tcfg.loss_mode = parse_loss_mode(a.loss);
    tcfg.mask_rate = a.mask_rate;
    tcfg.learning_rate = a.lr;
    tcfg.batch_size = a.batch;
    tcfg.total_steps = a.steps;
    tcfg.seed = a.seed;
    tcfg.checkpoint_every = a.checkpoint_every;
    tcfg.classic_masking = a.classic_masking;
    tcfg.init_std = a.init_std;
    ck = initial_checkpoint(mcfg, tcfg, vocab, lex);
  }
  const Vocab vocab = ck.vocab();
  const auto encoded = encode_corpus(lines, vocab, lex, ck.model.max_seq_len, a.threads);

  std::ofstream dump;
  if (!a.dump_targets.empty()) {
    dump.open(a.dump_targets);
    if (!dump) throw IoError("cannot write '" + a.dump_targets + "'");
  }
  TrainCallbacks cb;
  const std::string mode = to_string(ck.train.loss_mode);
  cb.on_step = [&](std::size_t step, double loss) {
    out << ojson{{"step", step + 1}, {"loss", loss}, {"mode", mode}}.dump() << '\n';
  };
  if (dump.is_open())
    cb.on_batch = [&](std::size_t step, const MaskedBatch& mb) {
      ojson rows = ojson::array();
      for (std::size_t r = 0; r < mb.targets.rows(); ++r) rows.push_back(mb.targets.set_ids(r));
      dump << ojson{{"step", step + 1}, {"rows", rows}}.dump() << '\n';
    };
  cb.on_checkpoint = [&](const Checkpoint& c) { save_checkpoint_file(c, a.out + ".step" + std::to_string(c.step)); };

  const Checkpoint final_ck = train_from(std::move(ck), encoded, lex, vocab, cb);
  save_checkpoint_file(final_ck, a.out);
  return kOk;
}

inline int cmd_eval_nn(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const Lexicon lex = load_lexicon_or_empty(a.lexicon);
  const Vocab vocab = ck.vocab();
  const EmbeddingSpace space = parse_space(a.space);
  for (const auto& w : a.words) {
    const NeighborReport rep = nearest_neighbors(w, a.k, ck.params, vocab, lex, space);
    ojson nn = ojson::array();
    for (const auto& n : rep.neighbors) nn.push_back({{"word", n.word}, {"similarity", n.similarity}});
    out << ojson{{"query", rep.query}, {"space", to_string(space)}, {"neighbors", nn}}.dump() << '\n';
  }
  return kOk;
}

inline int cmd_eval_cluster(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const Lexicon lex = load_lexicon_file(a.lexicon);
  check_groups(ck, lex);
  const ClusterReport rep = group_silhouette(ck.params, ck.vocab(), lex, parse_space(a.space));
  ojson groups = ojson::array(), skipped = ojson::array();
  for (const auto& g : rep.groups) groups.push_back({{"group", g.group}, {"size", g.size}, {"silhouette", g.silhouette}});
  for (const auto& g : rep.skipped) skipped.push_back({{"group", g.group}, {"size", g.size}});
  out << ojson{{"space", to_string(rep.space)}, {"overall", rep.overall}, {"groups", groups}, {"skipped", skipped}}.dump()
      << '\n';
  return kOk;
}

inline int cmd_eval_synonyms(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const Lexicon lex = load_lexicon_or_empty(a.lexicon);
  const Vocab vocab = ck.vocab();
  std::vector<std::pair<std::string, std::string>> pairs;
  if (a.pairs.empty()) {
    pairs = sibling_pairs(lex, vocab);
  } else {
    std::size_t lineno = 0;
    for (const auto& line : read_lines(a.pairs)) {
      ++lineno;
      const auto ws = split_words(line);
      if (ws.size() != 2) throw ParseError(lineno, "expected two words per line", a.pairs);
      pairs.emplace_back(ws[0], ws[1]);
    }
  }
  const EmbeddingSpace space = parse_space(a.space);
  const double mean = synonym_similarity(pairs, ck.params, vocab, lex, space);
  out << ojson{{"space", to_string(space)}, {"pairs", pairs.size()}, {"mean_cosine", mean}}.dump() << '\n';
  return kOk;
}

inline int cmd_finetune(const EvalArgs& a, const FinetuneConfig& fc, std::ostream& out) {
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const Lexicon lex = load_lexicon_or_empty(a.lexicon);
  const TaggedCorpus tagged = load_tagged_corpus_file(a.tagged);
  const FinetuneResult r = finetune_token_classifier(ck, lex, tagged, fc);
  ojson f1 = ojson::object();
  for (std::size_t t = 0; t < r.tag_names.size(); ++t) f1[r.tag_names[t]] = r.per_tag_f1[t];
  out << ojson{{"accuracy", r.accuracy},
               {"test_tokens", r.test_tokens},
               {"train_sentences", r.train_sentences},
               {"test_sentences", r.test_sentences},
               {"per_tag_f1", f1}}
             .dump()
      << '\n';
  return kOk;
}

inline int cmd_export(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const Lexicon lex = load_lexicon_or_empty(a.lexicon);
  const Vocab vocab = ck.vocab();
  const EmbeddingSpace space = parse_space(a.space);
  std::vector<std::string> words;
  std::vector<std::vector<double>> vecs;
  for (const auto& w : vocab.words()) {
    if (!a.all_words && !lex.contains(w)) continue;
    words.push_back(w);
    vecs.push_back(word_vector(ck.params, vocab, lex, w, space));
  }
  const std::vector<Point2> pts = project_2d(vecs);
  std::ofstream f(a.out);
  if (!f) throw IoError("cannot write '" + a.out + "'");
  f.precision(17);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto g = lex.group_of(words[i]);
    f << words[i] << '\t' << (g ? lex.group_name(*g) : "-") << '\t' << pts[i].x << '\t' << pts[i].y << '\n';
  }
  out << ojson{{"points", words.size()}, {"space", to_string(space)}, {"out", a.out}}.dump() << '\n';
  return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, const std::string& mode, std::ostream& out) {
  constexpr double kTolerance = 1e-4;
  std::vector<LossMode> modes;
  if (mode == "both") modes = {LossMode::CeOneHot, LossMode::BceCui};
  else modes = {parse_loss_mode(mode)};
  bool ok = true;
  for (LossMode m : modes) {
    const GradCheckReport r = model_gradient_check(m, seed);
    const bool pass = r.max_relative_error <= kTolerance;
    ok = ok && pass;
    out << ojson{{"mode", to_string(m)},
                 {"max_relative_error", r.max_relative_error},
                 {"entries", r.entries_checked},
                 {"worst_parameter", r.worst_parameter},
                 {"pass", pass}}
               .dump()
        << '\n';
  }
  return ok ? kOk : kNumericError;
}

}  // namespace detail

/// args excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-LM pre-training with concept-aware targets and semantic-group inputs", "cuimlm"};
  app.require_subcommand(1, 1);

  detail::TrainArgs ta;
  detail::EvalArgs ea;
  FinetuneConfig fc;
  std::uint64_t gc_seed = 1;
  std::string gc_mode = "both";

  auto* bv = app.add_subcommand("build-vocab", "Build a closed word vocabulary from a corpus");
  bv->add_option("--corpus", ta.corpus, "One sentence per line")->required();
  bv->add_option("--out", ta.out, "Vocabulary file to write")->required();
  bv->add_option("--min-freq", ta.min_freq, "Minimum word count");
  bv->add_option("--max-size", ta.max_vocab, "Maximum vocabulary size including reserved tokens");

  auto* tr = app.add_subcommand("train", "Pre-train with the masked-LM objective");
  tr->add_option("--corpus", ta.corpus, "One sentence per line")->required();
  tr->add_option("--lexicon", ta.lexicon, "word<TAB>cui[,cui]<TAB>GROUP file")->required();
  tr->add_option("--out", ta.out, "Checkpoint to write")->required();
  tr->add_option("--vocab", ta.vocab, "Vocabulary file (default: built from the corpus)");
  tr->add_option("--loss", ta.loss, "ce or bce-cui")->check(CLI::IsMember({"ce", "bce-cui"}));
  tr->add_option("--steps", ta.steps, "Total optimizer steps");
  tr->add_option("--seed", ta.seed, "Root seed");
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_option("--batch", ta.batch, "Sentences per batch");
  tr->add_option("--mask-rate", ta.mask_rate, "Masking probability per eligible position");
  tr->add_option("--init-std", ta.init_std, "Std of the truncated-normal weight init");
  tr->add_flag("--classic-masking", ta.classic_masking, "80/10/10 mask/random/keep corruption");
  tr->add_flag("--no-augment", ta.no_augment, "Disable semantic-group input embeddings");
  tr->add_option("--hidden", ta.model.hidden_dim, "Hidden size");
  tr->add_option("--layers", ta.model.layer_count, "Encoder layers");
  tr->add_option("--heads", ta.model.head_count, "Attention heads");
  tr->add_option("--ff", ta.model.ff_dim, "Feed-forward size");
  tr->add_option("--max-len", ta.model.max_seq_len, "Maximum sequence length including [CLS]");
  tr->add_option("--min-freq", ta.min_freq, "Minimum word count when building the vocabulary");
  tr->add_option("--max-vocab", ta.max_vocab, "Maximum vocabulary size when building it");
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "Also write OUT.stepN every N steps");
  tr->add_option("--resume", ta.resume, "Continue from this checkpoint up to --steps");
  tr->add_option("--threads", ta.threads, "Threads for corpus encoding")->check(CLI::PositiveNumber);
  tr->add_option("--dump-targets", ta.dump_targets, "Write each step's target rows as JSON lines");

  auto* nn = app.add_subcommand("eval-nn", "Nearest neighbours of words in the embedding table");
  nn->add_option("--checkpoint", ea.checkpoint)->required();
  nn->add_option("--lexicon", ea.lexicon, "Needed for the augmented space");
  nn->add_option("--word", ea.words, "Query word (repeatable)")->required();
  nn->add_option("--k", ea.k, "Neighbours to report");
  nn->add_option("--space", ea.space, "input or augmented")->check(CLI::IsMember({"input", "augmented"}));

  auto* cl = app.add_subcommand("eval-cluster", "Silhouette of word vectors grouped by semantic group");
  cl->add_option("--checkpoint", ea.checkpoint)->required();
  cl->add_option("--lexicon", ea.lexicon)->required();
  cl->add_option("--space", ea.space, "input or augmented")->check(CLI::IsMember({"input", "augmented"}));

  auto* sy = app.add_subcommand("eval-synonyms", "Mean cosine similarity of word pairs");
  sy->add_option("--checkpoint", ea.checkpoint)->required();
  sy->add_option("--lexicon", ea.lexicon, "Pairs default to all vocabulary words sharing a CUI");
  sy->add_option("--pairs", ea.pairs, "File with two words per line");
  sy->add_option("--space", ea.space, "input or augmented")->check(CLI::IsMember({"input", "augmented"}));

  auto* ft = app.add_subcommand("finetune-ner", "Fine-tune a linear token-classification head");
  ft->add_option("--checkpoint", ea.checkpoint)->required();
  ft->add_option("--tagged", ea.tagged, "word/TAG sentences")->required();
  ft->add_option("--lexicon", ea.lexicon, "Semantic groups for the input embeddings");
  ft->add_option("--epochs", fc.epochs);
  ft->add_option("--lr", fc.learning_rate);
  ft->add_option("--batch", fc.batch_size);
  ft->add_option("--holdout", fc.holdout_fraction, "Fraction of sentences held out")->check(CLI::Range(0.0, 1.0));
  ft->add_option("--seed", fc.seed);

  auto* ex = app.add_subcommand("export-embeddings", "Write 2-D PCA coordinates as word<TAB>group<TAB>x<TAB>y");
  ex->add_option("--checkpoint", ea.checkpoint)->required();
  ex->add_option("--out", ea.out)->required();
  ex->add_option("--lexicon", ea.lexicon);
  ex->add_option("--space", ea.space, "input or augmented")->check(CLI::IsMember({"input", "augmented"}));
  ex->add_flag("--all-words", ea.all_words, "Include words outside the lexicon");

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients on a tiny model");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--mode", gc_mode, "ce, bce-cui or both")->check(CLI::IsMember({"ce", "bce-cui", "both"}));

  try {
    args = expand_config(std::move(args));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "build-vocab") return detail::cmd_build_vocab(ta, out);
    if (name == "train") return detail::cmd_train(ta, out);
    if (name == "eval-nn") return detail::cmd_eval_nn(ea, out);
    if (name == "eval-cluster") return detail::cmd_eval_cluster(ea, out);
    if (name == "eval-synonyms") return detail::cmd_eval_synonyms(ea, out);
    if (name == "finetune-ner") return detail::cmd_finetune(ea, fc, out);
    if (name == "export-embeddings") return detail::cmd_export(ea, out);
    return detail::cmd_gradcheck(gc_seed, gc_mode, out);
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace cuimlm::cli
