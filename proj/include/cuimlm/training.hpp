#pragma once

// Masked-LM training: batch corruption, loss per mode, Adam, and the loop.
//
// All randomness is derived from TrainConfig::seed:
//   "init"           parameter initialization
//   "mask",  step    masking of the batch at `step`
//   "shuffle", epoch corpus order for `epoch`
// so a run resumed from a checkpoint at step k continues exactly as an
// uninterrupted run would.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cuimlm/errors.hpp"
#include "cuimlm/lexicon.hpp"
#include "cuimlm/losses.hpp"
#include "cuimlm/model.hpp"
#include "cuimlm/rng.hpp"
#include "cuimlm/tensor.hpp"
#include "cuimlm/tokenizer.hpp"

namespace cuimlm {

enum class LossMode { CeOneHot, BceCui };

inline std::string to_string(LossMode m) { return m == LossMode::CeOneHot ? "ce" : "bce-cui"; }

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "ce") return LossMode::CeOneHot;
  if (s == "bce-cui") return LossMode::BceCui;
  throw DataError("unknown loss mode '" + std::string(s) + "' (expected ce or bce-cui)");
}

inline TargetMode target_mode(LossMode m) {
  return m == LossMode::CeOneHot ? TargetMode::OneHot : TargetMode::CuiExpanded;
}

struct TrainConfig {
  LossMode loss_mode = LossMode::CeOneHot;
  double mask_rate = 0.15;
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t total_steps = 2000;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  bool classic_masking = false;
  double init_std = 0.02;

  void validate() const {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw DataError("mask_rate must be in (0, 1)");
    if (total_steps < 1) throw DataError("total_steps must be >= 1");
    if (batch_size < 1) throw DataError("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw DataError("learning_rate must be >= 0");
    if (!(init_std > 0.0)) throw DataError("init_std must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const ModelParams& params) {
    OptimizerState s;
    for (const Tensor* t : params.tensors()) {
      s.m.emplace_back(t->shape());
      s.v.emplace_back(t->shape());
    }
    return s;
  }

  bool operator==(const OptimizerState&) const = default;
};

/// One Adam step with bias correction, no weight decay, over any tensor list.
inline void adam_update(std::span<Tensor* const> ps, OptimizerState& state, const Gradients& grads, double lr,
                        const AdamConfig& cfg = {}) {
  if (grads.size() != ps.size() || state.m.size() != ps.size())
    throw ShapeError("adam_update: " + std::to_string(grads.size()) + " gradients for " + std::to_string(ps.size()) +
                     " parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor& p = *ps[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) throw ShapeError("adam_update: gradient shape mismatch for parameter " + std::to_string(i));
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
      if (update != 0.0) p[j] -= update;
    }
  }
}

inline void adam_update(ModelParams& params, OptimizerState& state, const Gradients& grads, double lr,
                        const AdamConfig& cfg = {}) {
  std::vector<Tensor*> ps = params.tensors();
  adam_update(std::span<Tensor* const>(ps), state, grads, lr, cfg);
}

/// A batch after masking, ready for the loss.
struct MaskedBatch {
  std::vector<EncodedSentence> inputs;  // token ids already corrupted
  std::vector<MaskingOutcome> outcomes;
  TargetMatrix targets{TargetMode::OneHot, 0, 0};
};

inline MaskedBatch prepare_batch(std::span<const EncodedSentence> sentences, Rng& rng, const TrainConfig& cfg,
                                 const Lexicon& lex, const Vocab& vocab) {
  MaskedBatch mb;
  MaskingOptions opts{cfg.classic_masking, vocab.size()};
  std::vector<TokenId> originals;
  for (const auto& s : sentences) {
    MaskingOutcome o = apply_masking(s, cfg.mask_rate, rng, opts);
    EncodedSentence corrupted = s;
    corrupted.token_ids = o.corrupted_ids;
    originals.insert(originals.end(), o.original_ids.begin(), o.original_ids.end());
    mb.inputs.push_back(std::move(corrupted));
    mb.outcomes.push_back(std::move(o));
  }
  mb.targets = build_targets(originals, lex, vocab, target_mode(cfg.loss_mode));
  return mb;
}

/// Records the masked-LM loss of `batch` on the tape of `bp`.
inline Var mlm_loss(const BoundParams& bp, const MaskedBatch& batch, const ModelConfig& cfg, LossMode mode) {
  ModelInput in = make_input(batch.inputs, /*trim=*/true);
  EmbeddingOutput emb = input_embed(in, bp, cfg);
  EncoderOutput enc = encoder_forward(emb.normalized, in, bp, cfg);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.outcomes.size(); ++b)
    for (std::size_t pos : batch.outcomes[b].masked_positions) rows.push_back(b * in.seq + pos);
  Var logits = mlm_logits(gather_rows(enc.hidden.back(), std::move(rows)), bp);
  return mode == LossMode::CeOneHot ? cross_entropy(logits, batch.targets) : binary_cross_entropy(logits, batch.targets);
}

struct StepResult {
  double loss = 0.0;
  Gradients grads;
};

/// Loss and gradients without touching the parameters.
inline StepResult loss_and_gradients(const ModelParams& params, const MaskedBatch& batch, const ModelConfig& cfg,
                                     LossMode mode) {
  Tape tape;
  BoundParams bp = bind_params(tape, params);
  Var loss = mlm_loss(bp, batch, cfg, mode);
  StepResult r;
  r.loss = loss.value().item();
  r.grads = backward(tape, loss);
  return r;
}

/// Forward, loss, backward and one Adam update. Returns the pre-update loss.
inline double train_step(ModelParams& params, OptimizerState& opt, const MaskedBatch& batch, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, std::size_t step_index = 0) {
  if (batch.inputs.empty()) throw DataError("train_step: empty batch");
  StepResult r = loss_and_gradients(params, batch, mcfg, tcfg.loss_mode);
  if (!std::isfinite(r.loss)) throw NumericError(step_index, "non-finite loss");
  adam_update(params, opt, r.grads, tcfg.learning_rate);
  return r.loss;
}

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model;
  TrainConfig train;
  ModelParams params;
  OptimizerState optimizer;
  std::vector<std::string> vocab_words;  // non-reserved tokens in id order
  std::vector<std::string> group_names;  // semantic groups in id order
  std::uint64_t step = 0;

  Vocab vocab() const { return Vocab::from_words(vocab_words); }

  bool operator==(const Checkpoint&) const = default;
};

/// Encodes a corpus, dropping lines with nothing to mask. With threads > 1
/// the lines are split into contiguous chunks encoded in parallel; the
/// result does not depend on the thread count.
inline std::vector<EncodedSentence> encode_corpus(const std::vector<std::string>& lines, const Vocab& vocab,
                                                  const Lexicon& lex, std::size_t max_len, std::size_t threads = 1) {
  std::vector<EncodedSentence> encoded(lines.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) encoded[i] = encode(lines[i], vocab, lex, max_len);
  };
  threads = std::max<std::size_t>(1, std::min(threads, lines.size()));
  if (threads == 1) {
    work(0, lines.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (lines.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk, hi = std::min(lines.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  std::vector<EncodedSentence> kept;
  kept.reserve(encoded.size());
  for (auto& e : encoded)
    if (e.attention_len >= 2) kept.push_back(std::move(e));
  return kept;
}

/// Deterministic sample order: epoch-wise permutations, consumed as one
/// continuous stream so a batch may straddle an epoch boundary.
class SampleOrder {
 public:
  SampleOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::size_t at(std::uint64_t global_index) {
    const std::uint64_t epoch = global_index / n_;
    if (!cached_epoch_ || *cached_epoch_ != epoch) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, "shuffle", epoch));
      rng.shuffle(std::span<std::size_t>(perm_));
      cached_epoch_ = epoch;
    }
    return perm_[global_index % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::optional<std::uint64_t> cached_epoch_;
  std::vector<std::size_t> perm_;
};

struct TrainCallbacks {
  std::function<void(std::size_t step, double loss)> on_step;
  std::function<void(std::size_t step, const MaskedBatch&)> on_batch;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

inline ModelConfig model_config_for(ModelConfig base, const Vocab& vocab, const Lexicon& lex) {
  base.vocab_size = vocab.size();
  base.group_count = lex.group_count();
  return base;
}

/// Fresh checkpoint at step 0: initialized parameters, zero moments.
inline Checkpoint initial_checkpoint(const ModelConfig& mcfg, const TrainConfig& tcfg, const Vocab& vocab,
                                     const Lexicon& lex) {
  mcfg.validate();
  tcfg.validate();
  if (mcfg.vocab_size != vocab.size()) throw DataError("model vocab_size does not match the vocabulary");
  if (mcfg.group_count != lex.group_count()) throw DataError("model group_count does not match the lexicon");
  Checkpoint ck;
  ck.model = mcfg;
  ck.train = tcfg;
  Rng init(derive_seed(tcfg.seed, "init"));
  ck.params = init_params(mcfg, init, tcfg.init_std);
  ck.optimizer = OptimizerState::zeros_like(ck.params);
  ck.vocab_words.assign(vocab.words().begin(), vocab.words().end());
  for (const auto& g : lex.groups()) ck.group_names.push_back(g.name);
  return ck;
}

/// Runs steps [start.step, cfg.total_steps) from `start` and returns the
/// final checkpoint.
inline Checkpoint train_from(Checkpoint start, const std::vector<EncodedSentence>& corpus, const Lexicon& lex,
                             const Vocab& vocab, const TrainCallbacks& cb = {}) {
  if (corpus.empty()) throw DataError("training corpus has no usable sentence");
  const TrainConfig& cfg = start.train;
  cfg.validate();
  SampleOrder order(corpus.size(), cfg.seed);
  std::vector<EncodedSentence> batch;
  for (std::size_t step = start.step; step < cfg.total_steps; ++step) {
    batch.clear();
    for (std::size_t j = 0; j < cfg.batch_size; ++j)
      batch.push_back(corpus[order.at(static_cast<std::uint64_t>(step) * cfg.batch_size + j)]);
    Rng mask_rng(derive_seed(cfg.seed, "mask", step));
    MaskedBatch mb = prepare_batch(batch, mask_rng, cfg, lex, vocab);
    if (cb.on_batch) cb.on_batch(step, mb);
    const double loss = train_step(start.params, start.optimizer, mb, start.model, cfg, step);
    start.step = step + 1;
    if (cb.on_step) cb.on_step(step, loss);
    if (cb.on_checkpoint && cfg.checkpoint_every != 0 && start.step % cfg.checkpoint_every == 0 &&
        start.step != cfg.total_steps)
      cb.on_checkpoint(start);
  }
  return start;
}

inline Checkpoint train_loop(const std::vector<std::string>& corpus, const Lexicon& lex, const Vocab& vocab,
                             const ModelConfig& mcfg, const TrainConfig& tcfg, const TrainCallbacks& cb = {},
                             std::size_t threads = 1) {
  if (corpus.empty()) throw DataError("training corpus is empty");
  Checkpoint ck = initial_checkpoint(mcfg, tcfg, vocab, lex);
  auto encoded = encode_corpus(corpus, vocab, lex, mcfg.max_seq_len, threads);
  return train_from(std::move(ck), encoded, lex, vocab, cb);
}

}  // namespace cuimlm
