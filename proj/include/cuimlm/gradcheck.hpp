#pragma once

// End-to-end gradient self-check: analytic gradients of the full masked-LM
// loss against central finite differences on a tiny random model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cuimlm/lexicon.hpp"
#include "cuimlm/losses.hpp"
#include "cuimlm/model.hpp"
#include "cuimlm/rng.hpp"
#include "cuimlm/tokenizer.hpp"
#include "cuimlm/training.hpp"

namespace cuimlm {

struct GradCheckReport {
  LossMode mode = LossMode::CeOneHot;
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// The tiny fixture: 16 words + 4 reserved ids, two semantic groups, three
/// CUI sibling sets.
struct GradCheckFixture {
  Lexicon lexicon;
  Vocab vocab;
  ModelConfig model;
  std::vector<EncodedSentence> sentences;
};

inline GradCheckFixture make_gradcheck_fixture(std::uint64_t seed) {
  GradCheckFixture fx;
  fx.lexicon = parse_lexicon(
      "lungs\tC0024109\tANATOMY\n"
      "lung\tC0024109\tANATOMY\n"
      "pulmonary\tC0024109\tANATOMY\n"
      "kidney\tC0022646\tANATOMY\n"
      "ren\tC0022646\tANATOMY\n"
      "mass\tC0577559\tDISORDER\n"
      "lump\tC0577559\tDISORDER\n"
      "bleeding\tC0019080\tDISORDER\n");
  fx.vocab = Vocab::from_words({"lungs", "lung", "pulmonary", "kidney", "ren", "mass", "lump", "bleeding", "the",
                                "patient", "has", "a", "in", "no", "left", "seen"});
  fx.model.hidden_dim = 8;
  fx.model.layer_count = 1;
  fx.model.head_count = 2;
  fx.model.ff_dim = 16;
  fx.model.max_seq_len = 6;
  fx.model.vocab_size = fx.vocab.size();
  fx.model.group_count = fx.lexicon.group_count();
  fx.model.augment_inputs = true;

  Rng rng(derive_seed(seed, "gradcheck-data"));
  const std::vector<std::size_t> lengths{5, 3, 4};
  for (std::size_t len : lengths) {
    std::string s;
    for (std::size_t i = 0; i < len; ++i) {
      if (!s.empty()) s += ' ';
      s += fx.vocab.token(static_cast<TokenId>(kReservedCount + rng.below(fx.vocab.size() - kReservedCount)));
    }
    fx.sentences.push_back(encode(s, fx.vocab, fx.lexicon, fx.model.max_seq_len));
  }
  return fx;
}

/// Compares every parameter entry. `init_std` controls the scale of the
/// random model; larger values keep gradients well above rounding noise.
inline GradCheckReport model_gradient_check(LossMode mode, std::uint64_t seed, double h = 1e-5,
                                            double init_std = 0.5) {
  GradCheckFixture fx = make_gradcheck_fixture(seed);
  Rng init(derive_seed(seed, "init"));
  ModelParams params = init_params(fx.model, init, init_std);

  TrainConfig tcfg;
  tcfg.loss_mode = mode;
  tcfg.mask_rate = 0.4;
  Rng mask(derive_seed(seed, "mask"));
  MaskedBatch batch = prepare_batch(fx.sentences, mask, tcfg, fx.lexicon, fx.vocab);

  const Gradients analytic = loss_and_gradients(params, batch, fx.model, mode).grads;
  auto loss_at = [&](const ModelParams& p) {
    Tape tape;
    BoundParams bp = bind_params(tape, p, false);
    return mlm_loss(bp, batch, fx.model, mode).value().item();
  };

  GradCheckReport report;
  report.mode = mode;
  const std::vector<std::string> names = params.names();
  std::vector<Tensor*> tensors = params.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    Tensor& p = *tensors[t];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double orig = p[j];
      p[j] = orig + h;
      const double up = loss_at(params);
      p[j] = orig - h;
      const double down = loss_at(params);
      p[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.entries_checked;
      if (err > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = std::max(report.max_relative_error, err);
        report.worst_parameter = names[t];
        report.worst_index = j;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace cuimlm
