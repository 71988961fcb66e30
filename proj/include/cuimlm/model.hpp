#pragma once

// BERT-style encoder with semantic-group augmented input embeddings.
//
// Input vector for token j of a sentence:
//
//   u_j = position[j] + segment[seg_j] + token[w_j] + group[s_j]
//
// where the group term is dropped (zero) for tokens without a semantic group
// or when augment_inputs is off. u then goes through the embedding
// layer-norm and a stack of post-LN transformer layers. MLM scores reuse the
// token table: logits = hidden * token_table^T + mlm_bias.
//
// Tables are stored one row per item ([vocab, d], [max_seq_len, d], [2, d],
// [groups, d]); rows play the role of embedding columns.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cuimlm/errors.hpp"
#include "cuimlm/lexicon.hpp"
#include "cuimlm/rng.hpp"
#include "cuimlm/tensor.hpp"
#include "cuimlm/tokenizer.hpp"

namespace cuimlm {

struct ModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t layer_count = 2;
  std::size_t head_count = 4;
  std::size_t ff_dim = 256;
  std::size_t max_seq_len = 32;
  std::size_t vocab_size = kReservedCount;
  std::size_t group_count = 0;
  bool augment_inputs = true;
  double layer_norm_eps = 1e-12;

  void validate() const {
    if (hidden_dim == 0 || head_count == 0 || hidden_dim % head_count != 0)
      throw DataError("hidden_dim must be a positive multiple of head_count");
    if (layer_count == 0 || ff_dim == 0) throw DataError("layer_count and ff_dim must be positive");
    if (max_seq_len < 2) throw DataError("max_seq_len must be >= 2");
    if (vocab_size < kReservedCount) throw DataError("vocab_size must be >= 4");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor wq, bq, wk, wv, bv, wo, bo;  // no key bias: it shifts every score in a row equally
  Tensor attn_ln_gain, attn_ln_bias;
  Tensor ff_in_w, ff_in_b, ff_out_w, ff_out_b;
  Tensor ff_ln_gain, ff_ln_bias;

  bool operator==(const LayerParams&) const = default;
};

enum class ParamKind { Weight, Bias, Gain };

struct ModelParams {
  Tensor token_table;     // [vocab, d]
  Tensor position_table;  // [max_seq_len, d]
  Tensor segment_table;   // [2, d]
  Tensor group_table;     // [groups, d]
  Tensor emb_ln_gain, emb_ln_bias;
  std::vector<LayerParams> layers;
  Tensor mlm_bias;  // [vocab]

  /// Visits every tensor in a fixed order: f(name, tensor, kind). The visit
  /// index is the tensor's parameter slot.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("token_table", self.token_table, ParamKind::Weight);
    f("position_table", self.position_table, ParamKind::Weight);
    f("segment_table", self.segment_table, ParamKind::Weight);
    f("group_table", self.group_table, ParamKind::Weight);
    f("emb_ln.gain", self.emb_ln_gain, ParamKind::Gain);
    f("emb_ln.bias", self.emb_ln_bias, ParamKind::Bias);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "wq", l.wq, ParamKind::Weight);
      f(p + "bq", l.bq, ParamKind::Bias);
      f(p + "wk", l.wk, ParamKind::Weight);
      f(p + "wv", l.wv, ParamKind::Weight);
      f(p + "bv", l.bv, ParamKind::Bias);
      f(p + "wo", l.wo, ParamKind::Weight);
      f(p + "bo", l.bo, ParamKind::Bias);
      f(p + "attn_ln.gain", l.attn_ln_gain, ParamKind::Gain);
      f(p + "attn_ln.bias", l.attn_ln_bias, ParamKind::Bias);
      f(p + "ff_in.w", l.ff_in_w, ParamKind::Weight);
      f(p + "ff_in.b", l.ff_in_b, ParamKind::Bias);
      f(p + "ff_out.w", l.ff_out_w, ParamKind::Weight);
      f(p + "ff_out.b", l.ff_out_b, ParamKind::Bias);
      f(p + "ff_ln.gain", l.ff_ln_gain, ParamKind::Gain);
      f(p + "ff_ln.bias", l.ff_ln_bias, ParamKind::Bias);
    }
    f("mlm_bias", self.mlm_bias, ParamKind::Bias);
  }

  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for_each([&](const std::string&, Tensor& t, ParamKind) { out.push_back(&t); });
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for_each([&](const std::string&, const Tensor& t, ParamKind) { out.push_back(&t); });
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for_each([&](const std::string& n, const Tensor&, ParamKind) { out.push_back(n); });
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// Shapes a zero-filled parameter set for `cfg`.
inline ModelParams shape_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, ff = cfg.ff_dim;
  ModelParams p;
  p.token_table = Tensor({cfg.vocab_size, d});
  p.position_table = Tensor({cfg.max_seq_len, d});
  p.segment_table = Tensor({2, d});
  p.group_table = Tensor({cfg.group_count, d});
  p.emb_ln_gain = Tensor({d});
  p.emb_ln_bias = Tensor({d});
  p.layers.resize(cfg.layer_count);
  for (auto& l : p.layers) {
    l.wq = Tensor({d, d}), l.bq = Tensor({d});
    l.wk = Tensor({d, d});
    l.wv = Tensor({d, d}), l.bv = Tensor({d});
    l.wo = Tensor({d, d}), l.bo = Tensor({d});
    l.attn_ln_gain = Tensor({d}), l.attn_ln_bias = Tensor({d});
    l.ff_in_w = Tensor({d, ff}), l.ff_in_b = Tensor({ff});
    l.ff_out_w = Tensor({ff, d}), l.ff_out_b = Tensor({d});
    l.ff_ln_gain = Tensor({d}), l.ff_ln_bias = Tensor({d});
  }
  p.mlm_bias = Tensor({cfg.vocab_size});
  return p;
}

/// Weights ~ normal(0, std) truncated at +-2 std; gains 1; biases 0.
inline ModelParams init_params(const ModelConfig& cfg, Rng& rng, double stddev = 0.02) {
  if (!(stddev > 0.0)) throw DataError("init stddev must be positive");
  ModelParams p = shape_params(cfg);
  p.for_each([&](const std::string&, Tensor& t, ParamKind kind) {
    switch (kind) {
      case ParamKind::Weight:
        for (double& v : t.values()) v = rng.truncated_normal(stddev);
        break;
      case ParamKind::Gain:
        t.fill(1.0);
        break;
      case ParamKind::Bias:
        t.fill(0.0);
        break;
    }
  });
  return p;
}

/// Parameters placed on a tape, in slot order.
struct BoundLayer {
  Var wq, bq, wk, wv, bv, wo, bo;
  Var attn_ln_gain, attn_ln_bias;
  Var ff_in_w, ff_in_b, ff_out_w, ff_out_b;
  Var ff_ln_gain, ff_ln_bias;
};

struct BoundParams {
  Var token_table, position_table, segment_table, group_table;
  Var emb_ln_gain, emb_ln_bias;
  std::vector<BoundLayer> layers;
  Var mlm_bias;
};

/// Registers every parameter on the tape. With trainable=false the tensors are
/// recorded as constants and backward() reports nothing for them.
inline BoundParams bind_params(Tape& tape, const ModelParams& p, bool trainable = true) {
  std::vector<Var> vars;
  std::size_t slot = 0;
  p.for_each([&](const std::string&, const Tensor& t, ParamKind) {
    vars.push_back(trainable ? tape.parameter(t, slot) : tape.constant(t));
    ++slot;
  });
  BoundParams b;
  std::size_t i = 0;
  b.token_table = vars[i++];
  b.position_table = vars[i++];
  b.segment_table = vars[i++];
  b.group_table = vars[i++];
  b.emb_ln_gain = vars[i++];
  b.emb_ln_bias = vars[i++];
  b.layers.resize(p.layers.size());
  for (auto& l : b.layers) {
    for (Var* v : {&l.wq, &l.bq, &l.wk, &l.wv, &l.bv, &l.wo, &l.bo, &l.attn_ln_gain, &l.attn_ln_bias,
                   &l.ff_in_w, &l.ff_in_b, &l.ff_out_w, &l.ff_out_b, &l.ff_ln_gain, &l.ff_ln_bias})
      *v = vars[i++];
  }
  b.mlm_bias = vars[i++];
  return b;
}

/// A batch flattened to [batch * seq] rows.
struct ModelInput {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> token_ids;
  std::vector<GroupId> group_ids;
  std::vector<std::uint8_t> segment_ids;
  std::vector<std::size_t> attention_len;
};

/// Packs sentences into a ModelInput. With trim=true the sequence length is cut
/// to the longest attended span in the batch; PAD rows past it never influence
/// non-PAD outputs, so results at real positions are unchanged.
inline ModelInput make_input(std::span<const EncodedSentence> sentences, bool trim = false) {
  if (sentences.empty()) throw DataError("empty batch");
  ModelInput in;
  in.batch = sentences.size();
  const std::size_t full = sentences[0].length();
  std::size_t seq = trim ? 1 : full;
  for (const auto& s : sentences) {
    if (s.length() != full || s.group_ids.size() != full || s.segment_ids.size() != full)
      throw DataError("sentences in a batch must share one padded length");
    if (trim) seq = std::max(seq, s.attention_len);
  }
  in.seq = seq;
  for (const auto& s : sentences) {
    in.token_ids.insert(in.token_ids.end(), s.token_ids.begin(), s.token_ids.begin() + seq);
    in.group_ids.insert(in.group_ids.end(), s.group_ids.begin(), s.group_ids.begin() + seq);
    in.segment_ids.insert(in.segment_ids.end(), s.segment_ids.begin(), s.segment_ids.begin() + seq);
    in.attention_len.push_back(s.attention_len);
  }
  return in;
}

struct EmbeddingOutput {
  Var summed;      // pre-layer-norm input vectors, [batch*seq, d]
  Var normalized;  // after the embedding layer-norm
};

inline EmbeddingOutput input_embed(const ModelInput& in, const BoundParams& bp, const ModelConfig& cfg) {
  if (in.seq > cfg.max_seq_len)
    throw DataError("sequence length " + std::to_string(in.seq) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  const std::size_t rows = in.batch * in.seq;
  std::vector<std::size_t> tok(rows), pos(rows), seg(rows), grp(rows, kSkipRow);
  bool any_group = false;
  for (std::size_t r = 0; r < rows; ++r) {
    if (in.token_ids[r] >= cfg.vocab_size)
      throw DataError("token id " + std::to_string(in.token_ids[r]) + " out of range");
    if (in.segment_ids[r] > 1) throw DataError("segment id out of range");
    const GroupId g = in.group_ids[r];
    if (g != kNoGroup && g >= cfg.group_count)
      throw DataError("group id " + std::to_string(g) + " out of range");
    tok[r] = in.token_ids[r];
    pos[r] = r % in.seq;
    seg[r] = in.segment_ids[r];
    if (g != kNoGroup) {
      grp[r] = g;
      any_group = true;
    }
  }
  Var u = add(add(gather_rows(bp.position_table, std::move(pos)), gather_rows(bp.segment_table, std::move(seg))),
              gather_rows(bp.token_table, std::move(tok)));
  if (cfg.augment_inputs && any_group) u = add(u, gather_rows(bp.group_table, std::move(grp)));
  return {u, layer_norm(u, bp.emb_ln_gain, bp.emb_ln_bias, cfg.layer_norm_eps)};
}

struct EncoderOutput {
  std::vector<Var> hidden;     // per layer, [batch*seq, d]
  std::vector<Var> attention;  // per layer, [batch*heads, seq, seq]
};

/// Post-LN transformer stack. Keys at PAD positions get zero attention weight.
inline EncoderOutput encoder_forward(Var x, const ModelInput& in, const BoundParams& bp, const ModelConfig& cfg) {
  const std::size_t heads = cfg.head_count, head_dim = cfg.hidden_dim / heads;
  std::vector<std::size_t> valid;
  valid.reserve(in.batch * heads);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) valid.push_back(std::max<std::size_t>(in.attention_len[b], 1));

  EncoderOutput out;
  Var h = x;
  for (const BoundLayer& l : bp.layers) {
    Var q = split_heads(add_broadcast(matmul(h, l.wq), l.bq), in.batch, in.seq, heads);
    Var k = split_heads(matmul(h, l.wk), in.batch, in.seq, heads);
    Var v = split_heads(add_broadcast(matmul(h, l.wv), l.bv), in.batch, in.seq, heads);
    Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    Var attn = softmax_rows(scores, valid);
    Var ctx = merge_heads(matmul(attn, v), in.batch, heads);
    Var attn_out = add_broadcast(matmul(ctx, l.wo), l.bo);
    Var h1 = layer_norm(add(h, attn_out), l.attn_ln_gain, l.attn_ln_bias, cfg.layer_norm_eps);
    Var ff = add_broadcast(matmul(gelu(add_broadcast(matmul(h1, l.ff_in_w), l.ff_in_b)), l.ff_out_w), l.ff_out_b);
    h = layer_norm(add(h1, ff), l.ff_ln_gain, l.ff_ln_bias, cfg.layer_norm_eps);
    out.hidden.push_back(h);
    out.attention.push_back(attn);
  }
  return out;
}

/// hidden [rows, d] -> scores [rows, vocab] through the tied token table.
inline Var mlm_logits(Var hidden, const BoundParams& bp) {
  return add_broadcast(matmul(hidden, transpose(bp.token_table)), bp.mlm_bias);
}

struct ForwardTrace {
  Tensor input_embeddings;  // [batch, seq, d], before the embedding layer-norm
  std::vector<Tensor> hidden;
  std::vector<Tensor> attention;
  Tensor logits;  // [batch, seq, vocab]
};

/// Gradient-free forward pass over full padded length.
inline ForwardTrace forward(const ModelParams& params, const ModelConfig& cfg,
                            std::span<const EncodedSentence> sentences) {
  Tape tape;
  BoundParams bp = bind_params(tape, params, false);
  ModelInput in = make_input(sentences);
  EmbeddingOutput emb = input_embed(in, bp, cfg);
  EncoderOutput enc = encoder_forward(emb.normalized, in, bp, cfg);
  Var logits = mlm_logits(enc.hidden.back(), bp);
  ForwardTrace t;
  const std::size_t d = cfg.hidden_dim;
  t.input_embeddings = emb.summed.value().reshaped({in.batch, in.seq, d});
  for (Var h : enc.hidden) t.hidden.push_back(h.value().reshaped({in.batch, in.seq, d}));
  for (Var a : enc.attention) t.attention.push_back(a.value());
  t.logits = logits.value().reshaped({in.batch, in.seq, cfg.vocab_size});
  return t;
}

/// Final-layer hidden states, [batch*seq, d], for a batch.
inline Tensor encode_hidden(const ModelParams& params, const ModelConfig& cfg,
                            std::span<const EncodedSentence> sentences) {
  Tape tape;
  BoundParams bp = bind_params(tape, params, false);
  ModelInput in = make_input(sentences);
  EncoderOutput enc = encoder_forward(input_embed(in, bp, cfg).normalized, in, bp, cfg);
  return enc.hidden.back().value();
}

}  // namespace cuimlm
