#pragma once

// Masked-LM losses over the logits of masked positions.
//
//   ce:  mean_m [ logsumexp(y_m) - y_m[w_m] ]                 (one-hot targets)
//   bce: mean_m sum_i [ max(y,0) - y*h + log(1 + exp(-|y|)) ]  (multi-label)
//
// The bce form is the per-channel logistic loss -[h log s(y) + (1-h) log(1-s(y))]
// rewritten so it never evaluates log(0) or exp of a large positive number.

#include <cmath>
#include <span>
#include <vector>

#include "cuimlm/errors.hpp"
#include "cuimlm/tensor.hpp"
#include "cuimlm/tokenizer.hpp"

namespace cuimlm {

namespace detail {

inline double log_sum_exp(std::span<const double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  long double s = 0.0L;
  for (double v : row) s += std::exp(v - mx);
  return mx + static_cast<double>(std::log(s));
}

inline double logistic_loss(double y, double h) {
  return std::max(y, 0.0) - y * h + std::log1p(std::exp(-std::abs(y)));
}

inline void check_targets(const Tensor& logits, const TargetMatrix& targets, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) != targets.rows() || logits.dim(1) != targets.width())
    throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) + " vs targets [" +
                     std::to_string(targets.rows()) + ", " + std::to_string(targets.width()) + "]");
  if (targets.rows() == 0) throw DataError(std::string(op) + ": no masked positions");
}

}  // namespace detail

/// Target id of each one-hot row; throws if a row is not one-hot.
inline std::vector<std::size_t> one_hot_ids(const TargetMatrix& targets) {
  std::vector<std::size_t> ids;
  ids.reserve(targets.rows());
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    auto set = targets.set_ids(r);
    if (set.size() != 1)
      throw DataError("cross-entropy target row " + std::to_string(r) + " has " + std::to_string(set.size()) +
                      " set bits, expected exactly one");
    ids.push_back(set[0]);
  }
  return ids;
}

inline double ce_loss(const Tensor& logits, std::span<const std::size_t> target_ids) {
  if (logits.rank() != 2 || logits.dim(0) != target_ids.size())
    throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(target_ids.size()) +
                     " targets");
  if (target_ids.empty()) throw DataError("ce_loss: no masked positions");
  long double total = 0.0L;
  for (std::size_t r = 0; r < target_ids.size(); ++r) {
    if (target_ids[r] >= logits.dim(1)) throw DataError("ce_loss: target id out of range");
    total += detail::log_sum_exp(logits.row(r)) - logits.at(r, target_ids[r]);
  }
  return static_cast<double>(total / static_cast<long double>(target_ids.size()));
}

inline double ce_loss(const Tensor& logits, const TargetMatrix& targets) {
  detail::check_targets(logits, targets, "ce_loss");
  const auto ids = one_hot_ids(targets);
  return ce_loss(logits, ids);
}

inline double bce_loss(const Tensor& logits, const TargetMatrix& targets) {
  detail::check_targets(logits, targets, "bce_loss");
  long double total = 0.0L;
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    auto h = targets.row(r);
    bool any = false;
    for (std::size_t c = 0; c < h.size(); ++c) {
      any = any || h[c] != 0;
      total += detail::logistic_loss(logits.at(r, c), h[c] ? 1.0 : 0.0);
    }
    if (!any) throw DataError("bce_loss: target row " + std::to_string(r) + " is empty");
  }
  return static_cast<double>(total / static_cast<long double>(targets.rows()));
}

/// Tape version of ce_loss; gradient (softmax - onehot) / M.
inline Var cross_entropy(Var logits, std::vector<std::size_t> target_ids) {
  const double loss = ce_loss(logits.value(), target_ids);
  return logits.tape->record(Tensor::scalar(loss), {logits}, [logits, ids = std::move(target_ids)](Tape& tape, const Tensor& g) {
    const Tensor& Y = logits.value();
    Tensor* gy = tape.grad_of(logits);
    const double w = g[0] / static_cast<double>(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const double lse = detail::log_sum_exp(Y.row(r));
      for (std::size_t c = 0; c < Y.cols(); ++c) gy->at(r, c) += w * std::exp(Y.at(r, c) - lse);
      gy->at(r, ids[r]) -= w;
    }
  });
}

inline Var cross_entropy(Var logits, const TargetMatrix& targets) {
  detail::check_targets(logits.value(), targets, "ce_loss");
  return cross_entropy(logits, one_hot_ids(targets));
}

/// Tape version of bce_loss; gradient (sigmoid(y) - h) / M.
inline Var binary_cross_entropy(Var logits, const TargetMatrix& targets) {
  const double loss = bce_loss(logits.value(), targets);
  return logits.tape->record(Tensor::scalar(loss), {logits}, [logits, targets](Tape& tape, const Tensor& g) {
    const Tensor& Y = logits.value();
    Tensor* gy = tape.grad_of(logits);
    const double w = g[0] / static_cast<double>(targets.rows());
    for (std::size_t r = 0; r < targets.rows(); ++r) {
      auto h = targets.row(r);
      for (std::size_t c = 0; c < Y.cols(); ++c)
        gy->at(r, c) += w * (stable_sigmoid(Y.at(r, c)) - (h[c] ? 1.0 : 0.0));
    }
  });
}

}  // namespace cuimlm
