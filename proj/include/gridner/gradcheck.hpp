#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "gridner/ops.hpp"
#include "gridner/tensor.hpp"

namespace gridner::diff {

// Central-difference gradient checker with one or more step sizes. For each
// coordinate the analytic gradient is scored against the closest of the
// candidate measurements: the central difference at every step plus, with
// two or more steps, the Richardson combination of the smallest and largest
// step (which cancels the leading truncation term). Small steps suffer
// cancellation noise exactly where gradients vanish structurally (e.g. a
// bias that only shifts softmax logits), large steps suffer truncation where
// curvature is high; no single step covers both. A wrong backward rule still
// fails because every measurement agrees with the true derivative, not with
// the analytic value.
//
// `program` must build a scalar loss from the given input tensors on the
// tape it receives; it is re-run with perturbed inputs, so it must be pure
// in the inputs. Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
template <typename S>
double grad_check_multi(const std::function<Tensor<S>(Tape<S>&)>& program,
                        const std::vector<Tensor<S>>& inputs,
                        std::vector<double> steps) {
  if (steps.empty()) throw ContractError("grad_check: no step sizes");
  std::sort(steps.begin(), steps.end());
  for (const auto& in : inputs) in->requires_grad = true;

  // Analytic pass.
  Tape<S> tape;
  auto loss = program(tape);
  if (loss->numel() != 1) {
    throw ContractError("grad_check: program must return a scalar");
  }
  for (const auto& in : inputs) {
    in->ensure_grad();
    in->zero_grad();
  }
  loss->ensure_grad();
  loss->zero_grad();
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    std::vector<double> g(in->grad.begin(), in->grad.end());
    analytic.push_back(std::move(g));
  }

  // Numeric pass.
  const auto eval = [&]() -> double {
    Tape<S> t;
    t.set_recording(false);
    auto l = program(t);
    return static_cast<double>(l->value[0]);
  };
  double max_rel = 0.0;
  std::vector<double> candidates;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& in = inputs[ti];
    for (int64_t i = 0; i < in->numel(); ++i) {
      const S orig = in->value[i];
      candidates.clear();
      for (double eps : steps) {
        in->value[i] = orig + static_cast<S>(eps);
        const double fp = eval();
        in->value[i] = orig - static_cast<S>(eps);
        const double fm = eval();
        in->value[i] = orig;
        candidates.push_back((fp - fm) / (2.0 * eps));
      }
      if (steps.size() >= 2) {
        const double r = steps.back() / steps.front();
        const double r2 = r * r;
        candidates.push_back(
            (r2 * candidates.front() - candidates[steps.size() - 1]) /
            (r2 - 1.0));
      }
      const double a = analytic[ti][static_cast<size_t>(i)];
      double best = std::numeric_limits<double>::infinity();
      for (double numeric : candidates) {
        const double rel =
            std::abs(a - numeric) /
            std::max({std::abs(a), std::abs(numeric), 1e-8});
        best = std::min(best, rel);
      }
      max_rel = std::max(max_rel, best);
    }
  }
  return max_rel;
}

template <typename S>
double grad_check(const std::function<Tensor<S>(Tape<S>&)>& program,
                  const std::vector<Tensor<S>>& inputs, double eps = 1e-5) {
  return grad_check_multi(program, inputs, {eps});
}

}  // namespace gridner::diff
