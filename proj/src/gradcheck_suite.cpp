#include "gridner/gradcheck_suite.hpp"

#include <functional>

#include "gridner/gradcheck.hpp"
#include "gridner/model.hpp"
#include "gridner/ops.hpp"

namespace gridner::diff {

namespace {

using T = Tensor<double>;
using TapeD = Tape<double>;

constexpr double kOpTol = 1e-5;
constexpr double kEndToEndTol = 1e-4;

struct Check {
  std::string name;
  double threshold;
  std::function<double(Rng&)> run;
};

T rnd(Shape shape, Rng& rng) {
  return uniform<double>(std::move(shape), -1.0, 1.0, rng, true);
}

std::vector<Check> build_checks() {
  std::vector<Check> checks;
  const auto add_check = [&](std::string name, double tol,
                             std::function<double(Rng&)> fn) {
    checks.push_back({std::move(name), tol, std::move(fn)});
  };

  add_check("matmul", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({4, 2}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, matmul(t, a, b)); }, {a, b});
  });
  add_check("add", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({3, 4}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, add(t, a, b)); }, {a, b});
  });
  add_check("add_bias", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({4}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, add(t, a, b)); }, {a, b});
  });
  add_check("mul", kOpTol, [](Rng& rng) {
    auto a = rnd({2, 5}, rng);
    auto b = rnd({2, 5}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, mul(t, a, b), b));
        },
        {a, b});
  });
  add_check("scale", kOpTol, [](Rng& rng) {
    auto a = rnd({7}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, scale(t, a, -2.5)); }, {a});
  });
  add_check("concat", kOpTol, [](Rng& rng) {
    auto a = rnd({2, 3}, rng);
    auto b = rnd({2, 2}, rng);
    auto w = rnd({2, 5}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, concat(t, {a, b}, 1), w));
        },
        {a, b, w});
  });
  add_check("slice", kOpTol, [](Rng& rng) {
    auto a = rnd({4, 5}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          auto s = slice(t, a, 1, 1, 3);
          return reduce_sum(t, mul(t, s, s));
        },
        {a});
  });
  add_check("reshape", kOpTol, [](Rng& rng) {
    auto a = rnd({2, 6}, rng);
    auto b = rnd({3, 4}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, reshape(t, a, {3, 4}), b));
        },
        {a, b});
  });
  add_check("permute", kOpTol, [](Rng& rng) {
    auto a = rnd({2, 3, 4}, rng);
    auto b = rnd({4, 2, 3}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, permute(t, a, {2, 0, 1}), b));
        },
        {a, b});
  });
  add_check("softmax", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 5}, rng);
    auto w = rnd({3, 5}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, softmax(t, a, 1), w));
        },
        {a, w});
  });
  add_check("gelu", kOpTol, [](Rng& rng) {
    auto a = rnd({11}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, gelu(t, a)); }, {a});
  });
  add_check("sigmoid", kOpTol, [](Rng& rng) {
    auto a = rnd({9}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, mul(t, sigmoid(t, a), a)); }, {a});
  });
  add_check("tanh", kOpTol, [](Rng& rng) {
    auto a = rnd({9}, rng);
    return grad_check<double>(
        [&](TapeD& t) { return reduce_sum(t, mul(t, tanh_op(t, a), a)); }, {a});
  });
  add_check("layer_norm", kOpTol, [](Rng& rng) {
    auto x = rnd({3, 6}, rng);
    auto g = rnd({6}, rng);
    auto b = rnd({6}, rng);
    auto w = rnd({3, 6}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, layer_norm(t, x, g, b), w));
        },
        {x, g, b, w});
  });
  add_check("embedding_lookup", kOpTol, [](Rng& rng) {
    auto table = rnd({5, 3}, rng);
    const std::vector<int64_t> ids = {0, 3, 3, 1};  // duplicates accumulate
    auto w = rnd({4, 3}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, embedding_lookup(t, table, ids, {4}), w));
        },
        {table, w});
  });
  add_check("bilinear", kOpTol, [](Rng& rng) {
    auto x = rnd({4}, rng);
    auto u = rnd({4, 3, 5}, rng);
    auto z = rnd({5}, rng);
    auto w = rnd({3}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, bilinear(t, x, u, z), w));
        },
        {x, u, z, w});
  });
  add_check("pairwise_bilinear", kOpTol, [](Rng& rng) {
    auto xs = rnd({3, 4}, rng);
    auto u = rnd({4, 2, 3}, rng);
    auto xe = rnd({3, 3}, rng);
    auto w = rnd({3, 3, 2}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, pairwise_bilinear(t, xs, u, xe), w));
        },
        {xs, u, xe, w});
  });
  add_check("pair_outer_add", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({3, 4}, rng);
    auto bias = rnd({4}, rng);
    auto w = rnd({3, 3, 4}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, pair_outer_add(t, a, b, bias), w));
        },
        {a, b, bias, w});
  });
  add_check("pair_affine", kOpTol, [](Rng& rng) {
    auto ln = rnd({3, 4}, rng);
    auto g = rnd({3, 4}, rng);
    auto b = rnd({3, 4}, rng);
    auto w = rnd({3, 3, 4}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, pair_affine(t, ln, g, b), w));
        },
        {ln, g, b, w});
  });
  for (int dil = 1; dil <= 3; ++dil) {
    add_check("conv2d_dilated_d" + std::to_string(dil), kOpTol, [dil](Rng& rng) {
      auto in = rnd({5, 5, 2}, rng);
      auto k = rnd({3, 3, 2, 3}, rng);
      auto b = rnd({3}, rng);
      auto w = rnd({5, 5, 3}, rng);
      return grad_check<double>(
          [&](TapeD& t) {
            return reduce_sum(t, mul(t, conv2d_dilated(t, in, k, dil, b), w));
          },
          {in, k, b, w});
    });
  }
  add_check("weighted_sum", kOpTol, [](Rng& rng) {
    auto a = rnd({3, 4}, rng);
    auto b = rnd({3, 4}, rng);
    auto c = rnd({3, 4}, rng);
    auto w = rnd({3}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, weighted_sum(t, {a, b, c}, w));
        },
        {a, b, c, w});
  });
  add_check("masked_cross_entropy", kOpTol, [](Rng& rng) {
    auto probs = uniform<double>({2, 2, 4}, 0.1, 0.9, rng, true);
    const std::vector<int32_t> labels = {1, 0, 3, 2};
    const std::vector<uint8_t> mask = {1, 0, 1, 1};
    return grad_check<double>(
        [&](TapeD& t) {
          return masked_cross_entropy(t, probs, labels, mask);
        },
        {probs});
  });
  add_check("bilstm", kOpTol, [](Rng& rng) {
    auto seq = rnd({3, 2}, rng);
    BiLstmParams<double> p;
    p.fwd = {rnd({2, 8}, rng), rnd({2, 8}, rng), rnd({8}, rng)};
    p.bwd = {rnd({2, 8}, rng), rnd({2, 8}, rng), rnd({8}, rng)};
    auto w = rnd({3, 4}, rng);
    return grad_check<double>(
        [&](TapeD& t) {
          return reduce_sum(t, mul(t, bilstm(t, seq, p), w));
        },
        {seq, p.fwd.w_ih, p.fwd.w_hh, p.fwd.b, p.bwd.w_ih, p.bwd.w_hh, p.bwd.b,
         w});
  });
  add_check("model_end_to_end", kEndToEndTol, [](Rng& rng) {
    const auto cfg = make_tiny_model_config();
    const auto inst = make_tiny_instance();
    auto params = nn::init_params<double>(cfg, rng);
    std::vector<T> inputs;
    for (const auto& [name, t] : params.items()) inputs.push_back(t);
    return grad_check_multi<double>(
        [&](TapeD& t) {
          auto grid = nn::forward(t, inst, params, cfg, false, nullptr);
          return nn::loss(t, grid, inst, cfg);
        },
        inputs, {1e-4, 1e-3});
  });
  return checks;
}

}  // namespace

ModelConfig make_tiny_model_config() {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.d_type = 4;
  cfg.d_lstm = 4;
  cfg.d_biaffine = 4;
  cfg.d_h = 6;
  cfg.d_e_d = 4;
  cfg.d_e_t = 4;
  cfg.d_conv_in = 5;
  cfg.d_g = 4;
  cfg.dropout = 0.0;
  cfg.max_len = 16;
  return cfg;
}

data::MrcInstance make_tiny_instance() {
  data::MrcInstance inst;
  inst.type_id = 2;
  // [cls, q, q, sep, c0..c6, sep] -> 12 tokens, context at offset 4
  inst.token_ids = {2, 5, 6, 3, 7, 8, 9, 10, 5, 6, 7, 3};
  inst.context_offset = 4;
  inst.context_len = 7;
  const int64_t n = inst.n();
  inst.label_grid.assign(static_cast<size_t>(n * n), 0);
  inst.loss_mask.assign(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < inst.context_len; ++i) {
    for (int64_t j = i; j < inst.context_len; ++j) {
      inst.loss_mask[static_cast<size_t>((inst.context_offset + i) * n +
                                         inst.context_offset + j)] = 1;
    }
  }
  inst.label_grid[static_cast<size_t>((inst.context_offset + 1) * n +
                                      inst.context_offset + 3)] =
      static_cast<uint8_t>(1 + inst.type_id);
  inst.label_grid[static_cast<size_t>((inst.context_offset + 5) * n +
                                      inst.context_offset + 5)] =
      static_cast<uint8_t>(1 + inst.type_id);
  return inst;
}

std::vector<GradCheckRow> run_gradcheck_suite(uint64_t seed,
                                              const std::string& only,
                                              bool include_model) {
  std::vector<GradCheckRow> rows;
  Rng base(seed);
  for (const auto& check : build_checks()) {
    if (!only.empty() && check.name != only) continue;
    if (!include_model && check.name == "model_end_to_end") continue;
    Rng rng = base.stream(check.name);
    GradCheckRow row;
    row.name = check.name;
    row.threshold = check.threshold;
    row.max_rel_err = check.run(rng);
    row.pass = row.max_rel_err < check.threshold;
    rows.push_back(std::move(row));
  }
  if (rows.empty() && !only.empty()) {
    throw ConfigError("gradcheck: unknown op \"" + only + "\"");
  }
  return rows;
}

}  // namespace gridner::diff
