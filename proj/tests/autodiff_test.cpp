#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/gradcheck.hpp"
#include "tgcnn/optimizer.hpp"

using namespace tgcnn;
using namespace tgcnn::ad;

namespace {

Array random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (auto& x : a.data) x = rng.uniform(lo, hi);
  return a;
}

/// Builds a loss for one op: sum(op(inputs) * R) with a fixed random weighting R.
using OpBody = std::function<Var(Tape&, std::map<std::string, Var>&)>;

LossFn weighted_loss(OpBody body, std::uint64_t seed) {
  return [body, seed](const ParameterMap& params, ParameterMap* grads) {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, value] : params) vars[name] = tape.variable(value);
    Var out = body(tape, vars);
    Rng rng(seed);
    Array weights(tape.value(out).shape);
    for (auto& w : weights.data) w = rng.uniform(-1.0, 1.0);
    Var loss = sum(mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const auto& [name, v] : vars) (*grads)[name] = tape.gradient(v);
    }
    return tape.value(loss)[0];
  };
}

/// Dense reference of the sparse convolution, written directly from the definition.
Array dense_conv(const Array& w, const SparseBatch& sb, const std::vector<double>& values, int stride) {
  const int F = static_cast<int>(w.shape[0]), V = sb.V, d = static_cast<int>(w.shape[3]);
  const int L = (sb.K - d) / stride + 1;
  std::vector<double> dense(static_cast<std::size_t>(sb.batch) * V * V * sb.K, 0.0);
  auto didx = [&](int b, int i, int j, int k) { return ((static_cast<std::size_t>(b) * V + i) * V + j) * sb.K + k; };
  for (std::size_t e = 0; e < sb.entries.size(); ++e) {
    const auto& en = sb.entries[e];
    dense[didx(en.sample, en.i, en.j, en.k)] += values[e];
  }
  Array out = Array::matrix(F, static_cast<std::size_t>(L) * sb.batch);
  for (int f = 0; f < F; ++f)
    for (int l = 0; l < L; ++l)
      for (int b = 0; b < sb.batch; ++b) {
        double acc = 0.0;
        for (int i = 0; i < V; ++i)
          for (int j = 0; j < V; ++j)
            for (int s = 0; s < d; ++s)
              acc += w.data[((static_cast<std::size_t>(f) * V + i) * V + j) * d + s] * dense[didx(b, i, j, l * stride + s)];
        out.at(f, static_cast<std::size_t>(l) * sb.batch + b) = acc;
      }
  return out;
}

std::shared_ptr<SparseBatch> random_structure(Rng& rng, int V, int K, int batch, int nnz_per_sample) {
  auto sb = std::make_shared<SparseBatch>();
  sb->V = V;
  sb->K = K;
  sb->batch = batch;
  for (int b = 0; b < batch; ++b) {
    std::set<std::tuple<int, int, int>> seen;
    for (int n = 0; n < nnz_per_sample; ++n) {
      const int k = static_cast<int>(rng.uniform_int(0, K - 1));
      const int i = static_cast<int>(rng.uniform_int(0, V - 1));
      const int j = static_cast<int>(rng.uniform_int(0, V - 1));
      if (seen.insert({k, i, j}).second) sb->entries.push_back({i, j, k, b});
    }
  }
  return sb;
}

}  // namespace

TEST(Backward, SumGivesAllOnes) {
  Tape tape;
  Var w = tape.variable(Array({3, 1}, std::vector<double>{1.0, -2.0, 5.0}));
  Var loss = sum(w);
  tape.backward(loss);
  EXPECT_EQ(tape.gradient(w).data, (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Backward, ProductRule) {
  Tape tape;
  Var w = tape.variable(Array::scalar(2.0));
  Var x = tape.variable(Array::scalar(3.0));
  Var loss = matmul(w, x);
  tape.backward(loss);
  EXPECT_EQ(tape.value(loss)[0], 6.0);
  EXPECT_EQ(tape.gradient(w)[0], 3.0);
  EXPECT_EQ(tape.gradient(x)[0], 2.0);
}

TEST(Backward, UnreachedParametersGetZeroGradient) {
  Tape tape;
  Var a = tape.variable(Array::scalar(2.0));
  Var b = tape.variable(Array({2, 1}, 4.0));
  tape.backward(scale(a, 3.0));
  EXPECT_EQ(tape.gradient(a)[0], 3.0);
  EXPECT_EQ(tape.gradient(b).data, (std::vector<double>{0.0, 0.0}));
}

TEST(Backward, RejectsNonScalarLossAndForeignParents) {
  Tape tape;
  Var a = tape.variable(Array({2, 1}, 1.0));
  EXPECT_THROW(tape.backward(a), InternalError);
  EXPECT_THROW(tape.push(Array::scalar(0.0), {5}, nullptr, "bogus"), InternalError);
  Tape other;
  Var b = other.variable(Array({2, 1}, 1.0));
  EXPECT_THROW(add(a, b), InternalError);
}

TEST(Backward, IsLinearInTheLoss) {
  Rng rng(4);
  const Array w0 = random_array({3, 4}, rng);
  const Array x0 = random_array({4, 2}, rng);
  auto grads = [&](double a, double b) {
    Tape tape;
    Var w = tape.variable(w0);
    Var x = tape.constant(x0);
    Var h = tanh(matmul(w, x));
    Var l1 = sum(mul(h, h));
    Var l2 = l1_norm(sigmoid(h));
    tape.backward(add(scale(l1, a), scale(l2, b)));
    return tape.gradient(w);
  };
  const Array g1 = grads(1.0, 0.0), g2 = grads(0.0, 1.0), mix = grads(2.5, -0.75);
  for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_NEAR(mix[i], 2.5 * g1[i] - 0.75 * g2[i], 1e-12);
}

TEST(Registry, ListsExactlyTheModelOps) {
  const std::set<std::string> expected{"sparse_conv3d", "exp",      "negate",  "scale",   "matmul",  "add",
                                       "add_bias",      "sigmoid",  "tanh",    "leaky_relu", "mul", "concat",
                                       "slice",         "batch_norm", "dropout", "softplus", "sum", "l1_norm",
                                       "l2_norm",       "graph_regulariser", "binary_cross_entropy"};
  const auto ops = supported_ops();
  EXPECT_EQ(std::set<std::string>(ops.begin(), ops.end()), expected);
  EXPECT_EQ(op_info("matmul").arity, 2);
  EXPECT_THROW(op_info("conv2d"), ConfigError);
}

// Each registered op in isolation against central differences on inputs in [-1, 1].
TEST(Registry, EveryOpMatchesFiniteDifferences) {
  Rng rng(2024);
  auto structure = random_structure(rng, 4, 6, 2, 7);
  std::map<std::string, std::pair<ParameterMap, OpBody>> cases;
  cases["sparse_conv3d"] = {{{"w", random_array({3, 4, 4, 2}, rng)}, {"v", random_array({structure->entries.size(), 1}, rng)}},
                            [structure](Tape&, auto& v) { return sparse_conv3d(v["w"], v["v"], structure, 2); }};
  cases["exp"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return exp(v["x"]); }};
  cases["negate"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return negate(v["x"]); }};
  cases["scale"] = {{{"x", random_array({3, 2}, rng)}, {"s", random_array({1, 1}, rng)}},
                    [](Tape&, auto& v) { return add(scale(v["x"], v["s"]), scale(v["x"], 0.3)); }};
  cases["matmul"] = {{{"a", random_array({3, 4}, rng)}, {"b", random_array({4, 2}, rng)}}, [](Tape&, auto& v) { return matmul(v["a"], v["b"]); }};
  cases["add"] = {{{"a", random_array({3, 2}, rng)}, {"b", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return add(v["a"], v["b"]); }};
  cases["add_bias"] = {{{"x", random_array({3, 4}, rng)}, {"b", random_array({3, 1}, rng)}}, [](Tape&, auto& v) { return add_bias(v["x"], v["b"]); }};
  cases["sigmoid"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return sigmoid(v["x"]); }};
  cases["tanh"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return tanh(v["x"]); }};
  cases["leaky_relu"] = {{{"x", random_array({3, 3}, rng)}}, [](Tape&, auto& v) { return leaky_relu(v["x"], 0.01); }};
  cases["mul"] = {{{"a", random_array({3, 2}, rng)}, {"b", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return mul(v["a"], v["b"]); }};
  cases["concat"] = {{{"a", random_array({2, 3}, rng)}, {"b", random_array({1, 3}, rng)}}, [](Tape&, auto& v) { return concat({v["a"], v["b"], v["a"]}); }};
  cases["slice"] = {{{"x", random_array({5, 5}, rng)}},
                    [](Tape&, auto& v) { return matmul(slice(v["x"], Axis::rows, 1, 3), slice(v["x"], Axis::cols, 1, 3)); }};
  cases["batch_norm"] = {{{"x", random_array({3, 6}, rng)}, {"g", random_array({3, 1}, rng)}, {"b", random_array({3, 1}, rng)}},
                         [](Tape&, auto& v) { return batch_norm(v["x"], v["g"], v["b"], Mode::train); }};
  cases["dropout"] = {{{"x", random_array({4, 4}, rng)}}, [](Tape&, auto& v) {
                        Rng mask(9);  // same mask on every evaluation
                        return dropout(v["x"], 0.4, Mode::train, mask);
                      }};
  cases["softplus"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return softplus(v["x"]); }};
  cases["sum"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return sum(v["x"]); }};
  cases["l1_norm"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return l1_norm(v["x"]); }};
  cases["l2_norm"] = {{{"x", random_array({3, 2}, rng)}}, [](Tape&, auto& v) { return l2_norm(v["x"]); }};
  cases["graph_regulariser"] = {{{"w", random_array({2, 3, 3, 3}, rng)}}, [](Tape&, auto& v) { return graph_regulariser(v["w"]); }};
  cases["binary_cross_entropy"] = {{{"z", random_array({1, 5}, rng, -2.0, 2.0)}},
                                   [](Tape&, auto& v) { return binary_cross_entropy(v["z"], {1, 0, 0, 1, 1}); }};

  for (const auto& name : supported_ops()) {
    ASSERT_TRUE(cases.count(name)) << "no finite-difference case for op " << name;
    const auto& [params, body] = cases.at(name);
    const auto report = finite_difference_check(weighted_loss(body, 17), params);
    EXPECT_LT(report.max_rel_error, 1e-4) << name;
    EXPECT_GT(report.elements_checked, 0u) << name;
  }
}

TEST(SparseConv, MatchesDenseConvolutionOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int V = static_cast<int>(rng.uniform_int(1, 6));
    const int K = static_cast<int>(rng.uniform_int(1, 10));
    const int d = static_cast<int>(rng.uniform_int(1, std::min(3, K)));
    const int F = static_cast<int>(rng.uniform_int(1, 4));
    const int stride = static_cast<int>(rng.uniform_int(1, 2));
    auto sb = random_structure(rng, V, K, 3, static_cast<int>(rng.uniform_int(0, 12)));
    const Array w = random_array({static_cast<std::size_t>(F), static_cast<std::size_t>(V), static_cast<std::size_t>(V), static_cast<std::size_t>(d)}, rng);
    const Array vals = random_array({sb->entries.size(), 1}, rng);
    Tape tape;
    Var out = sparse_conv3d(tape.constant(w), tape.constant(vals), sb, stride);
    const Array expected = dense_conv(w, *sb, vals.data, stride);
    ASSERT_EQ(tape.value(out).shape, expected.shape);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(tape.value(out)[i], expected[i], 1e-10);
  }
}

TEST(SparseConv, EmptyTensorGivesZeros) {
  auto sb = std::make_shared<SparseBatch>(SparseBatch{3, 5, 1, {}});
  Tape tape;
  Var out = sparse_conv3d(tape.constant(Array({2, 3, 3, 2}, 1.0)), tape.constant(Array({0, 1})), sb, 1);
  EXPECT_EQ(tape.value(out).shape, (std::vector<std::size_t>{2, 4}));
  for (double v : tape.value(out).data) EXPECT_EQ(v, 0.0);
}

TEST(SparseConv, ValueGradientReachesTimeScale) {
  // d/dg sum(conv(W, exp(-g t))) checked against central differences.
  Rng rng(3);
  auto sb = random_structure(rng, 3, 5, 2, 6);
  const Array w = random_array({2, 3, 3, 2}, rng);
  Array t({sb->entries.size(), 1});
  for (auto& x : t.data) x = rng.uniform(0.0, 4.0);
  auto body = [&](Tape& tape, auto& v) { return sparse_conv3d(tape.constant(w), exp(negate(scale(tape.constant(t), v["g"]))), sb, 1); };
  const auto report = finite_difference_check(weighted_loss(body, 5), {{"g", Array::scalar(0.7)}});
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(BatchNorm, InferenceUsesRunningMoments) {
  Array mean({2, 1}, std::vector<double>{1.0, -1.0});
  Array var({2, 1}, std::vector<double>{4.0, 1.0});
  Tape tape;
  Var x = tape.constant(Array({2, 1}, std::vector<double>{3.0, 0.0}));
  Var y = batch_norm(x, tape.constant(Array({2, 1}, 1.0)), tape.constant(Array({2, 1}, 0.0)), Mode::infer, {&mean, &var});
  EXPECT_NEAR(tape.value(y)[0], 2.0 / std::sqrt(4.0 + kBatchNormEps), 1e-12);
  EXPECT_NEAR(tape.value(y)[1], 1.0 / std::sqrt(1.0 + kBatchNormEps), 1e-12);
}

TEST(Dropout, InferenceIsIdentity) {
  Rng rng(1);
  Tape tape;
  const Array x0 = random_array({5, 5}, rng);
  Var y = dropout(tape.constant(x0), 0.5, Mode::infer, rng);
  EXPECT_EQ(tape.value(y), x0);
}

TEST(GradCheck, QuadraticIsExactToRounding) {
  LossFn quad = [](const ParameterMap& p, ParameterMap* g) {
    const auto& x = p.at("x");
    double f = 0.0;
    Array gx(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      f += 0.5 * (i + 1.0) * x[i] * x[i] + x[i];
      gx[i] = (i + 1.0) * x[i] + 1.0;
    }
    if (g) (*g)["x"] = gx;
    return f;
  };
  const auto report = finite_difference_check(quad, {{"x", Array({4, 1}, std::vector<double>{0.3, -1.2, 2.0, 0.7})}});
  EXPECT_LT(report.max_rel_error, 1e-8);
  EXPECT_EQ(report.elements_checked, 4u);
}

TEST(GradCheck, DetectsCorruptedGradient) {
  LossFn corrupted = [](const ParameterMap& p, ParameterMap* g) {
    const auto& x = p.at("x");
    double f = 0.0;
    Array gx(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      f += std::sin(x[i]);
      gx[i] = std::cos(x[i]) * (i == 1 ? 1.1 : 1.0);
    }
    if (g) (*g)["x"] = gx;
    return f;
  };
  const auto report = finite_difference_check(corrupted, {{"x", Array({3, 1}, std::vector<double>{0.1, 0.2, 0.3})}});
  EXPECT_GT(report.max_rel_error, 1e-2);
  EXPECT_LT(report.per_parameter.at("x"), 1.0);
}

TEST(GradCheck, SamplesLargeArrays) {
  LossFn lin = [](const ParameterMap& p, ParameterMap* g) {
    double f = 0.0;
    for (double v : p.at("x").data) f += v;
    if (g) (*g)["x"] = Array(p.at("x").shape, 1.0);
    return f;
  };
  const auto report = finite_difference_check(lin, {{"x", Array({1000, 1}, 0.5)}}, {.max_elements_per_array = 150, .only = {}});
  EXPECT_EQ(report.elements_checked, 150u);
  EXPECT_THROW(finite_difference_check(lin, {{"x", Array({3, 1}, 0.5)}}, {.max_elements_per_array = 50, .only = {}}), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterMap params{{"w", Array({3, 1}, std::vector<double>{0.0, 1.0, -2.0})}};
  ParameterMap grads{{"w", Array({3, 1}, 1.0)}};
  OptimizerState state;
  adam_step(params, grads, state, {.lr = 1e-3});
  EXPECT_EQ(state.step, 1);
  EXPECT_NEAR(params["w"][0], -1e-3, 1e-6);
  EXPECT_NEAR(params["w"][1], 1.0 - 1e-3, 1e-6);
  EXPECT_NEAR(params["w"][2], -2.0 - 1e-3, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterMap params{{"w", Array({2, 1}, std::vector<double>{0.25, -4.0})}};
  const auto before = params;
  OptimizerState state;
  adam_step(params, {{"w", Array({2, 1}, 0.0)}}, state);
  EXPECT_EQ(params, before);
}

TEST(Adam, TwoStepsFollowTheRecurrence) {
  // Hand evaluation with g = 1 twice, lr = 0.1:
  //   m1 = 0.1, v1 = 0.001, m^ = 1, v^ = 1      -> step 0.1 / (1 + 1e-8)
  //   m2 = 0.19, v2 = 0.001999, m^ = 0.19/0.19 = 1, v^ = 0.001999/0.001999 = 1 -> same step
  ParameterMap params{{"w", Array::scalar(1.0)}};
  OptimizerState state;
  const AdamOptions opt{.lr = 0.1};
  adam_step(params, {{"w", Array::scalar(1.0)}}, state, opt);
  EXPECT_NEAR(params["w"][0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  adam_step(params, {{"w", Array::scalar(1.0)}}, state, opt);
  EXPECT_NEAR(params["w"][0], 1.0 - 2.0 * 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(state.first_moment["w"][0], 0.19, 1e-15);
  EXPECT_NEAR(state.second_moment["w"][0], 0.001999, 1e-15);
  EXPECT_EQ(state.step, 2);

  // g = 1 then g = 3: m2 = 0.9*0.1 + 0.1*3 = 0.39, v2 = 0.999*0.001 + 0.001*9 = 0.009999
  ParameterMap p2{{"w", Array::scalar(0.0)}};
  OptimizerState s2;
  adam_step(p2, {{"w", Array::scalar(1.0)}}, s2, opt);
  adam_step(p2, {{"w", Array::scalar(3.0)}}, s2, opt);
  const double mhat = 0.39 / (1.0 - 0.81), vhat = 0.009999 / (1.0 - 0.998001);
  EXPECT_NEAR(p2["w"][0], -0.1 / (1.0 + 1e-8) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
}
