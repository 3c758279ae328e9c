#include <gtest/gtest.h>

#include <cmath>

#include "emdepart/gradcheck.hpp"
#include "emdepart/param.hpp"
#include "emdepart/rng.hpp"
#include "emdepart/tape.hpp"
#include "emdepart/tensor.hpp"

using namespace emdepart;

TEST(Tensor, ShapeChecks) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({1, 2, 3, 4}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  t.at(1, 2) = 5.0;
  EXPECT_DOUBLE_EQ(t.data[5], 5.0);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2}, {1.0, NAN});
  EXPECT_THROW(t.check_finite("test"), NumericError);
}

TEST(Rng, DeterministicAndRestorable) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_DOUBLE_EQ(a.uniform(), b.uniform());
  std::string state = a.save_state();
  double next = a.normal();
  Rng c(0);
  c.load_state(state);
  EXPECT_DOUBLE_EQ(c.normal(), next);
}

TEST(Rng, IndexInRangeAndShuffleIsPermutation) {
  Rng r(7);
  for (int i = 0; i < 200; ++i) EXPECT_LT(r.index(13), 13u);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  auto sorted = v;
  r.shuffle(v);
  auto resorted = v;
  std::sort(resorted.begin(), resorted.end());
  EXPECT_EQ(resorted, sorted);
}

TEST(ParamStore, DeterministicInitAndErrors) {
  ParamStore s1(123), s2(123);
  auto& w1 = s1.create("w", {3, 4}, Init::xavier());
  auto& w2 = s2.create("w", {3, 4}, Init::xavier());
  EXPECT_EQ(w1.value.data, w2.value.data);
  EXPECT_THROW(s1.create("w", {1}, Init::zeros()), DataError);
  EXPECT_THROW(s1.at("missing"), DataError);
  w1.grad.data[0] = 3.0;
  s1.zero_grads();
  EXPECT_DOUBLE_EQ(w1.grad.data[0], 0.0);
}

TEST(Ops, AffineMatchesHandComputation) {
  Tape t;
  Value x = t.input(Tensor({1, 2}, {1.0, 0.0}));
  Value W = t.input(Tensor({2, 2}, {2.0, 3.0, 4.0, 5.0}));
  Value b = t.input(Tensor({2}, {1.0, 1.0}));
  Value y = affine(t, x, W, b);
  EXPECT_DOUBLE_EQ(y.val().at(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(y.val().at(0, 1), 4.0);
}

TEST(Ops, AffineShapeMismatchNamesBothShapes) {
  Tape t;
  Value x = t.input(Tensor({1, 3}, {1, 2, 3}));
  Value W = t.input(Tensor({2, 2}, {1, 2, 3, 4}));
  Value b = t.input(Tensor({2}, {0, 0}));
  try {
    affine(t, x, W, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
}

TEST(Ops, SoftmaxKnownValuesAndProperties) {
  Tape t;
  Value y = t.softmax(t.input(Tensor({2}, {1.0, 2.0})));
  EXPECT_NEAR(y.val().at(0), 0.26894, 1e-5);
  EXPECT_NEAR(y.val().at(1), 0.73106, 1e-5);

  // rows sum to 1, invariant under constant shifts
  Rng r(5);
  Tensor A({3, 4});
  for (auto& v : A.data) v = r.uniform(-5, 5);
  Tensor B = A;
  for (auto& v : B.data) v += 100.0;
  Tape t2;
  Value ya = t2.softmax(t2.input(A), 1);
  Value yb = t2.softmax(t2.input(B), 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      s += ya.val().at(i, j);
      EXPECT_NEAR(ya.val().at(i, j), yb.val().at(i, j), 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, SoftmaxAxis0NormalizesColumns) {
  Tape t;
  Value y = t.softmax(t.input(Tensor({2, 2}, {0.0, 5.0, 0.0, -5.0})), 0);
  for (std::size_t j = 0; j < 2; ++j)
    EXPECT_NEAR(y.val().at(0, j) + y.val().at(1, j), 1.0, 1e-12);
}

TEST(Ops, GeluKnownValues) {
  Tape t;
  Value y = t.gelu(t.input(Tensor({3}, {1.0, 0.0, -10.0})));
  EXPECT_NEAR(y.val().at(0), 0.8412, 1e-4);
  EXPECT_DOUBLE_EQ(y.val().at(1), 0.0);
  EXPECT_NEAR(y.val().at(2), 0.0, 1e-6);
}

TEST(Ops, LayerNormKnownValuesAndZeroVarianceRow) {
  Tape t;
  Value gain = t.input(Tensor({2}, {1.0, 1.0}));
  Value bias = t.input(Tensor({2}, {0.0, 0.0}));
  Value y = t.layer_norm(t.input(Tensor({1, 2}, {-1.0, 1.0})), gain, bias, 1e-5);
  EXPECT_NEAR(y.val().at(0, 0), -1.0, 1e-4);
  EXPECT_NEAR(y.val().at(0, 1), 1.0, 1e-4);

  Tape t2;
  Value g3 = t2.input(Tensor({3}, {1.0, 1.0, 1.0}));
  Value b3 = t2.input(Tensor({3}, {0.5, 0.5, 0.5}));
  Value z = t2.layer_norm(t2.input(Tensor({1, 3}, {2.0, 2.0, 2.0})), g3, b3, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(z.val().at(0, j), 0.5, 1e-12);
}

TEST(Ops, DropoutModes) {
  Rng rng(9);
  Tape t;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  // rate 0 and eval mode are exact identities
  EXPECT_EQ(t.dropout(t.input(x), 0.0, rng, true).val().data, x.data);
  EXPECT_EQ(t.dropout(t.input(x), 0.5, rng, false).val().data, x.data);
  // training: survivors scale by 1/(1-rate)
  Value y = t.dropout(t.input(x), 0.5, rng, true);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double v = y.val().data[i];
    EXPECT_TRUE(v == 0.0 || std::fabs(v - 2.0 * x.data[i]) < 1e-12) << v;
  }
  EXPECT_THROW(t.dropout(t.input(x), 1.0, rng, true), DataError);
}

TEST(Ops, ScaledAttentionUniformOverEqualKeys) {
  Tape t;
  Value Q = t.input(Tensor({1, 2}, {3.0, -1.0}));
  Value K = t.input(Tensor({3, 2}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}));
  Value V = t.input(Tensor({3, 2}, {0.0, 3.0, 3.0, 0.0, 3.0, 3.0}));
  AttentionOut a = scaled_attention(t, Q, K, V);
  EXPECT_NEAR(a.out.val().at(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(a.out.val().at(0, 1), 2.0, 1e-12);
  // logits carry the 1/sqrt(d) scaling, pre-softmax
  EXPECT_NEAR(a.logits.val().at(0, 0), (3.0 * 0.5 - 1.0 * 0.5) / std::sqrt(2.0), 1e-12);
}

TEST(Ops, ReluAndSqrtZeroBranchSubgradients) {
  ParamStore store(1);
  auto& w = store.create("w", {3}, Init::zeros());
  w.value.data = {-1.0, 0.0, 2.0};
  auto loss = [&] {
    Tape t;
    Value s = t.sum_all(t.relu(t.param(w)));
    t.backward(s);
    return s.val().at(0);
  };
  store.zero_grads();
  loss();
  EXPECT_DOUBLE_EQ(w.grad.at(0), 0.0);
  EXPECT_DOUBLE_EQ(w.grad.at(1), 0.0);  // kink takes the zero branch
  EXPECT_DOUBLE_EQ(w.grad.at(2), 1.0);

  Tape t2;
  Value z = t2.sqrt_shift(t2.constant(0.0), 0.0);
  t2.backward(z);
  EXPECT_DOUBLE_EQ(z.val().at(0), 0.0);  // grad at exact zero stays finite (zero branch)
}

TEST(Ops, RowL2NormalizeUnitRowsAndZeroRowError) {
  Tape t;
  Value y = t.row_l2_normalize(t.input(Tensor({2, 2}, {3.0, 4.0, 0.0, 2.0})));
  EXPECT_NEAR(y.val().at(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(y.val().at(0, 1), 0.8, 1e-12);
  EXPECT_NEAR(y.val().at(1, 1), 1.0, 1e-12);
  Tape t2;
  EXPECT_THROW(t2.row_l2_normalize(t2.input(Tensor({1, 2}, {0.0, 0.0}))), NumericError);
}

TEST(Ops, LogsumexpMatchesManual) {
  Tape t;
  Tensor A({2, 3}, {1, 2, 3, -1, 0, 1});
  Value lrow = t.logsumexp(t.input(A), 1);
  Value lcol = t.logsumexp(t.input(A), 0);
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += std::exp(A.at(i, j));
    EXPECT_NEAR(lrow.val().at(i), std::log(s), 1e-12);
  }
  for (std::size_t j = 0; j < 3; ++j) {
    double s = std::exp(A.at(0, j)) + std::exp(A.at(1, j));
    EXPECT_NEAR(lcol.val().at(j), std::log(s), 1e-12);
  }
}

// ---- gradients ----

namespace {

// Random-input scalar loss wrapping a single op chain; used to finite-diff
// every primitive the model depends on.
double run_loss(const std::function<Value(Tape&)>& build, bool with_grad) {
  Tape t;
  Value loss = build(t);
  double v = loss.val().at(0);
  if (with_grad) t.backward(loss);
  return v;
}

void expect_gradcheck_ok(ParamStore& store, const std::function<Value(Tape&)>& build,
                         double tol = 1e-6) {
  GradCheckOptions opt;
  opt.tol = tol;
  auto report = finite_diff_check(
      store, [&] { return run_loss(build, true); }, [&] { return run_loss(build, false); }, opt);
  EXPECT_TRUE(report.ok) << report.describe();
}

Tensor random_tensor(Shape s, Rng& r, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = r.uniform(lo, hi);
  return t;
}

}  // namespace

TEST(GradCheck, AffineWeightGradOnRandomCase) {
  Rng r(11);
  ParamStore store(11);
  auto& W = store.create("W", {3, 4}, Init::xavier());
  auto& b = store.create("b", {4}, Init::normal(0.5));
  Tensor x = random_tensor({2, 3}, r);
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value y = affine(t, t.input(x), W, b);
    return t.sum_all(t.mul(y, y));
  });
}

TEST(GradCheck, SoftmaxBothAxes) {
  Rng r(12);
  ParamStore store(12);
  auto& W = store.create("W", {3, 4}, Init::normal(1.0));
  Tensor m = random_tensor({3, 4}, r);
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value s1 = t.softmax(t.param(W), 1);
    Value s0 = t.softmax(t.param(W), 0);
    return t.add(t.sum_all(t.mul(s1, t.input(m))), t.sum_all(t.mul(s0, t.input(m))));
  }, 1e-5);
}

TEST(GradCheck, LayerNormAllInputs) {
  Rng r(13);
  ParamStore store(13);
  auto& X = store.create("X", {4, 5}, Init::normal(1.0));
  auto& g = store.create("g", {5}, Init::ones());
  auto& b = store.create("b", {5}, Init::normal(0.3));
  Tensor m = random_tensor({4, 5}, r);
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value y = t.layer_norm(t.param(X), t.param(g), t.param(b), 1e-5);
    return t.sum_all(t.mul(y, t.input(m)));
  }, 1e-5);
}

TEST(GradCheck, GeluEverywhereIncludingNegatives) {
  ParamStore store(14);
  auto& X = store.create("X", {2, 4}, Init::normal(2.0));
  expect_gradcheck_ok(store, [&](Tape& t) { return t.sum_all(t.gelu(t.param(X))); }, 1e-6);
}

TEST(GradCheck, ScaledAttentionAllThreeInputs) {
  ParamStore store(15);
  auto& Q = store.create("Q", {2, 3}, Init::normal(1.0));
  auto& K = store.create("K", {4, 3}, Init::normal(1.0));
  auto& V = store.create("V", {4, 3}, Init::normal(1.0));
  Rng r(15);
  Tensor m = random_tensor({2, 3}, r);
  expect_gradcheck_ok(store, [&](Tape& t) {
    AttentionOut a = scaled_attention(t, t.param(Q), t.param(K), t.param(V));
    // touch both outputs so logits gradients flow too
    return t.add(t.sum_all(t.mul(a.out, t.input(m))), t.scale(t.sum_all(t.mul(a.logits, a.logits)), 0.1));
  }, 1e-5);
}

TEST(GradCheck, ReductionsSlicesAndStacking) {
  Rng r(16);
  ParamStore store(16);
  auto& X = store.create("X", {4, 3}, Init::normal(1.0));
  Tensor m3 = random_tensor({3}, r);
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value x = t.param(X);
    Value cm = t.reduce_mean(x, 0);
    Value rm = t.reduce_mean(x, 1);
    Value mx = t.reduce_max(x, 0);
    Value sl = t.row_slice(x, 1, 3);
    Value cat = t.concat_rows(sl, t.repeat_row(cm, 2));
    Value parts = t.stack_scalars({t.sum_all(cat), t.mean_all(rm), t.dot(mx, t.input(m3)),
                                   t.index(t.row(x, 2), 1)});
    return t.logsumexp(parts, 1);
  }, 1e-5);
}

TEST(GradCheck, NormalizeLseChain) {
  ParamStore store(17);
  auto& X = store.create("X", {3, 4}, Init::normal(1.0));
  auto& Y = store.create("Y", {3, 4}, Init::normal(1.0));
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value C = t.matmul_nt(t.row_l2_normalize(t.param(X)), t.row_l2_normalize(t.param(Y)));
    Value a = t.sum_all(t.logsumexp(C, 1));
    Value b = t.sum_all(t.logsumexp(C, 0));
    return t.scale(t.add(a, b), 0.5);
  }, 1e-5);
}

TEST(GradCheck, HingeChainWithSqrtShift) {
  ParamStore store(18);
  auto& X = store.create("X", {3, 5}, Init::normal(0.7));
  expect_gradcheck_ok(store, [&](Tape& t) {
    Value x = t.param(X);
    Value mu = t.reduce_mean(x, 0);
    Value m2 = t.reduce_mean(t.mul(x, x), 0);
    Value var = t.sub(m2, t.mul(mu, mu));
    Value sd = t.sqrt_shift(var, 1e-4);
    return t.sum_all(t.relu(t.rsub_const(sd, 0.5)));
  }, 1e-5);
}

TEST(GradCheck, HarnessCatchesWrongGradient) {
  ParamStore store(19);
  auto& w = store.create("w", {3}, Init::normal(1.0));
  auto wrong = [&] {
    store.zero_grads();
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      s += w.value.at(i) * w.value.at(i);
      w.grad.at(i) = -2.0 * w.value.at(i);  // sign flipped on purpose
    }
    return s;
  };
  auto plain = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += w.value.at(i) * w.value.at(i);
    return s;
  };
  auto report = finite_diff_check(store, wrong, plain);
  EXPECT_FALSE(report.ok);
  EXPECT_FALSE(report.failures.empty());
}

TEST(GradCheck, HarnessRejectsNaNLoss) {
  ParamStore store(20);
  store.create("w", {1}, Init::ones());
  auto nan_loss = [&] { return std::nan(""); };
  auto report = finite_diff_check(store, nan_loss, nan_loss);
  EXPECT_FALSE(report.ok);
}

TEST(GradCheck, SubsampleChecksRequestedCount) {
  ParamStore store(21);
  auto& W = store.create("W", {10, 10}, Init::normal(1.0));
  GradCheckOptions opt;
  opt.max_entries_per_param = 7;
  auto loss = [&] {
    store.zero_grads();
    double s = 0.0;
    for (std::size_t i = 0; i < W.value.numel(); ++i) {
      s += 0.5 * W.value.data[i] * W.value.data[i];
      W.grad.data[i] = W.value.data[i];
    }
    return s;
  };
  auto plain = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < W.value.numel(); ++i) s += 0.5 * W.value.data[i] * W.value.data[i];
    return s;
  };
  auto report = finite_diff_check(store, loss, plain, opt);
  EXPECT_TRUE(report.ok) << report.describe();
  EXPECT_EQ(report.entries_checked, 7u);
}

TEST(Tape, BackwardTwiceIsAnError) {
  Tape t;
  Value x = t.constant(2.0);
  Value y = t.mul(x, x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), NumericError);
}

TEST(Tape, NonFiniteOpOutputThrows) {
  Tape t;
  Value x = t.input(Tensor({1}, {1e308}));
  EXPECT_THROW(t.mul(t.scale(x, 10.0), x), NumericError);
}
