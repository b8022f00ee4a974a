#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "gradcheck.hpp"
#include "lakit/checkpoint.hpp"
#include "lakit/detail/gemm.hpp"
#include "lakit/tape.hpp"

using namespace lakit;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  t.at(1, 2) = 5.0f;
  EXPECT_EQ(t[5], 5.0f);
  EXPECT_THROW(Tensor<float>({2, 2}, {1.0f, 2.0f}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tape, MatmulGolden) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  const auto& c = tape.value(tape.matmul(a, b));
  EXPECT_EQ(c.storage(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Tape, MatmulShapeMismatch) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 2}));
  EXPECT_THROW(tape.matmul(a, b), ShapeError);
}

TEST(Tape, ConvGolden) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto w = tape.constant(Tensor<double>({1, 1, 2, 2}, {1, 1, 1, 1}));
  const auto& y = tape.value(tape.conv2d(x, w));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 10.0);
}

TEST(Tape, ConvRejectsInexactGeometry) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 4, 4}));
  auto w = tape.constant(Tensor<double>({1, 1, 3, 3}));
  EXPECT_THROW(tape.conv2d(x, w, {2, 0}), ConfigError);
  auto big = tape.constant(Tensor<double>({1, 1, 5, 5}));
  EXPECT_THROW(tape.conv2d(x, big, {1, 0}), ConfigError);
}

TEST(Tape, UniformLogitsGiveLogK) {
  Tape<double> tape;
  Tensor<double> target({1, 10});
  target[3] = 1.0;
  auto z = tape.leaf(Tensor<double>({1, 10}), true);
  auto loss = tape.softmax_cross_entropy(z, target);
  EXPECT_NEAR(tape.value(loss)[0], std::log(10.0), 1e-12);
}

TEST(Tape, CrossEntropyRejectsUnnormalizedTargets) {
  Tape<double> tape;
  auto z = tape.leaf(Tensor<double>({1, 3}), true);
  EXPECT_THROW(tape.softmax_cross_entropy(z, Tensor<double>({1, 3}, {0.5, 0.4, 0.0})), ValidationError);
}

TEST(Tape, LogDomainErrorNamesIndex) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, {1.0, 2.0, -1.0}), true);
  try {
    tape.map(x, Kernel::log());
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos);
  }
}

TEST(Tape, BackwardMisuse) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, {1.0, 2.0}), true);
  EXPECT_THROW(tape.backward(x, {x}), TapeError);  // non-scalar
  auto s = tape.sum(x);
  tape.backward(s, {x});
  EXPECT_THROW(tape.backward(s, {x}), TapeError);
  Tape<double> other;
  auto y = other.leaf(Tensor<double>({1}, {1.0}), true);
  EXPECT_THROW(tape.backward(s, {y}), TapeError);
}

TEST(Tape, ConstantsGetNoGradient) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, {1.0, 2.0}), true);
  auto c = tape.constant(Tensor<double>({2}, {3.0, 4.0}));
  auto g = tape.backward(tape.sum(tape.mul(x, c)), {x, c});
  EXPECT_EQ(g[0].storage(), (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(g[1].storage(), (std::vector<double>{0.0, 0.0}));
}

TEST(Tape, MaxPoolTieGoesToFirst) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}), true);
  auto g = tape.backward(tape.sum(tape.max_pool2d(x, 2)), {x});
  EXPECT_EQ(g[0].storage(), (std::vector<double>{1.0, 0.0, 0.0, 0.0}));
}

TEST(Tape, GradientsMatchFiniteDifferences) {
  const auto cases = gradcheck::make_cases(200, 11);
  for (const auto& c : cases) {
    const auto r = gradcheck::check(c);
    EXPECT_LT(r.rel_error, 1e-4) << r.detail;
  }
}

TEST(Tape, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(5);
    Tape<float> tape;
    Tensor<float> x({4, 3, 8, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    Tensor<float> w({5, 3, 3, 3});
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-1, 1));
    auto xv = tape.leaf(x, true);
    auto wv = tape.leaf(w, true);
    auto y = tape.sum(tape.max_pool2d(tape.relu(tape.conv2d(xv, wv, {1, 1})), 2));
    return tape.backward(y, {xv, wv});
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
}

TEST(Checkpoint, RoundTrip) {
  std::vector<NamedTensor<float>> in{{"a", Tensor<float>({2, 2}, {1.5f, -2.0f, 0.0f, 3.25f})},
                                     {"bias", Tensor<float>({3}, {0.1f, 0.2f, 0.3f})}};
  std::stringstream ss;
  write_tensors(ss, in);
  const auto out = read_tensors<float>(ss);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].name, "a");
  EXPECT_EQ(out[0].tensor, in[0].tensor);
  EXPECT_EQ(out[1].tensor, in[1].tensor);
}

TEST(Checkpoint, DetectsCorruption) {
  std::vector<NamedTensor<float>> in{{"w", Tensor<float>({4}, {1, 2, 3, 4})}};
  std::stringstream ss;
  write_tensors(ss, in);
  const std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensors<float>(truncated), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream badmagic(bad);
  EXPECT_THROW(read_tensors<float>(badmagic), DataError);
}
