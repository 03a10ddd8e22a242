#include <catch_amalgamated.hpp>

#include <cmath>

#include "csireid/tensor.hpp"
#include "test_support.hpp"

using namespace csireid;
using csireid::testing::max_grad_rel_error;
using csireid::testing::random_tensor;
using csireid::testing::scalarize;

namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("matmul shape contract", "[tensor]") {
  Rng rng(1);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});
  CHECK_THROWS_AS(ops::matmul(a, random_tensor({4, 2}, rng)), ShapeError);
  CHECK_THROWS_AS(ops::add(a, b), ShapeError);
}

TEST_CASE("gradient of sum(x*x) is 2x exactly", "[tensor]") {
  Rng rng(2);
  auto x = random_tensor({3, 4}, rng);
  auto loss = ops::sum_all(ops::mul(x, x));
  loss.backward();
  for (std::size_t i = 0; i < x.values().size(); ++i)
    CHECK(x.grad()[i] == 2.0 * x.values()[i]);
}

TEST_CASE("matmul values against a hand computation", "[tensor]") {
  auto a = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto b = Tensor::from_data({2, 2}, {5.0, 6.0, 7.0, 8.0});
  auto c = ops::matmul(a, b);
  CHECK(c.values() == std::vector<double>{19.0, 22.0, 43.0, 50.0});
}

TEST_CASE("elementwise and affine gradients", "[tensor]") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 3}, rng);
    auto bias = random_tensor({3}, rng);
    CHECK(max_grad_rel_error({a, b}, [&] {
            Rng r(890 + trial);
            return csireid::testing::scalarize(ops::mul(ops::add(a, b), ops::sub(a, b)), r);
          }) < kTol);
    // suffix broadcast
    CHECK(max_grad_rel_error({a, bias}, [&] {
            Rng r(900 + trial);
            return csireid::testing::scalarize(ops::add(a, bias), r);
          }) < kTol);
    CHECK(max_grad_rel_error({a}, [&] {
            Rng r(901 + trial);
            return csireid::testing::scalarize(ops::affine(a, -1.7, 0.3), r);
          }) < kTol);
  }
}

TEST_CASE("matmul gradients in all rank combinations", "[tensor]") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto a2 = random_tensor({3, 4}, rng);
    auto b2 = random_tensor({4, 2}, rng);
    CHECK(max_grad_rel_error({a2, b2}, [&] {
            Rng r(100 + trial);
            return csireid::testing::scalarize(ops::matmul(a2, b2), r);
          }) < kTol);

    auto a3 = random_tensor({2, 3, 4}, rng);
    CHECK(max_grad_rel_error({a3, b2}, [&] {
            Rng r(200 + trial);
            return csireid::testing::scalarize(ops::matmul(a3, b2), r);
          }) < kTol);

    auto b3 = random_tensor({2, 4, 3}, rng);
    CHECK(max_grad_rel_error({a3, b3}, [&] {
            Rng r(300 + trial);
            return csireid::testing::scalarize(ops::matmul(a3, b3), r);
          }) < kTol);
  }
}

TEST_CASE("layout op gradients", "[tensor]") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 3, 4}, rng);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(400 + trial);
            return csireid::testing::scalarize(ops::transpose_last2(x), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(410 + trial);
            return csireid::testing::scalarize(ops::reshape(x, {6, 4}), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(420 + trial);
            return csireid::testing::scalarize(ops::split_heads(x, 2), r);
          }) < kTol);
    auto h = random_tensor({4, 3, 2}, rng);
    CHECK(max_grad_rel_error({h}, [&] {
            Rng r(430 + trial);
            return csireid::testing::scalarize(ops::merge_heads(h, 2), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(440 + trial);
            return csireid::testing::scalarize(ops::pad_lastdim(x, 6), r);
          }) < kTol);
    auto m = random_tensor({5, 3}, rng);
    CHECK(max_grad_rel_error({m}, [&] {
            Rng r(450 + trial);
            return csireid::testing::scalarize(ops::take_rows(m, 3), r);
          }) < kTol);
    auto y = random_tensor({2, 2, 4}, rng);
    CHECK(max_grad_rel_error({x, y}, [&] {
            Rng r(460 + trial);
            return csireid::testing::scalarize(ops::concat_tokens(x, y), r);
          }) < kTol);
  }
}

TEST_CASE("split/merge heads are inverse permutations", "[tensor]") {
  Rng rng(6);
  auto x = random_tensor({2, 5, 6}, rng, false);
  auto round = ops::merge_heads(ops::split_heads(x, 3), 3);
  CHECK(round.values() == x.values());
}

TEST_CASE("activation gradients", "[tensor]") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({3, 4}, rng);
    // keep relu inputs away from the kink
    for (auto& v : x.values_mut())
      if (std::abs(v) < 0.05) v += 0.1;
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(500 + trial);
            return csireid::testing::scalarize(ops::relu(x), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(510 + trial);
            return csireid::testing::scalarize(ops::gelu(x), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(520 + trial);
            return csireid::testing::scalarize(ops::exp_t(x), r);
          }) < kTol);
    auto positive = random_tensor({3, 4}, rng);
    for (auto& v : positive.values_mut()) v = std::abs(v) + 0.5;
    CHECK(max_grad_rel_error({positive}, [&] {
            Rng r(530 + trial);
            return csireid::testing::scalarize(ops::log_t(positive), r);
          }) < kTol);
  }
}

TEST_CASE("softmax, layer norm, and normalization gradients", "[tensor]") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 3, 5}, rng);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(600 + trial);
            return csireid::testing::scalarize(ops::softmax_lastdim(x), r);
          }) < kTol);
    auto gain = random_tensor({5}, rng);
    auto bias = random_tensor({5}, rng);
    CHECK(max_grad_rel_error({x, gain, bias}, [&] {
            Rng r(610 + trial);
            return csireid::testing::scalarize(ops::layer_norm(x, gain, bias), r);
          }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(620 + trial);
            return csireid::testing::scalarize(ops::l2_normalize(x), r);
          }) < kTol);
  }
}

TEST_CASE("softmax rows sum to one", "[tensor]") {
  Rng rng(9);
  auto x = random_tensor({4, 7}, rng, false, 3.0);
  auto y = ops::softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 7; ++c) sum += y.values()[static_cast<std::size_t>(r * 7 + c)];
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("reduction gradients", "[tensor]") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 3, 4}, rng);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      CHECK(max_grad_rel_error({x}, [&, axis] {
              Rng r(700 + trial * 3 + axis);
              return csireid::testing::scalarize(ops::sum_axis(x, axis), r);
            }) < kTol);
      CHECK(max_grad_rel_error({x}, [&, axis] {
              Rng r(720 + trial * 3 + axis);
              return csireid::testing::scalarize(ops::mean_axis(x, axis), r);
            }) < kTol);
    }
    CHECK(max_grad_rel_error({x}, [&] { return ops::reduce_mean(x); }) < kTol);
    CHECK(max_grad_rel_error({x}, [&] { return ops::sum_all(x); }) < kTol);
  }
}

TEST_CASE("masking op gradients", "[tensor]") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 3, 4}, rng);
    std::vector<double> fill_mask(24);
    for (auto& v : fill_mask) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    CHECK(max_grad_rel_error({x}, [&] {
            Rng r(800 + trial);
            return csireid::testing::scalarize(ops::masked_fill(x, fill_mask, -3.0), r);
          }) < kTol);

    // (B*heads, T, T) scores with a (B, T) key mask
    auto scores = random_tensor({4, 3, 3}, rng);
    std::vector<double> key_mask{1, 1, 0, 1, 0, 1};
    CHECK(max_grad_rel_error({scores}, [&] {
            Rng r(810 + trial);
            return csireid::testing::scalarize(
                ops::softmax_lastdim(ops::apply_key_padding_mask(scores, key_mask, 2, 2)), r);
          }) < kTol);

    auto feats = random_tensor({2, 3, 4}, rng);
    CHECK(max_grad_rel_error({feats}, [&] {
            Rng r(820 + trial);
            return csireid::testing::scalarize(ops::masked_mean_time(feats, key_mask), r);
          }) < kTol);

    auto v = random_tensor({2, 4}, rng);
    CHECK(max_grad_rel_error({feats, v}, [&] {
            Rng r(830 + trial);
            return csireid::testing::scalarize(ops::add_broadcast_rows(feats, v), r);
          }) < kTol);
  }
}

TEST_CASE("masked attention weights are exactly zero at padded keys", "[tensor]") {
  Rng rng(12);
  auto scores = random_tensor({2, 4, 4}, rng, false, 2.0);
  std::vector<double> mask{1, 1, 1, 0, 1, 0, 1, 1};
  auto probs = ops::softmax_lastdim(ops::apply_key_padding_mask(scores, mask, 2, 1));
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t q = 0; q < 4; ++q) {
      double sum = 0.0;
      for (std::int64_t k = 0; k < 4; ++k) {
        const double w = probs.values()[static_cast<std::size_t>((b * 4 + q) * 4 + k)];
        if (mask[static_cast<std::size_t>(b * 4 + k)] == 0.0) CHECK(w == 0.0);
        sum += w;
      }
      CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("fully masked attention rows are rejected", "[tensor]") {
  Rng rng(13);
  auto scores = random_tensor({2, 2, 2}, rng, false);
  std::vector<double> mask{0, 0, 1, 1};
  CHECK_THROWS_AS(ops::apply_key_padding_mask(scores, mask, 2, 1), DegenerateMaskError);
}

TEST_CASE("pooling over zero valid positions is rejected", "[tensor]") {
  Rng rng(16);
  auto feats = random_tensor({2, 2, 3}, rng, false);
  std::vector<double> mask{0, 0, 1, 1};
  CHECK_THROWS_AS(ops::masked_mean_time(feats, mask), DegenerateMaskError);
}

TEST_CASE("dropout with a fixed seed has exact mask gradients", "[tensor]") {
  Rng data_rng(14);
  auto x = random_tensor({4, 5}, data_rng);
  CHECK(max_grad_rel_error({x}, [&] {
          Rng r(4242);
          Rng w(4343);
          return csireid::testing::scalarize(ops::dropout(x, 0.4, r, true), w);
        }) < kTol);
  // eval mode is the identity
  Rng r(1);
  auto y = ops::dropout(x, 0.4, r, false);
  CHECK(y.values() == x.values());
}

TEST_CASE("cross entropy gradients and uniform value", "[tensor]") {
  Rng rng(15);
  auto logits = Tensor::from_data({1, 2}, {0.0, 0.0}, true);
  auto loss = ops::cross_entropy(logits, {0});
  CHECK_THAT(loss.item(), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({4, 6}, rng);
    std::vector<int> labels{0, 3, 5, 2};
    CHECK(max_grad_rel_error({x}, [&] { return ops::cross_entropy(x, labels); }) < kTol);
  }
}

TEST_CASE("l2_normalize rejects zero rows", "[tensor]") {
  auto x = Tensor::from_data({2, 2}, {0.0, 0.0, 1.0, 1.0});
  CHECK_THROWS_AS(ops::l2_normalize(x), NormalizationError);
}
