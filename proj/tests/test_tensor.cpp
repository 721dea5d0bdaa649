#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "grad_check.hpp"
#include "kdasc/checkpoint.hpp"
#include "kdasc/distill.hpp"
#include "kdasc/optim.hpp"

using namespace kdasc;
using kdasc::testing::check_gradients;
using kdasc::testing::DTensor;
using kdasc::testing::random_tensor;

namespace {

// direct 6-loop cross-correlation, padding by bounds checks
std::vector<double> naive_conv(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                               const Shape& ws, std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const std::size_t o = ws[0], cg = ws[1], kh = ws[2], kw = ws[3];
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t og = o / groups;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < cg; ++ic)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                const std::size_t cin = (oc / og) * cg + ic;
                acc += x[((b * c + cin) * h + iy) * wd + ix] * w[((oc * cg + ic) * kh + ky) * kw + kx];
              }
          out[((b * o + oc) * oh + y) * ow + xo] = acc;
        }
  return out;
}

Tensor to_float(const DTensor& d) {
  Tensor t(d.shape());
  for (std::size_t i = 0; i < d.numel(); ++i) t[i] = static_cast<float>(d[i]);
  return t;
}

}  // namespace

TEST(Conv2d, OnesSumToNine) {
  Tensor x = Tensor::ones({1, 1, 3, 3}), w = Tensor::ones({1, 1, 3, 3});
  Tensor y = conv2d(x, w);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_FLOAT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  Tensor x = to_float(random_tensor({2, 3, 5, 4}, rng));
  Tensor w({3, 1, 1, 1}, 1.0f);
  Tensor y = conv2d(x, w, Conv2dOptions{1, 0, 3});
  EXPECT_EQ(y.data(), x.data());
}

TEST(Conv2d, MatchesNaiveLoops) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    DTensor x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u, 2u}) {
        const auto ref = naive_conv(x.data(), x.shape(), w.data(), w.shape(), stride, pad, 1);
        Tensor y = conv2d(to_float(x), to_float(w), Conv2dOptions{stride, pad, 1});
        ASSERT_EQ(y.numel(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-5) << "stride " << stride;
      }
  }
}

TEST(Conv2d, DepthwiseEqualsPerChannelConv) {
  Rng rng(11);
  DTensor x = random_tensor({2, 4, 7, 6}, rng), w = random_tensor({4, 1, 3, 3}, rng);
  Tensor y = conv2d(to_float(x), to_float(w), Conv2dOptions{1, 1, 4});
  const auto ref = naive_conv(x.data(), x.shape(), w.data(), w.shape(), 1, 1, 4);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-5);
  // each channel on its own
  for (std::size_t ch = 0; ch < 4; ++ch) {
    std::vector<double> xc, wc(w.data().begin() + ch * 9, w.data().begin() + (ch + 1) * 9);
    for (std::size_t b = 0; b < 2; ++b)
      xc.insert(xc.end(), x.data().begin() + (b * 4 + ch) * 42, x.data().begin() + (b * 4 + ch + 1) * 42);
    const auto single = naive_conv(xc, {2, 1, 7, 6}, wc, {1, 1, 3, 3}, 1, 1, 1);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 42; ++i) ASSERT_NEAR(y[(b * 4 + ch) * 42 + i], single[b * 42 + i], 1e-5);
  }
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(conv2d(Tensor({1, 3, 4, 4}), Tensor({2, 2, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 3, 4, 4}), Tensor({4, 1, 3, 3}), Conv2dOptions{1, 0, 3}), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3})), ShapeError);
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  Tensor x({4, 2, 3, 3}, 5.0f);
  Tensor gamma({2}, std::vector<float>{2.0f, 3.0f}), beta({2}, std::vector<float>{0.5f, -1.0f});
  BatchNormStats<float> st(2);
  Tensor y = batch_norm(x, gamma, beta, st);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], i < 9 || (i / 9) % 2 == 0 ? 0.5f : -1.0f, 1e-5);
}

TEST(BatchNorm, StandardizedInputUnchanged) {
  Rng rng(5);
  Tensor x({8, 2, 4, 4});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  // standardize each channel exactly
  for (std::size_t ch = 0; ch < 2; ++ch) {
    double m = 0, s = 0;
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t i = 0; i < 16; ++i) m += x[(b * 2 + ch) * 16 + i];
    m /= 128;
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t i = 0; i < 16; ++i) s += std::pow(x[(b * 2 + ch) * 16 + i] - m, 2);
    s = std::sqrt(s / 128);
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t i = 0; i < 16; ++i) x[(b * 2 + ch) * 16 + i] = static_cast<float>((x[(b * 2 + ch) * 16 + i] - m) / s);
  }
  BatchNormStats<float> st(2);
  Tensor y = batch_norm(x, Tensor::ones({2}), Tensor::zeros({2}), st);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-4);
}

TEST(BatchNorm, OutputStatsMatchAffine) {
  Rng rng(8);
  Tensor x({6, 3, 5, 5});
  for (auto& v : x.data()) v = static_cast<float>(3.0 + 2.0 * rng.normal());
  Tensor gamma({3}, std::vector<float>{0.5f, 1.5f, 2.0f}), beta({3}, std::vector<float>{-1.0f, 0.0f, 4.0f});
  BatchNormStats<float> st(3);
  Tensor y = batch_norm(x, gamma, beta, st);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0, s = 0;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < 25; ++i) m += y[(b * 3 + ch) * 25 + i];
    m /= 150;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < 25; ++i) s += std::pow(y[(b * 3 + ch) * 25 + i] - m, 2);
    s = std::sqrt(s / 150);
    EXPECT_NEAR(m, beta[ch], 1e-3);
    EXPECT_NEAR(s, gamma[ch], 1e-3);
  }
}

TEST(BatchNorm, RunningStatsAndEvalMode) {
  Tensor x({2, 1, 1, 2}, std::vector<float>{1, 3, 5, 7});
  BatchNormStats<float> st(1);
  batch_norm(x, Tensor::ones({1}), Tensor::zeros({1}), st);
  // mean 4, unbiased variance 20/3
  EXPECT_NEAR(st.running_mean[0], 0.4f, 1e-6);
  EXPECT_NEAR(st.running_var[0], 0.9f + 0.1f * 20.0f / 3.0f, 1e-5);
  Tensor y = batch_norm(x, Tensor::ones({1}), Tensor::zeros({1}), st, BatchNormOptions{false});
  EXPECT_NEAR(y[0], (1.0f - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5f), 1e-5);
  EXPECT_THROW(batch_norm(x, Tensor::ones({2}), Tensor::zeros({2}), st), ShapeError);
}

TEST(Elementwise, ReluPoolLinear) {
  EXPECT_EQ(relu(Tensor::scalar(-1.5f)).item(), 0.0f);
  EXPECT_EQ(relu(Tensor::scalar(2.5f)).item(), 2.5f);
  Tensor pooled = global_avg_pool(Tensor({2, 3, 4, 5}, 1.75f));
  ASSERT_EQ(pooled.shape(), (Shape{2, 3}));
  for (float v : pooled.data()) EXPECT_FLOAT_EQ(v, 1.75f);

  // 3x4 times (2x4)^T against a naive product
  Rng rng(2);
  Tensor x({3, 4}), w({2, 4}), b({2});
  for (auto* t : {&x, &w, &b})
    for (auto& v : t->data()) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor y = linear(x, w, std::optional<Tensor>(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = b[j];
      for (std::size_t k = 0; k < 4; ++k) acc += static_cast<double>(x[i * 4 + k]) * w[j * 4 + k];
      EXPECT_NEAR(y[i * 2 + j], acc, 1e-6);
    }
  EXPECT_THROW(linear(x, Tensor({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Softmax, ClosedForms) {
  Tensor u = softmax_t(Tensor({1, 3}, 0.0f), 2.0);
  for (float v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
  Tensor p = softmax_t(Tensor({1, 3}, std::vector<float>{1, 2, 3}), 1.0);
  EXPECT_NEAR(p[0], 0.09003, 1e-5);
  EXPECT_NEAR(p[1], 0.24473, 1e-5);
  EXPECT_NEAR(p[2], 0.66524, 1e-5);
  Tensor hot = softmax_t(Tensor({1, 4}, std::vector<float>{3, -7, 12, 0.5f}), 1e6);
  for (float v : hot.data()) EXPECT_NEAR(v, 0.25, 1e-4);
  EXPECT_THROW(softmax_t(p, 0.0), std::invalid_argument);
  EXPECT_THROW(softmax_t(p, -1.0), std::invalid_argument);
}

TEST(Softmax, StableForHugeLogits) {
  Rng rng(4);
  Tensor z({16, 10});
  for (auto& v : z.data()) v = static_cast<float>(rng.uniform(-1e4, 1e4));
  Tensor p = softmax_t(z, 1.0);
  ASSERT_TRUE(p.all_finite());
  for (std::size_t b = 0; b < 16; ++b) {
    double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += p[b * 10 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Backward, SimpleGradients) {
  auto& tape = Tape<float>::active();
  tape.reset();
  Tensor x({3}, std::vector<float>{4, -2, 7}, true);
  Tensor l = sum(x);
  backward(l);
  EXPECT_EQ(x.grad(), (std::vector<float>{1, 1, 1}));

  tape.reset();
  Tensor y({2}, std::vector<float>{1, 2}, true);
  Tensor l2 = sum(mul(y, y));
  backward(l2);
  EXPECT_EQ(y.grad(), (std::vector<float>{2, 4}));
  tape.reset();
}

TEST(Backward, Errors) {
  auto& tape = Tape<float>::active();
  tape.reset();
  Tensor x({2}, std::vector<float>{1, 2}, true);
  Tensor nonscalar = mul(x, x);
  EXPECT_THROW(backward(nonscalar), AutodiffError);
  Tensor detached = Tensor::scalar(1.0f);
  EXPECT_THROW(backward(detached), AutodiffError);
  Tensor l = sum(nonscalar);
  backward(l);
  EXPECT_THROW(backward(l), AutodiffError);
  EXPECT_THROW(sum(x), AutodiffError);  // recording on a consumed tape
  tape.reset();
  EXPECT_THROW(backward(l), AutodiffError);  // stale generation
  tape.reset();
}

TEST(Backward, ReverseOrderReachesEveryLeaf) {
  auto& tape = Tape<float>::active();
  tape.reset();
  Tensor a({2}, std::vector<float>{1, 2}, true), b({2}, std::vector<float>{3, -1}, true);
  Tensor c = add(mul(a, b), a);
  Tensor d = relu(c);
  Tensor l = mean(mul(d, b));
  ASSERT_EQ(tape.size(), 5u);
  EXPECT_EQ(tape.entry(0).op, "mul");
  EXPECT_EQ(tape.entry(4).op, "mean");
  backward(l);
  // l = mean(relu(a*b + a) * b); c = [4, 0] so relu passes element 0 only
  EXPECT_FLOAT_EQ(a.grad()[0], 0.5f * (3 + 1) * 3);
  EXPECT_FLOAT_EQ(b.grad()[0], 0.5f * (1 * 3 + 4));
  EXPECT_FLOAT_EQ(a.grad()[1], 0.0f);
  tape.reset();
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto& tape = Tape<float>::active();
  tape.reset();
  Tensor x({2}, std::vector<float>{1, 2}, true);
  {
    NoGradGuard<float> ng;
    Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

// ---------------------------------------------------------------------------
// finite differences, 64-bit re-execution, 5 seeds per op

class GradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradCheck, Elementwise) {
  Rng rng(GetParam());
  DTensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  kdasc::testing::nudge_from_zero(a);
  EXPECT_LT(check_gradients([](const auto& in) { return add(in[0], in[1]); }, {a, b}, GetParam()).max_rel_err, 1e-4);
  EXPECT_LT(check_gradients([](const auto& in) { return mul(in[0], in[1]); }, {a, b}, GetParam()).max_rel_err, 1e-4);
  EXPECT_LT(check_gradients([](const auto& in) { return relu(in[0]); }, {a}, GetParam()).max_rel_err, 1e-4);
  EXPECT_LT(check_gradients([](const auto& in) { return mean(in[0]); }, {a}, GetParam()).max_rel_err, 1e-4);
}

TEST_P(GradCheck, Conv2d) {
  Rng rng(GetParam());
  DTensor x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
  auto r = check_gradients([](const auto& in) { return conv2d(in[0], in[1], std::optional<DTensor>(in[2]), Conv2dOptions{2, 1, 1}); },
                           {x, w, b}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  DTensor wd = random_tensor({3, 1, 3, 3}, rng);
  r = check_gradients([](const auto& in) { return conv2d(in[0], in[1], Conv2dOptions{1, 1, 3}); }, {x, wd},
                      GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  DTensor wr = random_tensor({2, 3, 3, 1}, rng);
  r = check_gradients([](const auto& in) { return conv2d(in[0], in[1], Conv2dOptions{1, 1, 1}); }, {x, wr},
                      GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST_P(GradCheck, BatchNorm) {
  Rng rng(GetParam());
  DTensor x = random_tensor({3, 2, 3, 4}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  auto r = check_gradients(
      [](const auto& in) {
        BatchNormStats<double> st(2);
        return batch_norm(in[0], in[1], in[2], st);
      },
      {x, g, b}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  r = check_gradients(
      [](const auto& in) {
        BatchNormStats<double> st(2);
        st.running_mean[0] = 0.3;
        st.running_var[1] = 2.0;
        return batch_norm(in[0], in[1], in[2], st, BatchNormOptions{false});
      },
      {x, g, b}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST_P(GradCheck, LinearPoolSoftmax) {
  Rng rng(GetParam());
  DTensor x = random_tensor({3, 4}, rng), w = random_tensor({5, 4}, rng), b = random_tensor({5}, rng);
  auto r = check_gradients([](const auto& in) { return linear(in[0], in[1], std::optional<DTensor>(in[2])); }, {x, w, b}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  DTensor img = random_tensor({2, 3, 4, 3}, rng);
  r = check_gradients([](const auto& in) { return global_avg_pool(in[0]); }, {img}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  for (double tau : {1.0, 2.0, 5.0}) {
    r = check_gradients([tau](const auto& in) { return softmax_t(in[0], tau); }, {x}, GetParam());
    EXPECT_LT(r.max_rel_err, 1e-4) << "tau " << tau << " " << r.worst;
  }
  const std::vector<int> labels{1, 0, 3};
  r = check_gradients([&](const auto& in) { return cross_entropy(in[0], labels); }, {x}, GetParam());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST_P(GradCheck, KdLoss) {
  Rng rng(GetParam());
  DTensor zs = random_tensor({4, 6}, rng, 2.0), zt = random_tensor({4, 6}, rng, 2.0);
  const std::vector<int> labels{0, 5, 2, 2};
  for (double lambda : {0.0, 0.02, 1.0})
    for (double tau : {1.0, 2.0, 5.0}) {
      const DistillConfig cfg{lambda, tau};
      auto r = check_gradients([&](const auto& in) { return kd_loss(in[0], in[1], labels, cfg); }, {zs, zt},
                               GetParam(), {0});
      EXPECT_LT(r.max_rel_err, 1e-4) << "lambda " << lambda << " tau " << tau << " " << r.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(1, 2, 3, 4, 5));

// ---------------------------------------------------------------------------

TEST(Determinism, RepeatedOpsAreBitwiseEqual) {
  auto run = [] {
    Rng rng(21);
    Tensor x({2, 3, 6, 6}), w({4, 3, 3, 3});
    for (auto* t : {&x, &w})
      for (auto& v : t->data()) v = static_cast<float>(rng.normal());
    BatchNormStats<float> st(4);
    return global_avg_pool(relu(batch_norm(conv2d(x, w, Conv2dOptions{1, 1, 1}), Tensor::ones({4}),
                                           Tensor::zeros({4}), st)));
  };
  EXPECT_EQ(run().data(), run().data());
}

TEST(Adam, Cases) {
  // zero gradient leaves parameters alone
  std::vector<Tensor> p{Tensor({3}, std::vector<float>{1, -2, 3}, true)};
  AdamState st = AdamState::for_params(p);
  optimizer_step(p, st, 0.1);
  EXPECT_EQ(p[0].data(), (std::vector<float>{1, -2, 3}));

  std::vector<Tensor> s{Tensor::scalar(0.5f, true)};
  AdamState ss = AdamState::for_params(s);
  s[0].grad()[0] = 1.0f;
  optimizer_step(s, ss, 0.1);
  EXPECT_LT(s[0].item(), 0.5f);
  EXPECT_NEAR(s[0].item(), 0.4f, 1e-6);

  // f(x) = x^2 from 1
  std::vector<Tensor> q{Tensor::scalar(1.0f, true)};
  AdamState qs = AdamState::for_params(q);
  float prev = 1.0f;
  for (int i = 0; i < 10; ++i) {
    q[0].grad()[0] = 2.0f * q[0].item();
    optimizer_step(q, qs, 0.05);
    EXPECT_LT(std::abs(q[0].item()), std::abs(prev));
    prev = q[0].item();
  }

  AdamState wrong;
  EXPECT_THROW(optimizer_step(q, wrong, 0.1), std::invalid_argument);
}

TEST(Adam, Schedule) {
  LrSchedule s{1e-3, 10, 110};
  EXPECT_NEAR(s.at(0), 1e-4, 1e-12);
  EXPECT_NEAR(s.at(9), 1e-3, 1e-12);
  EXPECT_NEAR(s.at(10), 1e-3, 1e-12);
  EXPECT_NEAR(s.at(60), 0.5e-3, 1e-12);
  EXPECT_NEAR(s.at(110), 0.0, 1e-12);
  for (std::size_t i = 10; i < 110; ++i) EXPECT_GE(s.at(i), s.at(i + 1));
}

TEST(Checkpoint, RoundTripAndRejectsNonFinite) {
  const auto path = std::filesystem::temp_directory_path() / "kdasc_ckpt_test.ckpt";
  TensorMap m;
  m["a.weight"] = Tensor({2, 3}, std::vector<float>{1, 2, 3, 4, 5, -6.5f});
  m["b"] = Tensor::scalar(0.25f);
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("a.weight").shape(), (Shape{2, 3}));
  EXPECT_EQ(back.at("a.weight").data(), m["a.weight"].data());
  m["bad"] = Tensor({1}, std::vector<float>{std::nanf("")});
  EXPECT_THROW(save_checkpoint(path, m), std::runtime_error);
  {
    std::ofstream os(path, std::ios::binary);
    os << "XXXX";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(GradCheckOracle, CatchesWrongBackward) {
  // square with a deliberately halved derivative
  auto bad_square = [](const std::vector<DTensor>& in) {
    DTensor x = in[0];
    DTensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * x[i];
    if (detail::should_record(x))
      Tape<double>::active().record("bad_square", out, [x, out]() mutable {
        for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * x[i];
      });
    return out;
  };
  Rng rng(1);
  EXPECT_GT(check_gradients(bad_square, {random_tensor({4}, rng)}, 1).max_rel_err, 0.1);
}
