#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdasc/distill.hpp"
#include "kdasc/metrics.hpp"
#include "kdasc/rng.hpp"

using namespace kdasc;
namespace fs = std::filesystem;

using DTensor = BasicTensor<double>;

namespace {

std::vector<double> softmax_ref(const std::vector<double>& z, double tau) {
  double m = *std::max_element(z.begin(), z.end()), s = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) s += p[j] = std::exp((z[j] - m) / tau);
  for (auto& v : p) v /= s;
  return p;
}

// single-sample reference: lambda * CE + (1 - lambda) * tau^2 * KL(p_t || p_s)
double kd_ref(const std::vector<double>& zs, const std::vector<double>& zt, int y, double lambda, double tau) {
  const auto ps1 = softmax_ref(zs, 1.0), ps = softmax_ref(zs, tau), pt = softmax_ref(zt, tau);
  double kl = 0.0;
  for (std::size_t j = 0; j < zs.size(); ++j) kl += pt[j] * std::log(pt[j] / ps[j]);
  return lambda * -std::log(ps1[static_cast<std::size_t>(y)]) + (1.0 - lambda) * tau * tau * kl;
}

double kd_value(const std::vector<double>& zs, const std::vector<double>& zt, std::vector<int> y, double lambda,
                double tau) {
  const std::size_t k = y.empty() ? zs.size() : zs.size() / y.size();
  NoGradGuard<double> ng;
  return kd_loss(DTensor({zs.size() / k, k}, zs), DTensor({zs.size() / k, k}, zt), y, DistillConfig{lambda, tau})[0];
}

std::vector<double> random_logits(std::size_t n, Rng& rng, double scale = 3.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

LogitStore random_store(std::size_t clips, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  LogitStore s(k);
  for (std::size_t i = 0; i < clips; ++i) {
    std::vector<float> v(k);
    for (auto& x : v) x = static_cast<float>(rng.normal() * 4.0);
    s.add("audio/clip_" + std::to_string(i) + ".wav", v);
  }
  return s;
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("kdasc_kd_" + name); }

DatasetManifest six_clip_manifest() {
  DatasetManifest m;
  m.records = {{"a.wav", 0, "A", Split::Val}, {"b.wav", 1, "A", Split::Val}, {"c.wav", 2, "B", Split::Val},
               {"d.wav", 0, "B", Split::Val}, {"e.wav", 1, "S", Split::Val}, {"f.wav", 2, "S", Split::Val},
               {"t1.wav", 0, "A", Split::Train}, {"t2.wav", 1, "B", Split::Train}};
  return m;
}

std::vector<float> onehot_logits(int cls) {
  std::vector<float> v(3, 0.0f);
  v[static_cast<std::size_t>(cls)] = 5.0f;
  return v;
}

}  // namespace

TEST(KdLoss, WorkedExample) {
  const std::vector<double> zs{1, 2, 3}, zt{3, 2, 1};
  EXPECT_NEAR(kd_value(zs, zt, {2}, 1.0, 1.0), 0.40760596444, 1e-9);
  for (double lambda : {0.0, 0.02, 0.5})
    for (double tau : {1.0, 2.0, 5.0})
      EXPECT_NEAR(kd_value(zs, zt, {2}, lambda, tau), kd_ref(zs, zt, 2, lambda, tau), 1e-10)
          << lambda << " " << tau;
}

TEST(KdLoss, LambdaOneIsCrossEntropy) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto zs = random_logits(40, rng), zt = random_logits(40, rng);
    std::vector<int> y{0, 3, 9, 5};
    NoGradGuard<double> ng;
    const double ce = cross_entropy(DTensor({4, 10}, zs), y)[0];
    for (double tau : {1.0, 2.0, 7.0}) EXPECT_NEAR(kd_value(zs, zt, y, 1.0, tau), ce, 1e-9);
  }
}

TEST(KdLoss, MatchingLogitsHaveNoSoftTerm) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_logits(30, rng);
    EXPECT_LT(std::abs(kd_value(z, z, {1, 2, 3}, 0.0, 2.0)), 1e-7);
  }
}

TEST(KdLoss, BatchMean) {
  Rng rng(5);
  const auto zs = random_logits(30, rng), zt = random_logits(30, rng);
  const std::vector<int> y{4, 0, 7};
  double expect = 0.0;
  for (std::size_t b = 0; b < 3; ++b)
    expect += kd_ref(std::vector<double>(zs.begin() + b * 10, zs.begin() + b * 10 + 10),
                     std::vector<double>(zt.begin() + b * 10, zt.begin() + b * 10 + 10), y[b], 0.3, 2.0);
  EXPECT_NEAR(kd_value(zs, zt, y, 0.3, 2.0), expect / 3.0, 1e-10);
}

TEST(KdLoss, HighTemperatureLimit) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto zs = random_logits(10, rng, 1.0), zt = random_logits(10, rng, 1.0);
    // tau^2 KL -> ||(zs - mean) - (zt - mean)||^2 / (2K) as tau grows
    double ms = 0, mt = 0;
    for (int j = 0; j < 10; ++j) ms += zs[j] / 10, mt += zt[j] / 10;
    double lim = 0;
    for (int j = 0; j < 10; ++j) lim += std::pow((zs[j] - ms) - (zt[j] - mt), 2) / 20.0;
    EXPECT_NEAR(kd_value(zs, zt, {0}, 0.0, 100.0), lim, 0.05 * lim);
  }
}

TEST(KdLoss, TauGradientScale) {
  const auto rep = tau_gradient_scale_check({1.0, 0.0}, {0.0, 1.0}, {1.0, 2.0, 10.0, 100.0});
  ASSERT_EQ(rep.points.size(), 4u);
  EXPECT_NEAR(rep.limit[0], 0.5, 1e-12);
  EXPECT_NEAR(rep.limit[1], -0.5, 1e-12);
  EXPECT_NEAR(rep.points.back().scaled_grad[0], 0.5, 0.025);
  EXPECT_NEAR(rep.points.back().scaled_grad[1], -0.5, 0.025);
  EXPECT_TRUE(rep.converged);
  // error shrinks as tau grows
  for (std::size_t i = 1; i < rep.points.size(); ++i)
    EXPECT_LT(rep.points[i].rel_err_to_limit, rep.points[i - 1].rel_err_to_limit);
  EXPECT_THROW(tau_gradient_scale_check({1.0}, {1.0, 2.0}, {1.0}), ShapeError);
  EXPECT_THROW(tau_gradient_scale_check({1.0, 2.0}, {1.0, 2.0}, {0.5}), std::invalid_argument);
}

TEST(KdLoss, Errors) {
  const DTensor s({2, 3}), t({2, 3}), bad({2, 4});
  EXPECT_THROW(kd_loss(s, bad, {0, 1}, DistillConfig{}), ShapeError);
  EXPECT_THROW(kd_loss(s, t, {0, 3}, DistillConfig{}), std::out_of_range);
  EXPECT_THROW(kd_loss(s, t, {0, 1}, DistillConfig{1.5, 2.0}), std::invalid_argument);
  EXPECT_THROW(kd_loss(s, t, {0, 1}, DistillConfig{0.5, 0.0}), std::invalid_argument);
  DTensor tg({2, 3});
  tg.set_requires_grad(true);
  EXPECT_THROW(kd_loss(s, tg, {0, 1}, DistillConfig{}), std::invalid_argument);
}

TEST(Ensemble, MatchesBruteForceMean) {
  std::vector<LogitStore> stores;
  for (std::uint64_t s = 0; s < 5; ++s) stores.push_back(random_store(50, 10, s + 1));
  const auto e = ensemble_logits(stores);
  ASSERT_EQ(e.size(), 50u);
  for (const auto& [id, v] : e.entries())
    for (std::size_t j = 0; j < 10; ++j) {
      double m = 0;
      for (const auto& s : stores) m += s.at(id)[j];
      EXPECT_NEAR(v[j], static_cast<float>(m / 5.0), 1e-7);  // mean rounded to the stored precision
    }
}

TEST(Ensemble, OrderInvariantAndIdempotent) {
  std::vector<LogitStore> stores;
  for (std::uint64_t s = 0; s < 4; ++s) stores.push_back(random_store(30, 10, s + 11));
  const auto a = ensemble_logits(stores);
  std::vector<LogitStore> rev(stores.rbegin(), stores.rend());
  EXPECT_EQ(a, ensemble_logits(rev));
  std::swap(stores[0], stores[2]);
  EXPECT_EQ(a, ensemble_logits(stores));
  EXPECT_EQ(ensemble_logits({stores[1]}), stores[1]);
  EXPECT_EQ(ensemble_logits({stores[1], stores[1], stores[1]}), stores[1]);
}

TEST(Ensemble, Errors) {
  EXPECT_THROW(ensemble_logits({}), std::invalid_argument);
  EXPECT_THROW(ensemble_logits({random_store(5, 10, 1), random_store(5, 8, 2)}), std::invalid_argument);
  try {
    ensemble_logits({random_store(5, 10, 1), random_store(4, 10, 2)});
    FAIL() << "expected mismatch";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("clip_4"), std::string::npos);
  }
}

TEST(LogitStoreIo, RoundTrip) {
  const auto s = random_store(40, 10, 9);
  const auto p = tmp("rt.logits");
  write_logits(p, s);
  EXPECT_EQ(import_logits(p), s);
  write_logits(p, LogitStore(10));
  EXPECT_EQ(import_logits(p).size(), 0u);
  fs::remove(p);
}

TEST(LogitStoreIo, RejectsCorruption) {
  const auto p = tmp("bad.logits");
  write_logits(p, random_store(3, 4, 1));
  std::string bytes;
  {
    std::ifstream is(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto write_bytes = [&](const std::string& b) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write_bytes(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(import_logits(p), binio::FormatError);
  write_bytes(bytes + "x");
  EXPECT_THROW(import_logits(p), binio::FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  write_bytes(magic);
  EXPECT_THROW(import_logits(p), binio::FormatError);
  std::string version = bytes;
  version[4] = 7;
  write_bytes(version);
  EXPECT_THROW(import_logits(p), binio::FormatError);
  fs::remove(p);
  EXPECT_THROW(import_logits(p), std::runtime_error);

  LogitStore s(3);
  EXPECT_THROW(s.add("x", {1.0f, 2.0f}), std::invalid_argument);
  EXPECT_THROW(s.add("x", {1.0f, NAN, 2.0f}), std::invalid_argument);
  s.add("x", {1, 2, 3});
  EXPECT_THROW(s.add("x", {1, 2, 3}), std::invalid_argument);
}

TEST(Metrics, SixClipExample) {
  const auto m = six_clip_manifest();
  LogitStore s(3);
  // a,b correct; c wrong; d correct; e correct; f wrong
  s.add("a.wav", onehot_logits(0));
  s.add("b.wav", onehot_logits(1));
  s.add("c.wav", onehot_logits(0));
  s.add("d.wav", onehot_logits(0));
  s.add("e.wav", onehot_logits(1));
  s.add("f.wav", onehot_logits(1));
  const auto r = evaluate(s, m);
  EXPECT_DOUBLE_EQ(r.overall_acc, 4.0 / 6.0);
  EXPECT_EQ(r.clip_count, 6u);
  ASSERT_TRUE(r.unseen_acc.has_value());
  EXPECT_DOUBLE_EQ(*r.unseen_acc, 0.5);  // device S only appears in validation
  EXPECT_DOUBLE_EQ(*r.seen_acc, 0.75);
  EXPECT_DOUBLE_EQ(r.per_device_acc.at("A"), 1.0);
  EXPECT_DOUBLE_EQ(r.per_device_acc.at("B"), 0.5);
  EXPECT_DOUBLE_EQ(r.per_device_acc.at("S"), 0.5);
}

TEST(Metrics, PerfectAndNoUnseen) {
  auto m = six_clip_manifest();
  LogitStore s(3);
  for (const auto& r : m.records)
    if (r.split == Split::Val) s.add(r.clip_path, onehot_logits(r.scene));
  const auto perfect = evaluate(s, m);
  EXPECT_DOUBLE_EQ(perfect.overall_acc, 1.0);
  EXPECT_DOUBLE_EQ(*perfect.unseen_acc, 1.0);

  m.records.push_back({"t3.wav", 2, "S", Split::Train});
  const auto all_seen = evaluate(s, m);
  EXPECT_FALSE(all_seen.unseen_acc.has_value());
  EXPECT_DOUBLE_EQ(all_seen.overall_acc, 1.0);

  LogitStore partial(3);
  partial.add("a.wav", onehot_logits(0));
  EXPECT_THROW(evaluate(partial, m), std::runtime_error);
}

TEST(Metrics, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_lowest({1.0f, 3.0f, 3.0f}), 1);
  EXPECT_EQ(argmax_lowest({2.0f, 2.0f}), 0);
}

TEST(Metrics, AggregateIsArithmeticMean) {
  MetricsReport a, b;
  a.overall_acc = 0.5, b.overall_acc = 0.8;
  a.unseen_acc = 0.2;
  a.per_device_acc = {{"A", 1.0}}, b.per_device_acc = {{"A", 0.5}, {"B", 0.25}};
  a.run_ids = {2}, b.run_ids = {1};
  a.epoch_window = {9, 10}, b.epoch_window = {10, 11};
  const auto r = aggregate_reports({a, b});
  EXPECT_DOUBLE_EQ(r.overall_acc, 0.65);
  EXPECT_DOUBLE_EQ(*r.unseen_acc, 0.2);
  EXPECT_DOUBLE_EQ(r.per_device_acc.at("A"), 0.75);
  EXPECT_DOUBLE_EQ(r.per_device_acc.at("B"), 0.25);
  EXPECT_EQ(r.run_ids, (std::vector<int>{1, 2}));
  EXPECT_EQ(r.epoch_window, (std::vector<int>{9, 10, 11}));
  EXPECT_EQ(r.evaluations, 2u);
  const auto back = report_from_json(to_json(r));
  EXPECT_DOUBLE_EQ(back.overall_acc, r.overall_acc);
  EXPECT_EQ(back.per_device_acc, r.per_device_acc);
  EXPECT_THROW(aggregate_reports({}), std::invalid_argument);
}
