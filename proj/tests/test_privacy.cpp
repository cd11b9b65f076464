#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "protean/privacy.hpp"

using namespace protean;

namespace {

nn::Architecture narrow_cnn() {
  nn::Architecture a;
  a.conv1_filters = 4;
  a.conv2_filters = 6;
  a.embedding_dim = 8;
  return a;
}

FeatureBounds unit_box(std::size_t F) {
  return {std::vector<double>(F, 0.0), std::vector<double>(F, 1.0)};
}

}  // namespace

TEST_CASE("attack at a known preimage stays put") {
  const auto m = nn::build_model(8, 3, 1, narrow_cnn());
  Rng rng(3);
  std::vector<double> x0(8);
  for (auto& v : x0) v = std::uniform_real_distribution<double>(0.1, 0.9)(rng);
  Matrix row(1, 8);
  for (int k = 0; k < 8; ++k) row(0, k) = x0[static_cast<std::size_t>(k)];
  const Matrix e = nn::embed(m, row);
  const std::vector<double> target(e.data(), e.data() + e.size());

  AttackConfig cfg;
  cfg.steps = 50;
  cfg.restarts = 1;
  const auto rec = reconstruct_profile(m, target, unit_box(8), cfg, rng, x0);
  CHECK(rec.objective == 0.0);
  CHECK(rec.profile == x0);
}

TEST_CASE("best objective never increases and iterates stay in bounds") {
  const auto m = nn::build_model(8, 3, 2, narrow_cnn());
  std::vector<double> target(8, 0.3);
  FeatureBounds box{std::vector<double>(8, -0.5), std::vector<double>(8, 0.25)};
  AttackConfig cfg;
  cfg.steps = 200;
  cfg.restarts = 2;
  Rng rng(4);
  const auto rec = reconstruct_profile(m, target, box, cfg, rng);
  CHECK(rec.iterations == 400);
  REQUIRE(rec.best_objective.size() == 400);
  for (std::size_t k = 1; k < rec.best_objective.size(); ++k) CHECK(rec.best_objective[k] <= rec.best_objective[k - 1]);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(rec.profile[k] >= -0.5);
    CHECK(rec.profile[k] <= 0.25);
  }
}

TEST_CASE("attack beats random probing") {
  // Default widths: the narrow test net has mostly dead embedding units at init.
  const auto m = nn::build_model(8, 3, 5);
  Rng rng(8);
  std::vector<double> x0(8);
  for (auto& v : x0) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  Matrix row(1, 8);
  for (int k = 0; k < 8; ++k) row(0, k) = x0[static_cast<std::size_t>(k)];
  const Matrix e = nn::embed(m, row);
  const std::vector<double> target(e.data(), e.data() + e.size());

  const auto rec = reconstruct_profile(m, target, unit_box(8), AttackConfig{}, rng);

  Rng probe_rng(1234);
  double best_probe = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 1000; ++t) {
    Matrix p(1, 8);
    for (int k = 0; k < 8; ++k) p(0, k) = std::uniform_real_distribution<double>(0.0, 1.0)(probe_rng);
    const Matrix pe = nn::embed(m, p);
    double obj = 0.0;
    for (Eigen::Index k = 0; k < pe.size(); ++k) obj += std::pow(pe.data()[k] - target[static_cast<std::size_t>(k)], 2);
    best_probe = std::min(best_probe, obj);
  }
  CHECK(rec.objective <= best_probe);
}

TEST_CASE("attack is deterministic and validates input") {
  const auto m = nn::build_model(8, 3, 2, narrow_cnn());
  std::vector<double> target(8, 0.1);
  AttackConfig cfg;
  cfg.steps = 30;
  Rng a(1), b(1);
  CHECK(reconstruct_profile(m, target, unit_box(8), cfg, a).profile ==
        reconstruct_profile(m, target, unit_box(8), cfg, b).profile);
  CHECK_THROWS_AS(reconstruct_profile(m, std::vector<double>(3, 0.0), unit_box(8), cfg, a), std::invalid_argument);
  CHECK_THROWS_AS(reconstruct_profile(m, target, unit_box(5), cfg, a), std::invalid_argument);
  std::vector<double> bad(8, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(reconstruct_profile(m, bad, unit_box(8), cfg, a), std::runtime_error);
}

TEST_CASE("class mean profile") {
  Dataset d;
  d.features = Matrix(4, 2);
  d.features << 0, 2,  //
      2, 0,            //
      5, 5,            //
      7, 1;
  d.labels = {0, 0, 1, 2};
  d.class_names = {"a", "b", "c"};
  CHECK(class_mean_profile(d, 0) == std::vector<double>{1, 1});
  CHECK(class_mean_profile(d, 1) == std::vector<double>{5, 5});
  CHECK_THROWS_AS(class_mean_profile(d, 3), std::invalid_argument);

  const std::vector<std::size_t> shuffled{3, 1, 2, 0};
  CHECK(class_mean_profile(d.subset(shuffled), 0) == std::vector<double>{1, 1});
}

TEST_CASE("random baseline") {
  Rng rng(11);
  const std::vector<double> mean{0.5};
  CHECK(std::abs(random_baseline_mse(unit_box(1), mean, 100000, rng) - 1.0 / 12) <= 0.005);
  const FeatureBounds degenerate{{2.0, 3.0}, {2.0, 3.0}};
  CHECK(random_baseline_mse(degenerate, std::vector<double>{2.0, 3.0}, 10, rng) == 0.0);
  CHECK_THROWS_AS(random_baseline_mse(unit_box(1), mean, 0, rng), std::invalid_argument);
}

TEST_CASE("psnr closed forms") {
  const std::vector<double> ranges{2.0, 10.0, 0.0};
  const auto r = psnr(std::vector<double>{4.0, 1.0, 3.0}, ranges);
  CHECK(r.per_feature[0] == doctest::Approx(0.0));
  CHECK(r.per_feature[1] == doctest::Approx(20.0));
  CHECK(std::isnan(r.per_feature[2]));
  CHECK(r.excluded == std::vector<int>{2});
  CHECK(r.mean == doctest::Approx(10.0));
  CHECK(std::isinf(psnr(std::vector<double>{0.0}, std::vector<double>{1.0}).mean));
  CHECK_THROWS_AS(psnr(std::vector<double>{1.0}, std::vector<double>{0.0}), std::invalid_argument);
}

TEST_CASE("audit entries use raw units and shared targets") {
  const Dataset raw = synthesize_gaussian(3, 8, 40, 6.0, 3);
  const Dataset d = preprocess(raw, Normalization::MinMax);
  const auto m = nn::build_model(8, 3, 1, narrow_cnn());
  const std::vector<Dataset> shards{d.subset(std::vector<std::size_t>{0, 1, 2, 40, 41, 80}), d};
  std::vector<PrototypeSet> protos;
  for (const auto& s : shards) protos.push_back(compute_local_prototypes(nn::embed(m, s.features), s.labels, 3));
  const std::vector<nn::ModelParams> models{m, m};

  AuditConfig cfg;
  cfg.attack.steps = 100;
  cfg.attack.restarts = 1;
  cfg.baseline_trials = 50;
  cfg.seed = 9;
  const auto rep = audit_participants(models, protos, shards, d, cfg);
  CHECK(rep.entries.size() == 6);
  const auto again = audit_participants(models, protos, shards, d, cfg);
  for (std::size_t k = 0; k < rep.entries.size(); ++k) {
    CHECK(rep.entries[k].profile == again.entries[k].profile);
    CHECK(rep.entries[k].random_mse == again.entries[k].random_mse);
  }

  const FeatureBounds rb = raw_bounds(d);
  for (const auto& e : rep.entries) {
    CHECK(e.reconstructed_mse >= 0.0);
    for (std::size_t k = 0; k < e.profile.size(); ++k) {
      CHECK(e.profile[k] >= rb.lower[k] - 1e-9);
      CHECK(e.profile[k] <= rb.upper[k] + 1e-9);
    }
    // raw-unit class mean recomputed from unnormalized data
    const auto& shard = shards[static_cast<std::size_t>(e.participant)];
    std::vector<double> expected(8, 0.0);
    int n = 0;
    for (std::size_t r = 0; r < shard.size(); ++r) {
      if (shard.labels[r] != e.cls) continue;
      const auto row = shard.raw_row(static_cast<Eigen::Index>(r));
      for (std::size_t k = 0; k < 8; ++k) expected[k] += row[k];
      ++n;
    }
    for (auto& v : expected) v /= n;
    CHECK(e.reconstructed_mse == doctest::Approx(mean_squared_error(e.profile, expected)));
  }

  const auto bars = privacy_bars(rep);
  REQUIRE(bars.size() == 2);
  CHECK(bars[1].participant == 1);
  CHECK(bars[1].random_mse == doctest::Approx((rep.entries[3].random_mse + rep.entries[4].random_mse +
                                               rep.entries[5].random_mse) / 3));
}
