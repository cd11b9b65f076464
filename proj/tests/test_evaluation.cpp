#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "protean/evaluation.hpp"
#include "protean/rng.hpp"

using namespace protean;

TEST_CASE("metrics from a known confusion matrix") {
  // true:  0 0 0 0 1 1 2 2 2 2
  // pred:  0 0 1 0 1 0 2 2 1 2
  const std::vector<int> y{0, 0, 0, 0, 1, 1, 2, 2, 2, 2};
  const std::vector<int> p{0, 0, 1, 0, 1, 0, 2, 2, 1, 2};
  const auto r = evaluate(p, y, 3);
  CHECK(r.confusion[0] == std::vector<std::size_t>{3, 1, 0});
  CHECK(r.confusion[1] == std::vector<std::size_t>{1, 1, 0});
  CHECK(r.confusion[2] == std::vector<std::size_t>{0, 1, 3});
  CHECK(r.accuracy == doctest::Approx(0.7));
  CHECK(r.per_class_accuracy[0] == doctest::Approx(0.75));
  CHECK(r.per_class_accuracy[1] == doctest::Approx(0.5));
  CHECK(r.macro_accuracy == doctest::Approx((0.75 + 0.5 + 0.75) / 3));
  // precision: 3/4, 1/3, 3/3
  CHECK(r.macro_precision == doctest::Approx((0.75 + 1.0 / 3 + 1.0) / 3));
  const double f0 = 0.75, f1 = 2 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5), f2 = 2 * 1.0 * 0.75 / 1.75;
  CHECK(r.macro_f1 == doctest::Approx((f0 + f1 + f2) / 3));
  CHECK(r.zero_division_classes.empty());
  CHECK(r.samples == 10);
}

TEST_CASE("perfect and constant predictors") {
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  const auto perfect = evaluate(y, y, 3);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.macro_accuracy == 1.0);
  CHECK(perfect.macro_f1 == 1.0);

  const std::vector<int> zeros(6, 0);
  const auto constant = evaluate(zeros, y, 3);
  CHECK(constant.macro_accuracy == doctest::Approx(1.0 / 3));
  CHECK(constant.zero_division_classes == std::vector<int>{1, 2});
  CHECK(constant.macro_precision == doctest::Approx((2.0 / 6) / 3));
}

TEST_CASE("classes absent from the test set are excluded") {
  const std::vector<int> y{0, 0, 1, 1};
  const std::vector<int> p{0, 0, 1, 3};
  const auto r = evaluate(p, y, 4);
  CHECK(r.evaluated_classes == std::vector<int>{0, 1});
  CHECK(r.macro_accuracy == doctest::Approx(0.75));
  // class 3 is never a true class, so its zero precision does not count
  CHECK(r.macro_precision == doctest::Approx(1.0));
}

TEST_CASE("weighted averaging") {
  const std::vector<int> y{0, 0, 0, 1};
  const std::vector<int> p{0, 0, 0, 0};
  const auto r = evaluate(p, y, 2, "global", Averaging::Weighted);
  // class 0: precision 3/4, recall 1; class 1: no positives
  const double f0 = 2 * 0.75 / 1.75;
  CHECK(r.macro_f1 == doctest::Approx(0.75 * f0));
  CHECK(r.macro_precision == doctest::Approx(0.75 * 0.75));
  CHECK(r.macro_accuracy == doctest::Approx(0.5));
}

TEST_CASE("metric input validation") {
  const std::vector<int> y{0, 1};
  CHECK_THROWS_AS(evaluate(std::vector<int>{0}, y, 2), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(std::vector<int>{}, std::vector<int>{}, 2), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(std::vector<int>{0, 2}, y, 2), std::out_of_range);
}

TEST_CASE("rare class selection") {
  const std::vector<std::size_t> counts{50, 3, 0, 3, 10};
  CHECK(select_rare_classes(counts) == std::array<int, 2>{2, 1});
  const std::vector<std::size_t> flat{7, 7, 7};
  CHECK(select_rare_classes(flat) == std::array<int, 2>{0, 1});
  CHECK_THROWS_AS(select_rare_classes(std::vector<std::size_t>{1}), std::invalid_argument);
}

TEST_CASE("mann-whitney exact path equals enumeration") {
  Rng rng(7);
  std::uniform_int_distribution<int> small(0, 4);  // coarse values to force ties
  std::normal_distribution<double> g(0.0, 1.0);
  for (int na = 1; na <= 9; ++na) {
    for (int nb = 1; na + nb <= 10; ++nb) {
      for (int trial = 0; trial < 4; ++trial) {
        std::vector<double> a(static_cast<std::size_t>(na)), b(static_cast<std::size_t>(nb));
        for (auto& v : a) v = trial % 2 ? small(rng) : g(rng) + 0.5;
        for (auto& v : b) v = trial % 2 ? small(rng) : g(rng);
        const auto res = mann_whitney_u(a, b);
        CHECK(res.exact);
        CHECK(res.u == doctest::Approx(oracle::pairwise_u(a, b)));
        CHECK(res.p_value == doctest::Approx(oracle::enumerate_mwu_pvalue(a, b)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("mann-whitney known values") {
  const std::vector<double> a{5, 6, 7};
  const std::vector<double> b{1, 2, 3};
  const auto r = mann_whitney_u(a, b);
  CHECK(r.u == 9.0);
  CHECK(r.p_value == doctest::Approx(1.0 / 20));
  const auto rev = mann_whitney_u(b, a);
  CHECK(rev.u == 0.0);
  CHECK(rev.p_value == 1.0);
}

TEST_CASE("mann-whitney normal approximation") {
  std::vector<double> a, b;
  for (int k = 0; k < 15; ++k) {
    a.push_back(10.0 + k);
    b.push_back(static_cast<double>(k));
  }
  const auto r = mann_whitney_u(a, b);
  CHECK_FALSE(r.exact);
  CHECK(r.u == doctest::Approx(oracle::pairwise_u(a, b)));
  // values 10..14 appear in both samples: five ties of size two
  CHECK(r.u == 212.5);
  const double z = (212.5 - 112.5 - 0.5) / std::sqrt(225.0 / 12.0 * (31.0 - 30.0 / (30.0 * 29.0)));
  CHECK(r.p_value == doctest::Approx(0.5 * std::erfc(z / std::sqrt(2.0))));
  CHECK(r.p_value < 1e-4);

  const std::vector<double> same(20, 1.0);
  CHECK(mann_whitney_u(same, same).p_value == 1.0);
  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{}, same), std::invalid_argument);
}

TEST_CASE("rare class and zero-shot reports") {
  const std::vector<std::vector<std::size_t>> counts{{10, 0, 2}, {4, 5, 6}};
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  const auto good = evaluate(y, y, 3, "p");
  const auto bad = evaluate(std::vector<int>{0, 0, 0, 0, 0, 0}, y, 3, "p");

  const auto rare = rare_class_report(counts, {{"fed", {good, bad}}, {"local", {bad, bad}}});
  REQUIRE(rare.rows.size() == 2);
  CHECK(rare.rows[0].classes == std::array<int, 2>{1, 2});
  CHECK(rare.rows[0].train_counts == std::array<std::size_t, 2>{0, 2});
  CHECK(rare.rows[0].accuracy.at("fed") == 1.0);
  CHECK(rare.rows[1].classes == std::array<int, 2>{0, 1});
  CHECK(rare.rows[1].accuracy.at("fed") == 0.5);
  CHECK(rare.mean_accuracy.at("fed") == 0.75);
  CHECK(rare.mean_accuracy.at("local") == 0.25);

  const std::vector<MetricsReport> local{bad, bad};
  const std::vector<MetricsReport> fed{good, good};
  const auto zs = zero_shot_report(counts, local, fed);
  REQUIRE(zs.rows.size() == 1);
  CHECK(zs.rows[0].participant == 0);
  CHECK(zs.rows[0].cls == 1);
  CHECK(zs.mean_local_only == 0.0);
  CHECK(zs.mean_federated == 1.0);
}
