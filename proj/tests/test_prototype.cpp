#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "protean/prototype.hpp"

using namespace protean;

namespace {

Matrix random_embeddings(int n, int d, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

std::vector<int> random_labels(int n, int k, Rng& rng) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = u(rng);
  return y;
}

PrototypeSet make_set(int k, int d, std::initializer_list<std::pair<int, std::vector<double>>> entries) {
  PrototypeSet p(k, d);
  for (const auto& [cls, v] : entries) {
    std::copy(v.begin(), v.end(), p.vector(cls).begin());
    p.support[static_cast<std::size_t>(cls)] = 1;
  }
  return p;
}

}  // namespace

TEST_CASE("local prototypes are class means") {
  Matrix e(1, 2);
  e << 3.0, -1.0;
  const auto one = compute_local_prototypes(e, std::vector<int>{0}, 2);
  CHECK(one.present(0));
  CHECK_FALSE(one.present(1));
  CHECK(one.vector(0)[0] == 3.0);
  CHECK(one.vector(0)[1] == -1.0);

  Matrix e2(2, 2);
  e2 << 0, 0, 2, 2;
  const auto two = compute_local_prototypes(e2, std::vector<int>{1, 1}, 3);
  CHECK(two.vector(1)[0] == 1.0);
  CHECK(two.vector(1)[1] == 1.0);
  CHECK(two.support[1] == 2);
}

TEST_CASE("accumulator merge equals the concatenated batch") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_embeddings(13, 4, rng);
    const Matrix b = random_embeddings(7, 4, rng);
    const auto ya = random_labels(13, 3, rng);
    const auto yb = random_labels(7, 3, rng);
    PrototypeAccumulator acc_a(3, 4);
    PrototypeAccumulator acc_b(3, 4);
    acc_a.add(a, ya);
    acc_b.add(b, yb);
    acc_a.merge(acc_b);
    const auto merged = acc_a.finish();

    Matrix ab(20, 4);
    ab << a, b;
    std::vector<int> yab = ya;
    yab.insert(yab.end(), yb.begin(), yb.end());
    // recompute directly from the concatenation
    for (int j = 0; j < 3; ++j) {
      std::vector<double> mean(4, 0.0);
      int n = 0;
      for (int i = 0; i < 20; ++i)
        if (yab[static_cast<std::size_t>(i)] == j) {
          for (int k = 0; k < 4; ++k) mean[static_cast<std::size_t>(k)] += ab(i, k);
          ++n;
        }
      CHECK(merged.present(j) == (n > 0));
      if (n == 0) continue;
      for (int k = 0; k < 4; ++k) CHECK(std::abs(merged.vector(j)[static_cast<std::size_t>(k)] - mean[static_cast<std::size_t>(k)] / n) < 1e-12);
    }
  }
}

TEST_CASE("prototype of a batch is the support-weighted mean of sub-batch prototypes") {
  Rng rng(2);
  const Matrix a = random_embeddings(30, 5, rng);
  const auto y = random_labels(30, 4, rng);
  const auto whole = compute_local_prototypes(a, y, 4);
  const auto p1 = compute_local_prototypes(a.topRows(11), std::span<const int>(y.data(), 11), 4);
  const auto p2 = compute_local_prototypes(a.bottomRows(19), std::span<const int>(y.data() + 11, 19), 4);
  for (int j = 0; j < 4; ++j) {
    if (!whole.present(j)) continue;
    const double n1 = static_cast<double>(p1.support[static_cast<std::size_t>(j)]);
    const double n2 = static_cast<double>(p2.support[static_cast<std::size_t>(j)]);
    for (std::size_t k = 0; k < 5; ++k) {
      const double v1 = p1.present(j) ? p1.vector(j)[k] : 0.0;
      const double v2 = p2.present(j) ? p2.vector(j)[k] : 0.0;
      CHECK(std::abs(whole.vector(j)[k] - (n1 * v1 + n2 * v2) / (n1 + n2)) < 1e-12);
    }
  }
}

TEST_CASE("global aggregation") {
  const auto v = make_set(2, 2, {{0, {1.0, 2.0}}, {1, {0.0, 0.0}}});
  const auto w = make_set(2, 2, {{0, {3.0, 6.0}}, {1, {2.0, -2.0}}});
  const std::vector<PrototypeSet> pair{v, w};
  const auto g = aggregate_global_prototypes(pair);
  CHECK(g.vector(0)[0] == 2.0);
  CHECK(g.vector(0)[1] == 4.0);
  CHECK(g.vector(1)[1] == -1.0);

  SUBCASE("single contributor keeps its vector") {
    const auto a = make_set(3, 2, {{0, {1.0, 1.0}}});
    const auto b = make_set(3, 2, {{2, {5.0, 7.0}}});
    const auto c = make_set(3, 2, {{0, {3.0, 3.0}}});
    const std::vector<PrototypeSet> three{a, b, c};
    const auto gg = aggregate_global_prototypes(three);
    CHECK(gg.vector(2)[0] == 5.0);
    CHECK(gg.vector(2)[1] == 7.0);
    CHECK_FALSE(gg.present(1));
    const auto literal = aggregate_global_prototypes(three, PrototypeDivisor::Participants);
    CHECK(literal.vector(2)[0] == doctest::Approx(5.0 / 3.0));
    CHECK(literal.vector(0)[0] == doctest::Approx(4.0 / 3.0));
  }
  SUBCASE("permutation and idempotence") {
    Rng rng(3);
    std::vector<PrototypeSet> locals;
    for (int i = 0; i < 5; ++i) {
      auto y = random_labels(9, 4, rng);
      locals.push_back(compute_local_prototypes(random_embeddings(9, 3, rng), y, 4));
    }
    const auto base = aggregate_global_prototypes(locals);
    std::vector<PrototypeSet> shuffled = locals;
    std::reverse(shuffled.begin(), shuffled.end());
    const auto perm = aggregate_global_prototypes(shuffled);
    for (std::size_t i = 0; i < base.vectors.size(); ++i) CHECK(std::abs(base.vectors[i] - perm.vectors[i]) < 1e-12);
    CHECK(base.support == perm.support);
    std::vector<PrototypeSet> copies(4, locals[0]);
    const auto same = aggregate_global_prototypes(copies);
    for (std::size_t i = 0; i < same.vectors.size(); ++i) CHECK(std::abs(same.vectors[i] - locals[0].vectors[i]) < 1e-12);
  }
}

TEST_CASE("alignment loss") {
  const auto g = make_set(2, 2, {{0, {0.0, 0.0}}});
  CHECK(alignment_loss(g, g).value == 0.0);
  const auto l = make_set(2, 2, {{0, {1.0, 0.0}}, {1, {5.0, 5.0}}});
  CHECK(alignment_loss(l, g).value == 1.0);  // class 1 absent globally

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto y = random_labels(12, 3, rng);
    auto local = compute_local_prototypes(random_embeddings(12, 4, rng), y, 3);
    auto glob = compute_local_prototypes(random_embeddings(6, 4, rng), random_labels(6, 3, rng), 3);
    const auto analytic = alignment_loss(local, glob).gradient;
    const auto numeric = oracle::central_difference(
        [&](const std::vector<double>& v) {
          PrototypeSet p = local;
          p.vectors = v;
          return alignment_loss(p, glob).value;
        },
        local.vectors, 1e-5);
    for (std::size_t i = 0; i < analytic.size(); ++i) CHECK(std::abs(analytic[i] - numeric[i]) < 1e-6);
  }
}

TEST_CASE("dp noise") {
  Rng rng(5);
  auto p = make_set(3, 4, {{0, {1, 2, 3, 4}}, {2, {0, 0, 0, 0}}});
  CHECK(add_dp_noise(p, 0.0, rng) == p);
  const auto noisy = add_dp_noise(p, 0.5, rng);
  CHECK_FALSE(noisy.present(1));
  CHECK(noisy.support == p.support);
  CHECK(noisy.vectors[4] == 0.0);
  CHECK_THROWS_AS(add_dp_noise(p, -1.0, rng), std::invalid_argument);

  PrototypeSet big(1000, 100);
  for (auto& s : big.support) s = 1;
  const auto n = add_dp_noise(big, 1.0, rng);
  double mean = 0.0;
  for (double v : n.vectors) mean += v;
  mean /= static_cast<double>(n.vectors.size());
  double var = 0.0;
  for (double v : n.vectors) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n.vectors.size()));
  CHECK(sd >= 0.98);
  CHECK(sd <= 1.02);
}

TEST_CASE("nearest prototype classification") {
  auto g = make_set(5, 2, {{1, {1.0, 0.0}}, {3, {0.0, 5.0}}, {4, {-1.0, 0.0}}});
  CHECK(nearest_prototype_classify(std::vector<double>{0.0, 5.0}, g) == 3);
  CHECK(nearest_prototype_classify(std::vector<double>{0.0, 0.0}, g) == 1);  // tie 1 vs 4
  CHECK_THROWS_AS(nearest_prototype_classify(std::vector<double>{0.0, 0.0}, PrototypeSet(3, 2)),
                  std::invalid_argument);

  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto y = random_labels(20, 6, rng);
    const auto protos = compute_local_prototypes(random_embeddings(20, 3, rng), y, 6);
    const Matrix q = random_embeddings(10, 3, rng);
    const auto got = nearest_prototype_classify(q, protos);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      int best = -1;
      double bd = std::numeric_limits<double>::infinity();
      for (int j = 0; j < 6; ++j) {
        if (!protos.present(j)) continue;
        double dist = 0.0;
        for (int k = 0; k < 3; ++k) dist += std::pow(q(i, k) - protos.vector(j)[static_cast<std::size_t>(k)], 2);
        if (dist < bd) {
          bd = dist;
          best = j;
        }
      }
      CHECK(got[static_cast<std::size_t>(i)] == best);
      // scale equivariance
      PrototypeSet scaled = protos;
      for (auto& v : scaled.vectors) v *= 3.5;
      const Matrix qs = q.row(i) * 3.5;
      CHECK(nearest_prototype_classify(qs, scaled)[0] == best);
    }
  }
}
