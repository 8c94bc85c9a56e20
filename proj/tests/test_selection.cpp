#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crisp/selection.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>

using namespace crisp;

namespace {

FeatureStats make_stats(int layer, std::vector<long> ct, std::vector<long> cr,
                        std::vector<double> mt, std::vector<double> mr, long tt = 100,
                        long tr = 100) {
  FeatureStats s(layer, int(ct.size()));
  s.count_target = std::move(ct);
  s.count_retain = std::move(cr);
  s.mass_target = std::move(mt);
  s.mass_retain = std::move(mr);
  s.tokens_seen_target = tt;
  s.tokens_seen_retain = tr;
  return s;
}

// Independent brute-force reference: enumerate all features, sort by
// (delta desc, index asc), cut to k, filter by ratio.
std::vector<int> brute_force_salient(const FeatureStats& s, int k, double tau, double eps) {
  std::vector<std::pair<long, int>> order;
  for (int i = 0; i < s.n_features(); ++i)
    order.push_back({s.count_target[size_t(i)] - s.count_retain[size_t(i)], i});
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  for (int j = 0; j < int(order.size()) && j < k; ++j) {
    const int i = order[size_t(j)].second;
    const double mt = s.mass_target[size_t(i)];
    const double rho = mt == 0.0 ? 0.0 : mt / (s.mass_retain[size_t(i)] + eps);
    if (rho >= tau) out.push_back(i);
  }
  return out;
}

}  // namespace

TEST_CASE("count diff and ratio basics") {
  auto s = make_stats(0, {10, 0, 5}, {2, 0, 9}, {4.0, 0.0, 1.0}, {1.0, 0.0, 1.0});
  auto d = count_diff(s);
  CHECK(d == std::vector<long>{8, 0, -4});
  auto rho = activation_ratio(s, 1e-8);
  CHECK(rho[0] == doctest::Approx(4.0 / (1.0 + 1e-8)));
  CHECK(rho[1] == 0.0);  // zero target mass pins the ratio to zero
  CHECK(rho[2] == doctest::Approx(1.0 / (1.0 + 1e-8)));
  CHECK_THROWS_AS(activation_ratio(s, 0.0), ConfigError);
}

TEST_CASE("select salient hand examples") {
  // Feature 0 dominates on counts and ratio; feature 2 is retain-heavy.
  auto s = make_stats(0, {50, 8, 5}, {2, 7, 40}, {30.0, 2.0, 1.0}, {1.0, 1.9, 20.0});
  CHECK(select_salient(s, 2, 3.0, 1e-8) == std::vector<int>{0});
  // tau below every ratio keeps the top-k order intact
  CHECK(select_salient(s, 2, 0.01, 1e-8) == std::vector<int>{0, 1});
  // ties break to the lower feature index
  auto t = make_stats(0, {5, 5, 5}, {0, 0, 0}, {9.0, 9.0, 9.0}, {0.0, 0.0, 0.0});
  CHECK(select_salient(t, 2, 1.0, 1e-8) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(select_salient(s, 0, 3.0, 1e-8), ConfigError);
  CHECK_THROWS_AS(select_salient(s, 2, 0.0, 1e-8), ConfigError);
}

TEST_CASE("select salient matches brute force on 1000 random tables") {
  std::mt19937_64 gen(20240817);
  const double taus[] = {0.5, 1.0, 3.0, 10.0};
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + int(gen() % 64);
    FeatureStats s(0, n);
    s.tokens_seen_target = 64;
    s.tokens_seen_retain = 64;
    std::uniform_real_distribution<double> mass(0.0, 10.0);
    for (int i = 0; i < n; ++i) {
      s.count_target[size_t(i)] = long(gen() % 64);
      s.count_retain[size_t(i)] = long(gen() % 64);
      s.mass_target[size_t(i)] = s.count_target[size_t(i)] ? mass(gen) : 0.0;
      s.mass_retain[size_t(i)] = s.count_retain[size_t(i)] ? mass(gen) : 0.0;
    }
    const int k = 1 + int(gen() % 8);
    const double tau = taus[gen() % 4];
    INFO("trial " << trial << " n=" << n << " k=" << k << " tau=" << tau);
    REQUIRE(select_salient(s, k, tau, 1e-8) == brute_force_salient(s, k, tau, 1e-8));
  }
}

TEST_CASE("merge is associative and commutative on totals") {
  std::mt19937_64 gen(7);
  auto rand_stats = [&] {
    FeatureStats s(1, 8);
    s.tokens_seen_target = long(gen() % 100);
    s.tokens_seen_retain = long(gen() % 100);
    for (int i = 0; i < 8; ++i) {
      s.count_target[size_t(i)] = long(gen() % 50);
      s.count_retain[size_t(i)] = long(gen() % 50);
      s.mass_target[size_t(i)] = double(gen() % 1000) / 8.0;
      s.mass_retain[size_t(i)] = double(gen() % 1000) / 8.0;
    }
    return s;
  };
  FeatureStats a = rand_stats(), b = rand_stats(), c = rand_stats();

  FeatureStats ab = a;
  ab.merge(b);
  FeatureStats ba = b;
  ba.merge(a);
  CHECK(ab.count_target == ba.count_target);
  CHECK(ab.mass_retain == ba.mass_retain);
  CHECK(ab.tokens_seen_target == ba.tokens_seen_target);

  FeatureStats ab_c = ab;
  ab_c.merge(c);
  FeatureStats bc = b;
  bc.merge(c);
  FeatureStats a_bc = a;
  a_bc.merge(bc);
  CHECK(ab_c.count_retain == a_bc.count_retain);
  for (int i = 0; i < 8; ++i)
    CHECK(ab_c.mass_target[size_t(i)] == doctest::Approx(a_bc.mass_target[size_t(i)]));

  FeatureStats other_layer(2, 8);
  other_layer.count_target[0] = 1;  // non-empty so the layer check engages
  FeatureStats x = a;
  CHECK_THROWS_AS(x.merge(other_layer), InputError);
}

TEST_CASE("selection is invariant to uniform mass scaling") {
  auto s = make_stats(0, {50, 8, 5, 1}, {2, 7, 40, 1}, {30.0, 2.0, 1.0, 0.5},
                      {1.0, 1.9, 20.0, 0.1});
  auto base = select_salient(s, 3, 3.0, 1e-12);
  FeatureStats scaled = s;
  for (auto& m : scaled.mass_target) m *= 1000.0;
  for (auto& m : scaled.mass_retain) m *= 1000.0;
  CHECK(select_salient(scaled, 3, 3.0, 1e-12) == base);
}

TEST_CASE("classification and its symmetry") {
  ClassifyThresholds th;  // 0.05 / 0.01
  auto s = make_stats(0, {50, 0, 50, 2}, {0, 50, 50, 2}, {1, 0, 1, 1}, {0, 1, 1, 1}, 100, 100);
  auto cls = classify_features(s, th);
  CHECK(cls[0] == FeatureClass::target);
  CHECK(cls[1] == FeatureClass::benign);
  CHECK(cls[2] == FeatureClass::shared);
  CHECK(cls[3] == FeatureClass::inactive);

  // Swapping corpora swaps target and benign, fixes shared/inactive.
  FeatureStats sw = s;
  std::swap(sw.count_target, sw.count_retain);
  std::swap(sw.mass_target, sw.mass_retain);
  std::swap(sw.tokens_seen_target, sw.tokens_seen_retain);
  auto cls2 = classify_features(sw, th);
  CHECK(cls2[0] == FeatureClass::benign);
  CHECK(cls2[1] == FeatureClass::target);
  CHECK(cls2[2] == FeatureClass::shared);
  CHECK(cls2[3] == FeatureClass::inactive);
}

TEST_CASE("stats csv and salient json round trip; scatter export") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "crisp_sel_test";
  fs::create_directories(dir);

  std::vector<FeatureStats> all;
  all.push_back(make_stats(2, {3, 0}, {1, 2}, {1.5, 0.0}, {0.25, 2.0}, 10, 12));
  all.push_back(make_stats(3, {0, 7}, {0, 1}, {0.0, 9.0}, {0.0, 0.5}, 10, 12));
  const std::string stats_path = (dir / "stats.csv").string();
  write_stats_csv(stats_path, all, "meta");
  auto back = read_stats_csv(stats_path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].layer == 2);
  CHECK(back[0].count_target == all[0].count_target);
  CHECK(back[0].tokens_seen_retain == 12);
  CHECK(back[1].mass_target[1] == doctest::Approx(9.0));

  SalientSet s;
  s.k = 5;
  s.tau = 3.0;
  s.eps = 1e-8;
  s.layers[2] = {4, 1};
  s.layers[3] = {};
  const std::string sal_path = (dir / "salient.json").string();
  write_salient_json(sal_path, s, 1, 2);
  auto s2 = read_salient_json(sal_path);
  CHECK(s2.k == 5);
  CHECK(s2.layers.at(2) == std::vector<int>{4, 1});
  CHECK(s2.layers.at(3).empty());

  auto cls = classify_features(all[0]);
  export_scatter(all[0], cls, (dir / "sc.csv").string(), (dir / "sc.svg").string());
  CHECK(fs::file_size(dir / "sc.csv") > 0);
  CHECK(fs::file_size(dir / "sc.svg") > 0);
  std::vector<FeatureClass> wrong(1);
  CHECK_THROWS_AS(
      export_scatter(all[0], wrong, (dir / "x.csv").string(), (dir / "x.svg").string()),
      InputError);
}
