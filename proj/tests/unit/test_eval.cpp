#include <cmath>
#include <filesystem>

#include "../common/oracles.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "rain/eval.hpp"

using namespace rain;

namespace {

Matrix to_matrix(const oracle::Table& t) {
  Matrix m(static_cast<int>(t.size()), static_cast<int>(t.front().size()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = t[i][j];
  return m;
}

std::vector<ImageRecord> random_records(int n, int ids, Rng& rng, int side = 32) {
  std::vector<ImageRecord> out;
  for (int i = 0; i < n; ++i) {
    ImageRecord r;
    r.pixels = test::random_image(side, side, rng);
    r.hr_pixels = r.pixels;
    r.identity = i % ids;
    out.push_back(r);
  }
  return out;
}

std::vector<double> snapshot(const RainModel& m) {
  std::vector<double> out;
  for (const Param* p : m.all_parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

}  // namespace

TEST_CASE("distance matrix") {
  Matrix q(1, 2), g(2, 2);
  q << 0, 0;
  g << 3, 4, 0, 0;
  const Matrix d = distance_matrix(q, g);
  CHECK(d(0, 0) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(d(0, 1) == 0.0);
  CHECK_THROWS_AS(distance_matrix(q, Matrix(2, 3)), std::invalid_argument);

  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix a(5, 4), b(7, 4);
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 4; ++k) a(i, k) = n(rng);
  for (int j = 0; j < 7; ++j)
    for (int k = 0; k < 4; ++k) b(j, k) = n(rng);
  const Matrix ab = distance_matrix(a, b);
  const Matrix ba = distance_matrix(b, a);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 7; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += (a(i, k) - b(j, k)) * (a(i, k) - b(j, k));
      CHECK(std::abs(ab(i, j) - std::sqrt(s)) <= 1e-10);
      CHECK(ab(i, j) == ba(j, i));
      CHECK(ab(i, j) > 0.0);
    }
  }
}

TEST_CASE("cmc and mAP on a hand-built 3 x 4 instance") {
  // gallery identities 10, 11, 12, 13
  Matrix d(3, 4);
  d << 0.1, 0.5, 0.3, 0.9,   // query id 10: correct first
      0.2, 0.4, 0.1, 0.3,    // query id 11: order 12, 10, 13, 11 -> position 4
      0.7, 0.2, 0.2, 0.6;    // query id 12: tie with 11, index order puts 11 first -> position 2
  const std::vector<int> qid{10, 11, 12}, gid{10, 11, 12, 13};
  const std::vector<int> ranks{1, 2, 3, 4};
  const auto c = cmc(d, qid, gid, ranks);
  CHECK(c.at(1) == doctest::Approx(100.0 / 3.0).epsilon(1e-14));
  CHECK(c.at(2) == doctest::Approx(200.0 / 3.0).epsilon(1e-14));
  CHECK(c.at(3) == doctest::Approx(200.0 / 3.0).epsilon(1e-14));
  CHECK(c.at(4) == 100.0);
  CHECK(map_score(d, qid, gid) == doctest::Approx((1.0 + 0.25 + 0.5) / 3.0).epsilon(1e-14));

  oracle::Table t{{0.1, 0.5, 0.3, 0.9}, {0.2, 0.4, 0.1, 0.3}, {0.7, 0.2, 0.2, 0.6}};
  CHECK(c == oracle::cmc(t, qid, gid, ranks));
  CHECK(std::abs(map_score(d, qid, gid) - oracle::mean_ap(t, qid, gid)) <= 1e-15);
}

TEST_CASE("cmc and mAP match brute force on random instances") {
  Rng rng(2);
  const std::vector<int> ranks{1, 5, 10, 20};
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = oracle::random_instance(rng);
    const Matrix d = to_matrix(in.dist);
    const auto got = cmc(d, in.qid, in.gid, ranks);
    const auto want = oracle::cmc(in.dist, in.qid, in.gid, ranks);
    for (int r : ranks) CHECK(std::abs(got.at(r) - want.at(r)) <= 1e-10);
    CHECK(std::abs(map_score(d, in.qid, in.gid) - oracle::mean_ap(in.dist, in.qid, in.gid)) <= 1e-10);
  }
}

TEST_CASE("cmc invariants") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto in = oracle::random_instance(rng, 20, 30);
    const Matrix d = to_matrix(in.dist);
    std::vector<int> ranks(d.cols());
    std::iota(ranks.begin(), ranks.end(), 1);
    const auto c = cmc(d, in.qid, in.gid, ranks);
    for (int k = 1; k < static_cast<int>(d.cols()); ++k) CHECK(c.at(k) <= c.at(k + 1));
    CHECK(c.at(static_cast<int>(d.cols())) == 100.0);
    const double m = map_score(d, in.qid, in.gid);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
}

TEST_CASE("perfect and second-place embeddings") {
  const int g = 6;
  std::vector<int> gid(g), qid(g);
  std::iota(gid.begin(), gid.end(), 0);
  std::iota(qid.begin(), qid.end(), 0);
  Matrix perfect = Matrix::Constant(g, g, 1.0);
  for (int i = 0; i < g; ++i) perfect(i, i) = 0.0;
  const std::vector<int> r1{1};
  CHECK(cmc(perfect, qid, gid, r1).at(1) == 100.0);
  CHECK(map_score(perfect, qid, gid) == 1.0);
  CHECK(rank_list(perfect, gid, 3, 1).front() == 3);

  Matrix second = Matrix::Constant(g, g, 2.0);
  for (int i = 0; i < g; ++i) second(i, i) = 1.0, second(i, (i + 1) % g) = 0.5;
  CHECK(map_score(second, qid, gid) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(cmc(second, qid, gid, r1).at(1) == 0.0);
}

TEST_CASE("protocol errors") {
  Matrix d(1, 2);
  d << 0.1, 0.2;
  const std::vector<int> gid{0, 1};
  const std::vector<int> missing{7};
  const std::vector<int> r1{1};
  CHECK_THROWS_AS(cmc(d, missing, gid, r1), ProtocolError);
  CHECK_THROWS_AS(map_score(d, missing, gid), ProtocolError);
  const std::vector<int> q0{0};
  const std::vector<int> r0{0};
  CHECK_THROWS_AS(cmc(d, q0, gid, r0), std::invalid_argument);
  CHECK_THROWS_AS(cmc(d, q0, std::vector<int>{0}, r1), std::invalid_argument);
}

TEST_CASE("rank list") {
  Matrix d(1, 4);
  d << 0.3, 0.1, 0.9, 0.2;
  const std::vector<int> gid{1, 2, 3, 4};
  CHECK(rank_list(d, gid, 0, 4) == std::vector<int>{2, 4, 1, 3});
  CHECK(rank_list(d, gid, 0, 2) == std::vector<int>{2, 4});
  CHECK_THROWS_AS(rank_list(d, gid, 0, 5), std::invalid_argument);
  CHECK_THROWS_AS(rank_list(d, gid, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(rank_list(d, gid, 1, 1), std::invalid_argument);

  Matrix ties = Matrix::Constant(1, 4, 0.5);
  auto all = rank_list(ties, gid, 0, 4);
  CHECK(all == gid);
}

TEST_CASE("embedding set shape, determinism and normalisation") {
  Rng rng(4);
  const RainModel model(ModelConfig{}, 9);
  auto recs = random_records(5, 5, rng);
  recs.push_back(recs[2]);
  const Matrix raw = embed_set(model, recs, false);
  CHECK(raw.rows() == 6);
  CHECK(raw.cols() == 32);
  CHECK(raw.row(2) == raw.row(5));
  CHECK(embed_set(model, recs, false) == raw);
  const Matrix unit = embed_set(model, recs, true);
  for (int i = 0; i < unit.rows(); ++i) CHECK(std::abs(unit.row(i).norm() - 1.0) <= 1e-6);
}

TEST_CASE("evaluation does not modify parameters") {
  Rng rng(5);
  const RainModel model(ModelConfig{}, 10);
  const auto before = snapshot(model);
  auto gallery = random_records(4, 4, rng);
  auto query = random_records(8, 4, rng);
  const std::vector<int> ranks{1, 2};
  const auto report = evaluate(model, query, gallery, ranks);
  CHECK(snapshot(model) == before);
  CHECK(report.num_queries == 8);
  CHECK(report.num_gallery == 4);
  CHECK(report.per_query_ranks.size() == 8);
  CHECK(report.per_query_ranks.front().size() == 2);
  CHECK(report.cmc.at(1) <= report.cmc.at(2));
}

TEST_CASE("unseen resolution evaluation") {
  Rng rng(6);
  const RainModel model(ModelConfig{}, 11);
  std::vector<ImageRecord> test_hr = random_records(24, 6, rng);
  for (std::size_t i = 0; i < test_hr.size(); ++i) test_hr[i].camera = static_cast<int>(i / 6) % 2;
  const std::vector<int> ranks{1, 5};
  const auto report = unseen_resolution_eval(model, test_hr, {2, 3, 4}, 8, 1, ranks);
  CHECK(report.query_rates == std::set<int>{8});
  CHECK(report.num_gallery == 6);
  CHECK(report.num_queries == 12);
  CHECK_THROWS_AS(unseen_resolution_eval(model, test_hr, {2, 3, 4}, 3, 1, ranks), std::invalid_argument);
}

TEST_CASE("invariance probe") {
  Rng rng(7);
  const RainModel model(ModelConfig{}, 12);
  auto hr = random_records(40, 10, rng);
  // identical twins: zero distance, chance-level probe
  const auto twin = invariance_probe(model, hr, hr, 3);
  CHECK(twin.mean_pair_distance == 0.0);
  CHECK(twin.probe_accuracy == doctest::Approx(0.5));

  auto lr = hr;
  for (auto& r : lr) r.pixels = downsample_upsample(r.pixels, 4);
  const auto p = invariance_probe(model, hr, lr, 3);
  CHECK(p.mean_pair_distance > 0.0);
  CHECK(p.probe_accuracy >= 0.0);
  CHECK(p.probe_accuracy <= 1.0);

  auto shuffled = lr;
  std::swap(shuffled[0], shuffled[1]);
  CHECK_THROWS_AS(invariance_probe(model, hr, shuffled, 3), std::invalid_argument);
  lr.pop_back();
  CHECK_THROWS_AS(invariance_probe(model, hr, lr, 3), std::invalid_argument);
}

TEST_CASE("linear probe separates shifted clouds and respects groups") {
  Rng rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  const int pairs = 60, d = 6;
  Matrix h(pairs, d), l(pairs, d);
  std::vector<int> groups(pairs);
  for (int i = 0; i < pairs; ++i) {
    groups[i] = i % 6;
    for (int k = 0; k < d; ++k) {
      const double base = n(rng);
      h(i, k) = base + (k == 0 ? 6.0 : 0.0);
      l(i, k) = base + 0.1 * n(rng);
    }
  }
  CHECK(linear_probe_accuracy(h, l, groups, 1) > 0.95);
  CHECK(linear_probe_accuracy(h, l, {}, 1) > 0.95);
  CHECK(linear_probe_accuracy(h, h, groups, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(linear_probe_accuracy(h, l.topRows(10), groups, 1), std::invalid_argument);
  CHECK_THROWS_AS(linear_probe_accuracy(h, l, std::vector<int>{1, 2}, 1), std::invalid_argument);

  // a per-group offset that flips sign between groups is invisible across groups
  Matrix gh(pairs, 2), gl(pairs, 2);
  for (int i = 0; i < pairs; ++i) {
    const double sgn = groups[i] % 2 ? 1.0 : -1.0;
    gh(i, 0) = gl(i, 0) = 0.1 * n(rng) + 5.0 * groups[i];
    gh(i, 1) = sgn + 0.05 * n(rng);
    gl(i, 1) = -sgn + 0.05 * n(rng);
  }
  CHECK(linear_probe_accuracy(gh, gl, groups, 1) < 0.8);
}

TEST_CASE("embedding CSV round trip") {
  Rng rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix e(5, 3);
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 3; ++k) e(i, k) = n(rng) * std::pow(10.0, i - 2);
  e(0, 0) = 1.0 / 3.0;
  const std::vector<int> ids{4, 5, 6, 7, 8}, rates{1, 2, 3, 4, 8};
  const auto path = (std::filesystem::temp_directory_path() / "rain_emb_roundtrip.csv").string();
  write_embeddings_csv(path, e, ids, rates);
  const auto t = read_embeddings_csv(path);
  CHECK(t.embeddings == e);
  CHECK(t.identities == ids);
  CHECK(t.rates == rates);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_embeddings_csv(path, e, std::vector<int>{1}, rates), std::invalid_argument);
}
