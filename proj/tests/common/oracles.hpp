#pragma once

// Brute-force retrieval metrics used as independent references for the
// library implementation. Deliberately naive: full sort per query.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <vector>

namespace rain::oracle {

using Table = std::vector<std::vector<double>>;

inline std::vector<int> sorted_gallery(const Table& dist, int q) {
  std::vector<std::pair<double, int>> keyed;
  for (int j = 0; j < static_cast<int>(dist[q].size()); ++j) keyed.emplace_back(dist[q][j], j);
  std::sort(keyed.begin(), keyed.end());  // ties: lower gallery index first
  std::vector<int> order;
  for (const auto& [d, j] : keyed) order.push_back(j);
  return order;
}

inline std::map<int, double> cmc(const Table& dist, const std::vector<int>& qid, const std::vector<int>& gid,
                                 const std::vector<int>& ranks) {
  std::map<int, double> out;
  for (int r : ranks) {
    int hits = 0;
    for (int q = 0; q < static_cast<int>(qid.size()); ++q) {
      const auto order = sorted_gallery(dist, q);
      for (int k = 0; k < r && k < static_cast<int>(order.size()); ++k) {
        if (gid[order[k]] == qid[q]) {
          ++hits;
          break;
        }
      }
    }
    out[r] = 100.0 * hits / static_cast<double>(qid.size());
  }
  return out;
}

inline double mean_ap(const Table& dist, const std::vector<int>& qid, const std::vector<int>& gid) {
  double total = 0.0;
  for (int q = 0; q < static_cast<int>(qid.size()); ++q) {
    const auto order = sorted_gallery(dist, q);
    int relevant = 0;
    double precision_sum = 0.0;
    for (int k = 0; k < static_cast<int>(order.size()); ++k) {
      if (gid[order[k]] != qid[q]) continue;
      ++relevant;
      precision_sum += relevant / static_cast<double>(k + 1);
    }
    total += precision_sum / relevant;
  }
  return total / static_cast<double>(qid.size());
}

struct Instance {
  Table dist;
  std::vector<int> qid, gid;
  bool single_shot = true;
};

// Random protocol instance: every query identity appears in the gallery.
// Distances are drawn on a coarse grid half the time so ties occur.
template <class Rng>
inline Instance random_instance(Rng& rng, int max_q = 50, int max_g = 50) {
  Instance in;
  const int g = std::uniform_int_distribution<int>(2, max_g)(rng);
  const int q = std::uniform_int_distribution<int>(1, max_q)(rng);
  in.single_shot = std::bernoulli_distribution(0.5)(rng);
  if (in.single_shot) {
    in.gid.resize(g);
    std::iota(in.gid.begin(), in.gid.end(), 0);
    std::shuffle(in.gid.begin(), in.gid.end(), rng);
  } else {
    const int ids = std::uniform_int_distribution<int>(1, g)(rng);
    for (int j = 0; j < g; ++j) in.gid.push_back(j < ids ? j : std::uniform_int_distribution<int>(0, ids - 1)(rng));
    std::shuffle(in.gid.begin(), in.gid.end(), rng);
  }
  for (int i = 0; i < q; ++i) in.qid.push_back(in.gid[std::uniform_int_distribution<int>(0, g - 1)(rng)]);
  const bool coarse = std::bernoulli_distribution(0.5)(rng);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::uniform_int_distribution<int> grid(0, 4);
  in.dist.assign(q, std::vector<double>(g));
  for (auto& row : in.dist)
    for (double& d : row) d = coarse ? 0.5 * grid(rng) : u(rng);
  return in;
}

}  // namespace rain::oracle
