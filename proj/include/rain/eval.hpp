#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rain/datagen.hpp"
#include "rain/model.hpp"

namespace rain {

inline constexpr const char* kEvalReportSchema = "rain.eval_report/1";

struct EvalReport {
  std::map<int, double> cmc;  // rank -> percentage of queries matched within rank
  double map = 0.0;           // in [0, 1]
  std::vector<std::vector<int>> per_query_ranks;  // top gallery identities per query
  std::string fingerprint;
  std::set<int> query_rates;
  int num_queries = 0;
  int num_gallery = 0;
  bool operator==(const EvalReport&) const = default;
};

/// Row i = embedding v of record i (pixels, inference mode), optionally
/// L2-normalised.
Matrix embed_set(const RainModel& model, std::span<const ImageRecord> records, bool normalize = true);

/// D[i, j] = ||q_i - g_j||_2.
Matrix distance_matrix(const Matrix& query, const Matrix& gallery);

/// 1-based rank of gallery entry j in query row i, ties broken by gallery index.
int gallery_position(const Matrix& dist, int query, int gallery_index);

/// Percentage of queries whose first correct gallery entry lies within each
/// rank. Throws ProtocolError when a query identity is absent from the gallery.
std::map<int, double> cmc(const Matrix& dist, std::span<const int> query_ids, std::span<const int> gallery_ids,
                          std::span<const int> ranks);

/// Mean average precision (general multi-match formula; reciprocal rank when
/// the gallery holds one entry per identity).
double map_score(const Matrix& dist, std::span<const int> query_ids, std::span<const int> gallery_ids);

/// Identities of the k nearest gallery entries for one query.
std::vector<int> rank_list(const Matrix& dist, std::span<const int> gallery_ids, int query_index, int k);

EvalReport evaluate(const RainModel& model, std::span<const ImageRecord> query, std::span<const ImageRecord> gallery,
                    std::span<const int> ranks, bool normalize = true, const std::string& fingerprint = {});

/// Queries re-synthesised at `probe_rate` from held-out HR records (LR camera
/// views), evaluated with the standard single-shot protocol.
EvalReport unseen_resolution_eval(const RainModel& model, std::span<const ImageRecord> test_hr_records,
                                  const std::set<int>& train_rates, int probe_rate, std::uint64_t seed,
                                  std::span<const int> ranks, bool normalize = true);

struct ProbeResult {
  double mean_pair_distance = 0.0;
  double probe_accuracy = 0.0;  // held-out HR-vs-LR accuracy in [0, 1]
};

/// Paired HR/LR embeddings: mean pair distance on raw embeddings and held-out
/// accuracy of a ridge-regularised logistic probe on the (normalised when
/// `normalize`) embeddings. The probe is scored by two-fold cross-validation
/// over identities, so no identity is seen both when fitting and scoring.
ProbeResult invariance_probe(const RainModel& model, std::span<const ImageRecord> hr,
                             std::span<const ImageRecord> lr, std::uint64_t seed, bool normalize = true);

/// Same probe on precomputed embeddings (rows paired by index). Pairs sharing
/// a group id always land in the same fold; empty `groups` treats every pair
/// as its own group.
double linear_probe_accuracy(const Matrix& hr_embeddings, const Matrix& lr_embeddings, std::span<const int> groups,
                             std::uint64_t seed);

/// CSV with columns identity, rate, e0..e{d-1}; values printed to round-trip.
void write_embeddings_csv(const std::string& path, const Matrix& embeddings, std::span<const int> identities,
                          std::span<const int> rates);
struct EmbeddingTable {
  Matrix embeddings;
  std::vector<int> identities;
  std::vector<int> rates;
};
EmbeddingTable read_embeddings_csv(const std::string& path);

}  // namespace rain
