#include "rain/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rain {

Matrix embed_set(const RainModel& model, std::span<const ImageRecord> records, bool normalize) {
  std::vector<const Image*> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(&r.pixels);
  Matrix e = embed_images(model, images);
  if (normalize) {
    for (int i = 0; i < e.rows(); ++i) {
      const double n = e.row(i).norm();
      if (n > 0.0) e.row(i) /= n;
    }
  }
  return e;
}

Matrix distance_matrix(const Matrix& query, const Matrix& gallery) {
  if (query.cols() != gallery.cols()) {
    throw std::invalid_argument("distance_matrix: embedding dimensions differ (" + std::to_string(query.cols()) +
                                " vs " + std::to_string(gallery.cols()) + ")");
  }
  Matrix d(query.rows(), gallery.rows());
  for (int i = 0; i < query.rows(); ++i)
    for (int j = 0; j < gallery.rows(); ++j) d(i, j) = (query.row(i) - gallery.row(j)).norm();
  return d;
}

int gallery_position(const Matrix& dist, int query, int gallery_index) {
  const double target = dist(query, gallery_index);
  int ahead = 0;
  for (int k = 0; k < dist.cols(); ++k) {
    const double d = dist(query, k);
    if (d < target || (d == target && k < gallery_index)) ++ahead;
  }
  return ahead + 1;
}

namespace {

void check_protocol_shapes(const Matrix& dist, std::span<const int> query_ids, std::span<const int> gallery_ids) {
  if (dist.rows() != static_cast<Eigen::Index>(query_ids.size()) ||
      dist.cols() != static_cast<Eigen::Index>(gallery_ids.size())) {
    throw std::invalid_argument("distance matrix shape does not match query/gallery id lists");
  }
  if (gallery_ids.empty()) throw std::invalid_argument("empty gallery");
}

std::vector<int> match_positions(const Matrix& dist, int q, int id, std::span<const int> gallery_ids) {
  std::vector<int> pos;
  for (int j = 0; j < static_cast<int>(gallery_ids.size()); ++j)
    if (gallery_ids[j] == id) pos.push_back(gallery_position(dist, q, j));
  if (pos.empty()) {
    throw ProtocolError("query " + std::to_string(q) + " identity " + std::to_string(id) + " is not in the gallery");
  }
  std::sort(pos.begin(), pos.end());
  return pos;
}

}  // namespace

std::map<int, double> cmc(const Matrix& dist, std::span<const int> query_ids, std::span<const int> gallery_ids,
                          std::span<const int> ranks) {
  check_protocol_shapes(dist, query_ids, gallery_ids);
  for (int r : ranks)
    if (r < 1) throw std::invalid_argument("cmc: ranks must be >= 1");
  std::vector<int> first(query_ids.size());
  for (int q = 0; q < static_cast<int>(query_ids.size()); ++q)
    first[q] = match_positions(dist, q, query_ids[q], gallery_ids).front();
  std::map<int, double> out;
  for (int r : ranks) {
    const auto hits = std::count_if(first.begin(), first.end(), [r](int p) { return p <= r; });
    out[r] = query_ids.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(query_ids.size());
  }
  return out;
}

double map_score(const Matrix& dist, std::span<const int> query_ids, std::span<const int> gallery_ids) {
  check_protocol_shapes(dist, query_ids, gallery_ids);
  if (query_ids.empty()) return 0.0;
  double total = 0.0;
  for (int q = 0; q < static_cast<int>(query_ids.size()); ++q) {
    const auto pos = match_positions(dist, q, query_ids[q], gallery_ids);
    double ap = 0.0;
    for (std::size_t r = 0; r < pos.size(); ++r) ap += static_cast<double>(r + 1) / pos[r];
    total += ap / static_cast<double>(pos.size());
  }
  return total / static_cast<double>(query_ids.size());
}

std::vector<int> rank_list(const Matrix& dist, std::span<const int> gallery_ids, int query_index, int k) {
  if (query_index < 0 || query_index >= dist.rows()) throw std::invalid_argument("rank_list: query index out of range");
  if (k < 1 || k > dist.cols()) throw std::invalid_argument("rank_list: k must lie in [1, gallery size]");
  if (static_cast<Eigen::Index>(gallery_ids.size()) != dist.cols()) {
    throw std::invalid_argument("rank_list: gallery id list does not match distance matrix");
  }
  std::vector<int> order(dist.cols());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dist(query_index, a) < dist(query_index, b); });
  std::vector<int> ids(k);
  for (int i = 0; i < k; ++i) ids[i] = gallery_ids[order[i]];
  return ids;
}

EvalReport evaluate(const RainModel& model, std::span<const ImageRecord> query, std::span<const ImageRecord> gallery,
                    std::span<const int> ranks, bool normalize, const std::string& fingerprint) {
  const Matrix q = embed_set(model, query, normalize);
  const Matrix g = embed_set(model, gallery, normalize);
  const Matrix d = distance_matrix(q, g);
  std::vector<int> qid, gid;
  EvalReport report;
  for (const auto& r : query) {
    qid.push_back(r.identity);
    report.query_rates.insert(r.rate);
  }
  for (const auto& r : gallery) gid.push_back(r.identity);
  report.cmc = cmc(d, qid, gid, ranks);
  report.map = map_score(d, qid, gid);
  const int max_rank = ranks.empty() ? 1 : *std::max_element(ranks.begin(), ranks.end());
  const int keep = std::min<int>(max_rank, static_cast<int>(gid.size()));
  for (int i = 0; i < static_cast<int>(qid.size()); ++i) report.per_query_ranks.push_back(rank_list(d, gid, i, keep));
  report.fingerprint = fingerprint;
  report.num_queries = static_cast<int>(query.size());
  report.num_gallery = static_cast<int>(gallery.size());
  return report;
}

EvalReport unseen_resolution_eval(const RainModel& model, std::span<const ImageRecord> test_hr_records,
                                  const std::set<int>& train_rates, int probe_rate, std::uint64_t seed,
                                  std::span<const int> ranks, bool normalize) {
  if (train_rates.count(probe_rate)) {
    throw std::invalid_argument("unseen_resolution_eval: probe rate " + std::to_string(probe_rate) +
                                " was used in training; use the standard evaluation");
  }
  std::vector<ImageRecord> hr(test_hr_records.begin(), test_hr_records.end());
  auto mlr = synthesize_mlr(hr, {probe_rate}, CameraPolicy{}, derive_seed(seed, 2));
  auto split = split_query_gallery(mlr, derive_seed(seed, 3));
  return evaluate(model, split.query, split.gallery, ranks, normalize);
}

namespace {

// Ridge-regularised logistic regression fitted by Newton iterations on the
// rows of `x` (standardised with their own statistics); returns how many
// rows of `x_eval` it labels correctly.
int fit_and_score(const Matrix& x, const Vector& y, const Matrix& x_eval, const Vector& y_eval) {
  const int d = static_cast<int>(x.cols());
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd scale = ((x.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (int k = 0; k < d; ++k) scale(k) = scale(k) > 1e-12 ? scale(k) : 1.0;
  auto design = [&](const Matrix& m) {
    Matrix z(m.rows(), d + 1);
    z.leftCols(d) = ((m.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    z.col(d).setOnes();
    return z;
  };
  const Matrix ztr = design(x);
  const Matrix zte = design(x_eval);

  const double ridge = 1e-2;
  Vector w = Vector::Zero(d + 1);
  for (int it = 0; it < 50; ++it) {
    const Vector logits = ztr * w;
    Vector p(logits.size()), s(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-logits(i)));
      s(i) = p(i) * (1.0 - p(i));
    }
    Vector grad = ztr.transpose() * (p - y) + ridge * w;
    Eigen::MatrixXd hess = ztr.transpose() * s.asDiagonal() * ztr;
    hess.diagonal().array() += ridge;
    const Vector delta = hess.ldlt().solve(grad);
    w -= delta;
    if (delta.norm() < 1e-10) break;
  }
  const Vector scores = zte * w;
  int correct = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) correct += ((scores(i) > 0.0) == (y_eval(i) > 0.5)) ? 1 : 0;
  return correct;
}

}  // namespace

double linear_probe_accuracy(const Matrix& hr_embeddings, const Matrix& lr_embeddings, std::span<const int> groups,
                             std::uint64_t seed) {
  if (hr_embeddings.rows() != lr_embeddings.rows() || hr_embeddings.cols() != lr_embeddings.cols()) {
    throw std::invalid_argument("linear probe: HR and LR embeddings must be paired row by row");
  }
  const int pairs = static_cast<int>(hr_embeddings.rows());
  if (pairs < 2) throw std::invalid_argument("linear probe: need at least two pairs");
  if (!groups.empty() && static_cast<int>(groups.size()) != pairs) {
    throw std::invalid_argument("linear probe: one group per pair required");
  }

  // two folds over shuffled groups; a lone group falls back to one group per pair
  std::vector<int> group(pairs);
  for (int i = 0; i < pairs; ++i) group[i] = groups.empty() ? i : groups[i];
  std::vector<int> distinct(group);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) {
    std::iota(group.begin(), group.end(), 0);
    distinct = group;
  }
  Rng rng(derive_seed(seed, 0x71));
  for (int i = static_cast<int>(distinct.size()) - 1; i > 0; --i) {
    std::swap(distinct[i], distinct[std::uniform_int_distribution<int>(0, i)(rng)]);
  }
  std::map<int, int> fold;
  for (std::size_t k = 0; k < distinct.size(); ++k) fold[distinct[k]] = 2 * k < distinct.size() ? 0 : 1;

  const int d = static_cast<int>(hr_embeddings.cols());
  auto gather = [&](int f, Matrix& x, Vector& y) {
    int n = 0;
    for (int i = 0; i < pairs; ++i) n += fold[group[i]] == f;
    x.resize(2 * n, d);
    y.resize(2 * n);
    for (int i = 0, r = 0; i < pairs; ++i) {
      if (fold[group[i]] != f) continue;
      x.row(2 * r) = hr_embeddings.row(i);
      y(2 * r) = 1.0;
      x.row(2 * r + 1) = lr_embeddings.row(i);
      y(2 * r + 1) = 0.0;
      ++r;
    }
  };
  Matrix x0, x1;
  Vector y0, y1;
  gather(0, x0, y0);
  gather(1, x1, y1);
  const int correct = fit_and_score(x0, y0, x1, y1) + fit_and_score(x1, y1, x0, y0);
  return static_cast<double>(correct) / static_cast<double>(2 * pairs);
}

ProbeResult invariance_probe(const RainModel& model, std::span<const ImageRecord> hr,
                             std::span<const ImageRecord> lr, std::uint64_t seed, bool normalize) {
  if (hr.size() != lr.size() || hr.empty()) throw std::invalid_argument("invariance_probe: inputs must be nonempty HR/LR pairs");
  for (std::size_t i = 0; i < hr.size(); ++i) {
    if (hr[i].identity != lr[i].identity || !hr[i].pixels.same_shape(lr[i].pixels)) {
      throw std::invalid_argument("invariance_probe: record " + std::to_string(i) + " is not an HR/LR pair");
    }
  }
  std::vector<int> groups(hr.size());
  for (std::size_t i = 0; i < hr.size(); ++i) groups[i] = hr[i].identity;
  const Matrix eh = embed_set(model, hr, false);
  const Matrix el = embed_set(model, lr, false);
  ProbeResult out;
  out.mean_pair_distance = (eh - el).rowwise().norm().mean();
  if (normalize) {
    Matrix nh = eh, nl = el;
    for (int i = 0; i < nh.rows(); ++i) {
      if (nh.row(i).norm() > 0) nh.row(i).normalize();
      if (nl.row(i).norm() > 0) nl.row(i).normalize();
    }
    out.probe_accuracy = linear_probe_accuracy(nh, nl, groups, seed);
  } else {
    out.probe_accuracy = linear_probe_accuracy(eh, el, groups, seed);
  }
  return out;
}

void write_embeddings_csv(const std::string& path, const Matrix& embeddings, std::span<const int> identities,
                          std::span<const int> rates) {
  if (static_cast<Eigen::Index>(identities.size()) != embeddings.rows() || identities.size() != rates.size()) {
    throw std::invalid_argument("write_embeddings_csv: row metadata length mismatch");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "identity,rate";
  for (int k = 0; k < embeddings.cols(); ++k) out << ",e" << k;
  out << '\n';
  char buf[40];
  for (int i = 0; i < embeddings.rows(); ++i) {
    out << identities[i] << ',' << rates[i];
    for (int k = 0; k < embeddings.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", embeddings(i, k));
      out << ',' << buf;
    }
    out << '\n';
  }
}

EmbeddingTable read_embeddings_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty embeddings file");
  const int dim = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 1;
  std::vector<std::vector<double>> rows;
  EmbeddingTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    t.identities.push_back(std::stoi(cell));
    std::getline(ss, cell, ',');
    t.rates.push_back(std::stoi(cell));
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (static_cast<int>(row.size()) != dim) throw std::runtime_error(path + ": ragged embedding row");
    rows.push_back(std::move(row));
  }
  t.embeddings.resize(static_cast<int>(rows.size()), dim);
  for (int i = 0; i < static_cast<int>(rows.size()); ++i)
    for (int k = 0; k < dim; ++k) t.embeddings(i, k) = rows[i][k];
  return t;
}

}  // namespace rain
