#include "rain/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rain {

namespace {

void require_open_unit(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!(x > 0.0 && x < 1.0)) {
      throw std::invalid_argument(std::string("adversarial_loss: ") + what +
                                  " probabilities must lie strictly inside (0, 1); clamp logits instead");
    }
  }
}

double mean_abs_diff(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string("reconstruction_loss: ") + what + " shape mismatch");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double stream_nll(const Matrix& probs, const Matrix& onehot) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols()) {
    throw std::invalid_argument("classification_loss: prediction/label shape mismatch");
  }
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (int i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    int hot = -1, ones = 0;
    for (int k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("classification_loss: negative or non-finite probability");
      sum += p;
      if (onehot(i, k) == 1.0) {
        hot = k;
        ++ones;
      } else if (onehot(i, k) != 0.0) {
        throw std::invalid_argument("classification_loss: labels must be one-hot");
      }
    }
    if (ones != 1) throw std::invalid_argument("classification_loss: labels must be one-hot");
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("classification_loss: prediction row does not sum to 1");
    total -= std::log(std::max(probs(i, hot), 1e-12));
  }
  return total / static_cast<double>(probs.rows());
}

}  // namespace

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double adversarial_loss(std::span<const double> d_hr, std::span<const double> d_lr) {
  return adversarial_loss_grad(d_hr, d_lr).value;
}

AdversarialGrad adversarial_loss_grad(std::span<const double> d_hr, std::span<const double> d_lr) {
  if (d_hr.empty() || d_lr.empty()) throw std::invalid_argument("adversarial_loss: both streams must be nonempty");
  require_open_unit(d_hr, "HR");
  require_open_unit(d_lr, "LR");
  AdversarialGrad out;
  const double nh = static_cast<double>(d_hr.size());
  const double nl = static_cast<double>(d_lr.size());
  double sh = 0.0, sl = 0.0;
  out.grad_hr.resize(d_hr.size());
  out.grad_lr.resize(d_lr.size());
  for (std::size_t i = 0; i < d_hr.size(); ++i) {
    sh += std::log(d_hr[i]);
    out.grad_hr[i] = 1.0 / (nh * d_hr[i]);
  }
  for (std::size_t i = 0; i < d_lr.size(); ++i) {
    sl += std::log1p(-d_lr[i]);
    out.grad_lr[i] = -1.0 / (nl * (1.0 - d_lr[i]));
  }
  out.value = sh / nh + sl / nl;
  return out;
}

LogitAdversarial adversarial_from_logits(const Vector& logits_hr, const Vector& logits_lr) {
  if (logits_hr.size() == 0 || logits_lr.size() == 0) throw std::invalid_argument("adversarial loss: empty stream");
  const double nh = static_cast<double>(logits_hr.size());
  const double nl = static_cast<double>(logits_lr.size());
  LogitAdversarial out;
  out.grad_hr.resize(logits_hr.size());
  out.grad_lr.resize(logits_lr.size());
  double sh = 0.0, sl = 0.0;
  for (Eigen::Index i = 0; i < logits_hr.size(); ++i) {
    sh += log_sigmoid(logits_hr(i));
    out.grad_hr(i) = sigmoid(-logits_hr(i)) / nh;  // d/dz log s(z) = 1 - s(z)
  }
  for (Eigen::Index i = 0; i < logits_lr.size(); ++i) {
    sl += log_sigmoid(-logits_lr(i));  // log(1 - s(z)) = log s(-z)
    out.grad_lr(i) = -sigmoid(logits_lr(i)) / nl;
  }
  out.value = sh / nh + sl / nl;
  return out;
}

LogitAdversarial extractor_adversarial_objective(const Vector& logits_hr, const Vector& logits_lr, AdvUpdate mode) {
  if (mode == AdvUpdate::minimax) return adversarial_from_logits(logits_hr, logits_lr);
  if (logits_lr.size() == 0) throw std::invalid_argument("adversarial loss: empty LR stream");
  const double nl = static_cast<double>(logits_lr.size());
  LogitAdversarial out;
  out.grad_hr = Vector::Zero(logits_hr.size());
  out.grad_lr.resize(logits_lr.size());
  double s = 0.0;
  for (Eigen::Index i = 0; i < logits_lr.size(); ++i) {
    s -= log_sigmoid(logits_lr(i));
    out.grad_lr(i) = -sigmoid(-logits_lr(i)) / nl;
  }
  out.value = s / nl;
  return out;
}

double reconstruction_loss(std::span<const double> recon_hr, std::span<const double> target_hr,
                           std::span<const double> recon_lr, std::span<const double> target_lr) {
  return mean_abs_diff(recon_hr, target_hr, "HR") + mean_abs_diff(recon_lr, target_lr, "LR");
}

ReconstructionGrad reconstruction_loss_grad(std::span<const double> recon_hr, std::span<const double> target_hr,
                                            std::span<const double> recon_lr, std::span<const double> target_lr) {
  ReconstructionGrad out;
  out.value = reconstruction_loss(recon_hr, target_hr, recon_lr, target_lr);
  out.grad_hr.resize(recon_hr.size());
  out.grad_lr.resize(recon_lr.size());
  for (std::size_t i = 0; i < recon_hr.size(); ++i)
    out.grad_hr[i] = sign(recon_hr[i] - target_hr[i]) / static_cast<double>(recon_hr.size());
  for (std::size_t i = 0; i < recon_lr.size(); ++i)
    out.grad_lr[i] = sign(recon_lr[i] - target_lr[i]) / static_cast<double>(recon_lr.size());
  return out;
}

double classification_loss(const Matrix& probs_hr, const Matrix& onehot_hr, const Matrix& probs_lr,
                           const Matrix& onehot_lr) {
  return stream_nll(probs_hr, onehot_hr) + stream_nll(probs_lr, onehot_lr);
}

CrossEntropyGrad softmax_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                       std::span<const char> mask) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows() || labels.size() != mask.size()) {
    throw std::invalid_argument("softmax_cross_entropy: label/mask length mismatch");
  }
  CrossEntropyGrad out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i)
    if (mask[i]) ++out.counted;
  if (out.counted == 0) return out;
  const double inv = 1.0 / out.counted;
  for (int i = 0; i < logits.rows(); ++i) {
    if (!mask[i]) continue;
    if (labels[i] < 0 || labels[i] >= logits.cols()) {
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    const double mx = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (int k = 0; k < logits.cols(); ++k) sum += std::exp(logits(i, k) - mx);
    const double log_z = mx + std::log(sum);
    out.value += (log_z - logits(i, labels[i])) * inv;
    for (int k = 0; k < logits.cols(); ++k) out.grad(i, k) = std::exp(logits(i, k) - log_z) * inv;
    out.grad(i, labels[i]) -= inv;
  }
  return out;
}

PairDistances pair_distances(std::span<const double> v_anchor, std::span<const double> v_pos,
                             std::span<const double> v_neg) {
  if (v_anchor.size() != v_pos.size() || v_anchor.size() != v_neg.size()) {
    throw std::invalid_argument("pair_distances: vector length mismatch");
  }
  double sp = 0.0, sn = 0.0;
  for (std::size_t i = 0; i < v_anchor.size(); ++i) {
    sp += (v_anchor[i] - v_pos[i]) * (v_anchor[i] - v_pos[i]);
    sn += (v_anchor[i] - v_neg[i]) * (v_anchor[i] - v_neg[i]);
  }
  return {std::sqrt(sp), std::sqrt(sn)};
}

double triplet_loss(std::span<const PairDistances> triples, double margin) {
  if (!(margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be > 0");
  if (triples.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : triples) {
    if (t.d_pos < 0.0 || t.d_neg < 0.0) throw std::invalid_argument("triplet_loss: distances must be >= 0");
    s += std::max(0.0, margin + t.d_pos - t.d_neg);
  }
  return s / static_cast<double>(triples.size());
}

namespace {

// Adds d||a - b|| / d(a, b) scaled by `scale` into grad rows; zero at a == b.
void add_distance_grad(const Matrix& e, int a, int b, double dist, double scale, Matrix& grad) {
  if (dist <= 0.0) return;
  const Eigen::RowVectorXd dir = (e.row(a) - e.row(b)) / dist;
  grad.row(a) += scale * dir;
  grad.row(b) -= scale * dir;
}

}  // namespace

TripletGrad batch_triplet_loss(const Matrix& embeddings, std::span<const Triplet> triplets, double margin) {
  if (!(margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be > 0");
  TripletGrad out;
  out.grad = Matrix::Zero(embeddings.rows(), embeddings.cols());
  if (triplets.empty()) return out;
  const double inv = 1.0 / static_cast<double>(triplets.size());
  for (const auto& t : triplets) {
    const double dp = (embeddings.row(t.anchor) - embeddings.row(t.positive)).norm();
    const double dn = (embeddings.row(t.anchor) - embeddings.row(t.negative)).norm();
    const double h = margin + dp - dn;
    if (h <= 0.0) continue;
    out.value += h * inv;
    ++out.active;
    add_distance_grad(embeddings, t.anchor, t.positive, dp, inv, out.grad);
    add_distance_grad(embeddings, t.anchor, t.negative, dn, -inv, out.grad);
  }
  return out;
}

TripletGrad batch_hard_triplet_loss(const Matrix& embeddings, std::span<const int> labels,
                                    std::span<const char> mask, double margin) {
  if (!(margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be > 0");
  const int n = static_cast<int>(embeddings.rows());
  if (static_cast<int>(labels.size()) != n || static_cast<int>(mask.size()) != n) {
    throw std::invalid_argument("batch_hard_triplet_loss: label/mask length mismatch");
  }
  std::vector<Triplet> mined;
  for (int a = 0; a < n; ++a) {
    if (!mask[a]) continue;
    int hard_pos = -1, hard_neg = -1;
    double best_pos = -1.0, best_neg = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == a || !mask[j]) continue;
      const double d = (embeddings.row(a) - embeddings.row(j)).norm();
      if (labels[j] == labels[a]) {
        if (d > best_pos) best_pos = d, hard_pos = j;
      } else if (hard_neg < 0 || d < best_neg) {
        best_neg = d, hard_neg = j;
      }
    }
    if (hard_pos >= 0 && hard_neg >= 0) mined.push_back({a, hard_pos, hard_neg});
  }
  return batch_triplet_loss(embeddings, mined, margin);
}

LossBundle total_loss(const std::map<int, double>& adv, double rec, double cls, double tri, double margin,
                      const LossWeights& weights, const std::map<int, double>* adv_generator) {
  LossBundle b;
  b.adv = adv;
  for (const auto& [j, v] : adv) b.adv_sum += v;
  b.rec = rec;
  b.cls = cls;
  b.tri = tri;
  b.margin = margin;
  b.total = weights.adv * b.adv_sum + weights.rec * rec + weights.cls * cls + weights.tri * tri;
  b.discriminator_objective = b.adv_sum;
  double gen_adv = b.adv_sum;
  if (adv_generator) {
    gen_adv = 0.0;
    for (const auto& [j, v] : *adv_generator) gen_adv += v;
  }
  b.generator_objective = weights.adv * gen_adv + weights.rec * rec + weights.cls * cls + weights.tri * tri;
  return b;
}

}  // namespace rain
