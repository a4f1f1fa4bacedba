#pragma once

#include <map>
#include <span>
#include <utility>
#include <vector>

#include "rain/datagen.hpp"
#include "rain/tensor.hpp"

namespace rain {

// Probability-space forms (used for reporting and tests) and logit-space forms
// with analytic gradients (used by the trainer). Every gradient is of the
// returned value with respect to the listed inputs.

/// mean log d_hr + mean log(1 - d_lr); inputs must lie strictly inside (0, 1).
double adversarial_loss(std::span<const double> d_hr, std::span<const double> d_lr);

struct AdversarialGrad {
  double value = 0.0;
  std::vector<double> grad_hr;
  std::vector<double> grad_lr;
};
AdversarialGrad adversarial_loss_grad(std::span<const double> d_hr, std::span<const double> d_lr);

/// How the extractor descends on the adversarial term.
enum class AdvUpdate {
  non_saturating,  // minimise -mean log D(f_L)
  minimax,         // minimise the adversarial loss itself
};

struct LogitAdversarial {
  double value = 0.0;  // the adversarial loss evaluated through log-sigmoid
  Vector grad_hr;
  Vector grad_lr;
};
/// Adversarial loss from discriminator logits, gradient of that value.
LogitAdversarial adversarial_from_logits(const Vector& logits_hr, const Vector& logits_lr);
/// Objective minimised by the extractor and its gradient w.r.t. the logits.
/// `value` is the surrogate under non_saturating, the loss itself under minimax.
LogitAdversarial extractor_adversarial_objective(const Vector& logits_hr, const Vector& logits_lr, AdvUpdate mode);

/// Per-element mean L1 of the HR branch plus that of the LR branch, whose
/// target is the HR ground truth of the LR image. Empty LR spans contribute 0.
double reconstruction_loss(std::span<const double> recon_hr, std::span<const double> target_hr,
                           std::span<const double> recon_lr, std::span<const double> target_lr);

struct ReconstructionGrad {
  double value = 0.0;
  std::vector<double> grad_hr;
  std::vector<double> grad_lr;
};
ReconstructionGrad reconstruction_loss_grad(std::span<const double> recon_hr, std::span<const double> target_hr,
                                            std::span<const double> recon_lr, std::span<const double> target_lr);

/// Mean NLL of the true class over each stream, HR + LR. Rows of `probs_*`
/// must be probability vectors; `labels_*` one-hot rows. An empty stream
/// (zero rows) contributes 0.
double classification_loss(const Matrix& probs_hr, const Matrix& onehot_hr, const Matrix& probs_lr,
                           const Matrix& onehot_lr);

struct CrossEntropyGrad {
  double value = 0.0;
  Matrix grad;  // w.r.t. logits, same shape as the input
  int counted = 0;
};
/// Softmax cross-entropy over the rows with mask[i] != 0, averaged over
/// those rows. No counted rows gives value 0 and an all-zero gradient.
CrossEntropyGrad softmax_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                       std::span<const char> mask);

struct PairDistances {
  double d_pos = 0.0;
  double d_neg = 0.0;
};
PairDistances pair_distances(std::span<const double> v_anchor, std::span<const double> v_pos,
                             std::span<const double> v_neg);

/// Mean hinge max(0, m + d_pos - d_neg) over the triples of one stream.
double triplet_loss(std::span<const PairDistances> triples, double margin);

struct TripletGrad {
  double value = 0.0;
  Matrix grad;  // w.r.t. embedding rows
  int active = 0;
};
/// Triplet hinge over rows of one stream's embedding matrix.
TripletGrad batch_triplet_loss(const Matrix& embeddings, std::span<const Triplet> triplets, double margin);
/// Batch-hard mining: per anchor with mask set, furthest positive and
/// closest negative among masked rows.
TripletGrad batch_hard_triplet_loss(const Matrix& embeddings, std::span<const int> labels,
                                    std::span<const char> mask, double margin);

struct LossWeights {
  double adv = 1.0;
  double rec = 1.0;
  double cls = 1.0;
  double tri = 1.0;
  bool operator==(const LossWeights&) const = default;
};

struct LossBundle {
  std::map<int, double> adv;  // per discriminator level
  double adv_sum = 0.0;
  double rec = 0.0;
  double cls = 0.0;
  double tri = 0.0;
  double total = 0.0;
  double margin = 0.3;
  double discriminator_objective = 0.0;  // maximised by the discriminators
  double generator_objective = 0.0;      // minimised by extractor/decoder/classifier
  bool operator==(const LossBundle&) const = default;
};

/// total = sum_j w_adv adv_j + w_rec rec + w_cls cls + w_tri tri. When
/// `adv_generator` is given it replaces the adversarial term in the
/// generator objective (non-saturating surrogate).
LossBundle total_loss(const std::map<int, double>& adv, double rec, double cls, double tri, double margin,
                      const LossWeights& weights = {},
                      const std::map<int, double>* adv_generator = nullptr);

/// log(sigmoid(z)) without overflow.
double log_sigmoid(double z);
double sigmoid(double z);

}  // namespace rain
