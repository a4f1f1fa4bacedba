#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rain/datagen.hpp"
#include "rain/layers.hpp"

namespace rain {

/// Architecture description. Block j halves the spatial size, so the input
/// sides must be divisible by 2^num_blocks.
struct ModelConfig {
  int input_height = 32;
  int input_width = 32;
  std::vector<int> channels{16, 32};         // extractor width per residual block
  std::vector<int> decoder_channels{8, 8};   // one entry per x2 up-sampling stage
  int discriminator_width = 16;
  std::set<int> discriminator_levels{1, 2};  // 1-based feature levels
  int num_identities = 10;                   // classifier outputs K

  int num_blocks() const noexcept { return static_cast<int>(channels.size()); }
  int embedding_dim() const noexcept { return channels.empty() ? 0 : channels.back(); }
  /// Spatial extent (h, w) of feature level j (1-based).
  std::pair<int, int> level_extent(int level) const;
  /// Throws std::invalid_argument describing the first problem found.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Per-block feature maps f_1..f_J and the pooled embedding v = GAP(f_J),
/// one row per input image.
struct FeaturePyramid {
  std::vector<Tensor> maps;
  Matrix embedding;
};

enum class Component { extractor, decoder, discriminators, classifier };
const char* component_name(Component c);

class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int in_ch, int out_ch);

  Tensor forward(const Tensor& x);
  Tensor infer(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out, GradMode mode);
  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

 private:
  Conv2d conv1_, conv2_, shortcut_;
  BatchNorm2d bn1_, bn2_, bn_shortcut_;
  Activation act1_, act_out_;
};

class Extractor {
 public:
  Extractor() = default;
  explicit Extractor(const ModelConfig& config);

  FeaturePyramid forward(const Tensor& images);
  FeaturePyramid infer(const Tensor& images) const;
  /// map_grads[j] may be empty (n() == 0) for levels that receive no gradient.
  /// embedding_grad may have zero rows.
  void backward(const std::vector<Tensor>& map_grads, const Matrix& embedding_grad, bool param_grads = true);
  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

 private:
  std::vector<ResidualBlock> blocks_;
  int last_h_ = 0, last_w_ = 0;
};

class Decoder {
 public:
  Decoder() = default;
  explicit Decoder(const ModelConfig& config);

  Tensor forward(const Tensor& f_last);
  Tensor infer(const Tensor& f_last) const;
  Tensor backward(const Tensor& grad_out, GradMode mode = {});
  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

 private:
  std::vector<Conv2d> stages_;
  std::vector<Activation> acts_;
  Conv2d projection_;
};

/// Strided conv stack + GAP + linear head producing one logit per map.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int level, int in_channels, int width);

  Vector forward(const Tensor& f);
  Vector infer(const Tensor& f) const;
  Tensor backward(const Vector& grad_logits, GradMode mode = {});
  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
  int level() const noexcept { return level_; }

 private:
  int level_ = 0;
  Conv2d conv1_, conv2_;
  Activation act1_{0.2}, act2_{0.2};
  Linear head_;
  int pooled_h_ = 0, pooled_w_ = 0;
};

class Classifier {
 public:
  Classifier() = default;
  Classifier(int embedding_dim, int num_identities);

  Matrix forward(const Matrix& v);  // logits
  Matrix infer(const Matrix& v) const;
  Matrix backward(const Matrix& grad_logits, GradMode mode = {});
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

 private:
  Linear fc_;
};

/// F, G, {D_j} and C with pairwise-disjoint parameter collections.
class RainModel {
 public:
  RainModel() = default;
  RainModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  Extractor& extractor() noexcept { return extractor_; }
  const Extractor& extractor() const noexcept { return extractor_; }
  Decoder& decoder() noexcept { return decoder_; }
  const Decoder& decoder() const noexcept { return decoder_; }
  Classifier& classifier() noexcept { return classifier_; }
  const Classifier& classifier() const noexcept { return classifier_; }
  Discriminator& discriminator(int level);
  const Discriminator& discriminator(int level) const;
  std::map<int, Discriminator>& discriminators() noexcept { return discriminators_; }

  /// Arrays of one component, trainable parameters and buffers alike.
  std::vector<Param*> parameters(Component c);
  std::vector<const Param*> parameters(Component c) const;
  std::vector<Param*> all_parameters();
  std::vector<const Param*> all_parameters() const;

 private:
  ModelConfig config_;
  Extractor extractor_;
  Decoder decoder_;
  std::map<int, Discriminator> discriminators_;
  Classifier classifier_;
};

/// Packs equally sized images into an NCHW tensor.
Tensor images_to_tensor(std::span<const Image* const> images);
Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const Tensor& t, int index = 0);

// Inference-mode convenience operations on single inputs.
FeaturePyramid extract(const RainModel& model, const Image& image);
std::vector<double> pool_embedding(const Tensor& f_last);
Image decode(const RainModel& model, const Tensor& f_last);
double discriminate(const RainModel& model, int level, const Tensor& f_j);
std::vector<double> classify(const RainModel& model, std::span<const double> v);

/// Inference-mode embeddings (N x d) for a list of images, processed in
/// fixed-size chunks.
Matrix embed_images(const RainModel& model, std::span<const Image* const> images, int chunk = 64);

}  // namespace rain
