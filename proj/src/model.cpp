#include "rain/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rain {

std::pair<int, int> ModelConfig::level_extent(int level) const {
  return {input_height >> level, input_width >> level};
}

void ModelConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("model: at least one residual block required");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("model: channel counts must be positive");
  if (static_cast<int>(decoder_channels.size()) != num_blocks()) {
    throw std::invalid_argument("model: decoder_channels needs one entry per residual block");
  }
  for (int c : decoder_channels)
    if (c < 1) throw std::invalid_argument("model: decoder channel counts must be positive");
  const int div = 1 << num_blocks();
  if (input_height < div || input_width < div || input_height % div || input_width % div) {
    throw std::invalid_argument("model: input sides must be divisible by 2^num_blocks = " + std::to_string(div));
  }
  if (discriminator_levels.empty()) throw std::invalid_argument("model: discriminator_levels must be nonempty");
  for (int j : discriminator_levels) {
    if (j < 1 || j > num_blocks()) {
      throw std::invalid_argument("model: discriminator level " + std::to_string(j) + " outside [1, " +
                                  std::to_string(num_blocks()) + "]");
    }
  }
  if (discriminator_width < 1) throw std::invalid_argument("model: discriminator_width must be positive");
  if (num_identities < 2) throw std::invalid_argument("model: num_identities must be >= 2");
}

const char* component_name(Component c) {
  switch (c) {
    case Component::extractor: return "extractor";
    case Component::decoder: return "decoder";
    case Component::discriminators: return "discriminator";
    case Component::classifier: return "classifier";
  }
  return "?";
}

// ---------------------------------------------------------------- ResidualBlock

ResidualBlock::ResidualBlock(const std::string& name, int in_ch, int out_ch)
    : conv1_(name + ".conv1", in_ch, out_ch, 3, 2, 1),
      conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1),
      shortcut_(name + ".shortcut", in_ch, out_ch, 1, 2, 0),
      bn1_(name + ".bn1", out_ch),
      bn2_(name + ".bn2", out_ch),
      bn_shortcut_(name + ".bn_shortcut", out_ch) {}

Tensor ResidualBlock::forward(const Tensor& x) {
  Tensor a = act1_.forward(bn1_.forward(conv1_.forward(x)));
  Tensor b = bn2_.forward(conv2_.forward(a));
  b += bn_shortcut_.forward(shortcut_.forward(x));
  return act_out_.forward(b);
}

Tensor ResidualBlock::infer(const Tensor& x) const {
  Tensor a = act1_.infer(bn1_.infer(conv1_.infer(x)));
  Tensor b = bn2_.infer(conv2_.infer(a));
  b += bn_shortcut_.infer(shortcut_.infer(x));
  return act_out_.infer(b);
}

Tensor ResidualBlock::backward(const Tensor& grad_out, GradMode mode) {
  const GradMode inner{mode.params, true};
  Tensor g = act_out_.backward(grad_out);
  Tensor g_main = conv2_.backward(bn2_.backward(g, inner), inner);
  g_main = conv1_.backward(bn1_.backward(act1_.backward(g_main), inner), mode);
  Tensor g_short = shortcut_.backward(bn_shortcut_.backward(g, inner), mode);
  if (!mode.input) return {};
  g_main += g_short;
  return g_main;
}

void ResidualBlock::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  shortcut_.init(rng);
}

void ResidualBlock::collect(std::vector<Param*>& out) {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  shortcut_.collect(out);
  bn_shortcut_.collect(out);
}

void ResidualBlock::collect(std::vector<const Param*>& out) const {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  shortcut_.collect(out);
  bn_shortcut_.collect(out);
}

// ---------------------------------------------------------------- Extractor

Extractor::Extractor(const ModelConfig& config) {
  int in_ch = 3;
  for (int j = 0; j < config.num_blocks(); ++j) {
    blocks_.emplace_back("extractor.block" + std::to_string(j + 1), in_ch, config.channels[j]);
    in_ch = config.channels[j];
  }
}

FeaturePyramid Extractor::forward(const Tensor& images) {
  FeaturePyramid out;
  Tensor x = images;
  for (auto& block : blocks_) {
    x = block.forward(x);
    out.maps.push_back(x);
  }
  last_h_ = x.h();
  last_w_ = x.w();
  out.embedding = global_average_pool(out.maps.back());
  return out;
}

FeaturePyramid Extractor::infer(const Tensor& images) const {
  FeaturePyramid out;
  Tensor x = images;
  for (const auto& block : blocks_) {
    x = block.infer(x);
    out.maps.push_back(x);
  }
  out.embedding = global_average_pool(out.maps.back());
  return out;
}

void Extractor::backward(const std::vector<Tensor>& map_grads, const Matrix& embedding_grad, bool param_grads) {
  if (map_grads.size() != blocks_.size()) throw std::invalid_argument("extractor backward: one gradient slot per level");
  Tensor g;
  if (embedding_grad.rows() > 0) g = global_average_pool_backward(embedding_grad, last_h_, last_w_);
  for (int j = static_cast<int>(blocks_.size()) - 1; j >= 0; --j) {
    if (map_grads[j].n() > 0) {
      if (g.n() == 0) g = map_grads[j];
      else g += map_grads[j];
    }
    if (g.n() == 0) continue;  // nothing flows into this block yet
    g = blocks_[j].backward(g, GradMode{param_grads, j > 0});
  }
}

void Extractor::init(Rng& rng) {
  for (auto& b : blocks_) b.init(rng);
}

void Extractor::collect(std::vector<Param*>& out) {
  for (auto& b : blocks_) b.collect(out);
}

void Extractor::collect(std::vector<const Param*>& out) const {
  for (const auto& b : blocks_) b.collect(out);
}

// ---------------------------------------------------------------- Decoder

Decoder::Decoder(const ModelConfig& config) {
  int in_ch = config.embedding_dim();
  for (int s = 0; s < config.num_blocks(); ++s) {
    stages_.emplace_back("decoder.stage" + std::to_string(s + 1) + ".conv", in_ch, config.decoder_channels[s], 3, 1, 1);
    acts_.emplace_back(0.0);
    in_ch = config.decoder_channels[s];
  }
  projection_ = Conv2d("decoder.projection", in_ch, 3, 1, 1, 0);
}

Tensor Decoder::forward(const Tensor& f_last) {
  Tensor x = f_last;
  for (std::size_t s = 0; s < stages_.size(); ++s) x = acts_[s].forward(stages_[s].forward(upsample2x(x)));
  return projection_.forward(x);
}

Tensor Decoder::infer(const Tensor& f_last) const {
  Tensor x = f_last;
  for (std::size_t s = 0; s < stages_.size(); ++s) x = acts_[s].infer(stages_[s].infer(upsample2x(x)));
  return projection_.infer(x);
}

Tensor Decoder::backward(const Tensor& grad_out, GradMode mode) {
  const GradMode inner{mode.params, true};
  Tensor g = projection_.backward(grad_out, inner);
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    const bool need_input = s > 0 || mode.input;
    g = stages_[s].backward(acts_[s].backward(g), GradMode{mode.params, need_input});
    if (!need_input) return {};
    g = upsample2x_backward(g);
  }
  return g;
}

void Decoder::init(Rng& rng) {
  for (auto& s : stages_) s.init(rng);
  projection_.init(rng);
}

void Decoder::collect(std::vector<Param*>& out) {
  for (auto& s : stages_) s.collect(out);
  projection_.collect(out);
}

void Decoder::collect(std::vector<const Param*>& out) const {
  for (const auto& s : stages_) s.collect(out);
  projection_.collect(out);
}

// ---------------------------------------------------------------- Discriminator

Discriminator::Discriminator(int level, int in_channels, int width)
    : level_(level),
      conv1_("discriminator.level" + std::to_string(level) + ".conv1", in_channels, width, 3, 2, 1),
      conv2_("discriminator.level" + std::to_string(level) + ".conv2", width, width, 3, 2, 1),
      head_("discriminator.level" + std::to_string(level) + ".head", width, 1) {}

Vector Discriminator::forward(const Tensor& f) {
  Tensor x = act2_.forward(conv2_.forward(act1_.forward(conv1_.forward(f))));
  pooled_h_ = x.h();
  pooled_w_ = x.w();
  return head_.forward(global_average_pool(x)).col(0);
}

Vector Discriminator::infer(const Tensor& f) const {
  Tensor x = act2_.infer(conv2_.infer(act1_.infer(conv1_.infer(f))));
  return head_.infer(global_average_pool(x)).col(0);
}

Tensor Discriminator::backward(const Vector& grad_logits, GradMode mode) {
  const GradMode inner{mode.params, true};
  Matrix g = head_.backward(Matrix(grad_logits), inner);
  Tensor t = global_average_pool_backward(g, pooled_h_, pooled_w_);
  t = conv2_.backward(act2_.backward(t), inner);
  return conv1_.backward(act1_.backward(t), mode);
}

void Discriminator::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  head_.init(rng);
}

void Discriminator::collect(std::vector<Param*>& out) {
  conv1_.collect(out);
  conv2_.collect(out);
  head_.collect(out);
}

void Discriminator::collect(std::vector<const Param*>& out) const {
  conv1_.collect(out);
  conv2_.collect(out);
  head_.collect(out);
}

// ---------------------------------------------------------------- Classifier

Classifier::Classifier(int embedding_dim, int num_identities) : fc_("classifier.fc", embedding_dim, num_identities) {}

Matrix Classifier::forward(const Matrix& v) { return fc_.forward(v); }
Matrix Classifier::infer(const Matrix& v) const { return fc_.infer(v); }
Matrix Classifier::backward(const Matrix& grad_logits, GradMode mode) { return fc_.backward(grad_logits, mode); }
void Classifier::collect(std::vector<Param*>& out) { fc_.collect(out); }
void Classifier::collect(std::vector<const Param*>& out) const { fc_.collect(out); }

// ---------------------------------------------------------------- RainModel

RainModel::RainModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  extractor_ = Extractor(config_);
  decoder_ = Decoder(config_);
  for (int j : config_.discriminator_levels) {
    discriminators_.emplace(j, Discriminator(j, config_.channels[j - 1], config_.discriminator_width));
  }
  classifier_ = Classifier(config_.embedding_dim(), config_.num_identities);

  Rng rng(derive_seed(seed, 0x4d));
  extractor_.init(rng);
  decoder_.init(rng);
  for (auto& [j, d] : discriminators_) d.init(rng);
  // classifier stays zero so the initial prediction is uniform
}

Discriminator& RainModel::discriminator(int level) {
  auto it = discriminators_.find(level);
  if (it == discriminators_.end()) throw std::invalid_argument("no discriminator configured at level " + std::to_string(level));
  return it->second;
}

const Discriminator& RainModel::discriminator(int level) const {
  auto it = discriminators_.find(level);
  if (it == discriminators_.end()) throw std::invalid_argument("no discriminator configured at level " + std::to_string(level));
  return it->second;
}

std::vector<Param*> RainModel::parameters(Component c) {
  std::vector<Param*> out;
  switch (c) {
    case Component::extractor: extractor_.collect(out); break;
    case Component::decoder: decoder_.collect(out); break;
    case Component::discriminators:
      for (auto& [j, d] : discriminators_) d.collect(out);
      break;
    case Component::classifier: classifier_.collect(out); break;
  }
  return out;
}

std::vector<const Param*> RainModel::parameters(Component c) const {
  std::vector<const Param*> out;
  switch (c) {
    case Component::extractor: extractor_.collect(out); break;
    case Component::decoder: decoder_.collect(out); break;
    case Component::discriminators:
      for (const auto& [j, d] : discriminators_) d.collect(out);
      break;
    case Component::classifier: classifier_.collect(out); break;
  }
  return out;
}

std::vector<Param*> RainModel::all_parameters() {
  std::vector<Param*> out;
  for (Component c : {Component::extractor, Component::decoder, Component::discriminators, Component::classifier}) {
    auto part = parameters(c);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<const Param*> RainModel::all_parameters() const {
  std::vector<const Param*> out;
  for (Component c : {Component::extractor, Component::decoder, Component::discriminators, Component::classifier}) {
    auto part = parameters(c);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// ---------------------------------------------------------------- conversions

Tensor images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) return {};
  const int h = images.front()->height;
  const int w = images.front()->width;
  Tensor t(static_cast<int>(images.size()), 3, h, w);
  for (int n = 0; n < t.n(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w) throw std::invalid_argument("images_to_tensor: mixed image sizes");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) t.at(n, c, y, x) = img.at(y, x, c);
  }
  return t;
}

Tensor image_to_tensor(const Image& image) {
  const Image* p = &image;
  return images_to_tensor(std::span<const Image* const>(&p, 1));
}

Image tensor_to_image(const Tensor& t, int index) {
  if (t.c() != 3) throw std::invalid_argument("tensor_to_image: expected 3 channels");
  Image img(t.h(), t.w());
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = t.at(index, c, y, x);
  return img;
}

// ---------------------------------------------------------------- single-input ops

FeaturePyramid extract(const RainModel& model, const Image& image) {
  const auto& cfg = model.config();
  if (image.height != cfg.input_height || image.width != cfg.input_width) {
    throw std::invalid_argument("extract: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                ", model expects " + std::to_string(cfg.input_height) + "x" +
                                std::to_string(cfg.input_width));
  }
  return model.extractor().infer(image_to_tensor(image));
}

std::vector<double> pool_embedding(const Tensor& f_last) {
  if (f_last.n() != 1) throw std::invalid_argument("pool_embedding: expected a single feature map");
  Matrix v = global_average_pool(f_last);
  return std::vector<double>(v.data(), v.data() + v.size());
}

Image decode(const RainModel& model, const Tensor& f_last) {
  const auto& cfg = model.config();
  auto [h, w] = cfg.level_extent(cfg.num_blocks());
  if (f_last.c() != cfg.embedding_dim() || f_last.h() != h || f_last.w() != w) {
    throw std::invalid_argument("decode: feature map " + f_last.shape_string() + " does not match decoder input");
  }
  return tensor_to_image(model.decoder().infer(f_last));
}

double discriminate(const RainModel& model, int level, const Tensor& f_j) {
  const auto& cfg = model.config();
  if (!cfg.discriminator_levels.count(level)) {
    throw std::invalid_argument("discriminate: level " + std::to_string(level) + " not configured");
  }
  auto [h, w] = cfg.level_extent(level);
  if (f_j.c() != cfg.channels[level - 1] || f_j.h() != h || f_j.w() != w) {
    throw std::invalid_argument("discriminate: feature map " + f_j.shape_string() + " does not match level " +
                                std::to_string(level));
  }
  const double z = model.discriminator(level).infer(f_j)(0);
  // logistic in the numerically stable orientation, kept strictly inside (0, 1)
  const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

std::vector<double> classify(const RainModel& model, std::span<const double> v) {
  if (static_cast<int>(v.size()) != model.config().embedding_dim()) {
    throw std::invalid_argument("classify: embedding length " + std::to_string(v.size()) + " != " +
                                std::to_string(model.config().embedding_dim()));
  }
  Matrix row(1, static_cast<int>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) row(0, static_cast<int>(i)) = v[i];
  Matrix logits = model.classifier().infer(row);
  const double mx = logits.maxCoeff();
  std::vector<double> p(logits.cols());
  double sum = 0.0;
  for (int k = 0; k < logits.cols(); ++k) sum += (p[k] = std::exp(logits(0, k) - mx));
  for (double& x : p) x /= sum;
  return p;
}

Matrix embed_images(const RainModel& model, std::span<const Image* const> images, int chunk) {
  Matrix out(static_cast<int>(images.size()), model.config().embedding_dim());
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t count = std::min<std::size_t>(chunk, images.size() - begin);
    for (std::size_t i = begin; i < begin + count; ++i) {
      if (images[i]->height != model.config().input_height || images[i]->width != model.config().input_width) {
        throw std::invalid_argument("embed: image size does not match the model input");
      }
    }
    FeaturePyramid p = model.extractor().infer(images_to_tensor(images.subspan(begin, count)));
    out.middleRows(static_cast<int>(begin), static_cast<int>(count)) = p.embedding;
  }
  return out;
}

}  // namespace rain
