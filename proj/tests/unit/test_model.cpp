#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "rain/model.hpp"
#include "rain/optim.hpp"

using namespace rain;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.input_height = 8;
  c.input_width = 8;
  c.channels = {3, 4};
  c.decoder_channels = {3, 2};
  c.discriminator_width = 3;
  c.discriminator_levels = {1, 2};
  c.num_identities = 3;
  return c;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

// analytic vs numeric gradient over every trainable value in `params`
double param_grad_error(std::vector<Param*> params, const std::function<double()>& loss,
                        const std::function<void()>& backward) {
  zero_grads(params);
  backward();
  std::vector<double> analytic, numeric;
  for (Param* p : params) {
    if (!p->trainable) continue;
    analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());
    for (double& v : p->value) numeric.push_back(test::central_difference(loss, v, 1e-5));
  }
  return test::rel_error(analytic, numeric);
}

std::vector<double> all_values(const RainModel& m) {
  std::vector<double> out;
  for (const Param* p : m.all_parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

}  // namespace

TEST_CASE("toy extractor shapes") {
  const RainModel model(ModelConfig{}, 1);
  Rng rng(1);
  const Image img = test::random_image(32, 32, rng);
  const auto f = extract(model, img);
  REQUIRE(f.maps.size() == 2);
  CHECK(f.maps[0].c() == 16);
  CHECK(f.maps[0].h() == 16);
  CHECK(f.maps[0].w() == 16);
  CHECK(f.maps[1].c() == 32);
  CHECK(f.maps[1].h() == 8);
  CHECK(f.maps[1].w() == 8);
  CHECK(f.embedding.cols() == 32);
  CHECK(f.embedding.rows() == 1);
  CHECK_THROWS_AS(extract(model, test::random_image(16, 32, rng)), std::invalid_argument);
}

TEST_CASE("inference is deterministic and matches per-image extraction") {
  const RainModel model(ModelConfig{}, 2);
  Rng rng(2);
  const Image a = test::random_image(32, 32, rng), b = test::random_image(32, 32, rng);
  const auto f1 = extract(model, a), f2 = extract(model, a);
  CHECK(f1.embedding == f2.embedding);
  CHECK(f1.maps[0] == f2.maps[0]);
  const std::vector<const Image*> both{&a, &b};
  const Matrix e = embed_images(model, both);
  CHECK((e.row(0) - f1.embedding.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((e.row(1) - extract(model, b).embedding.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("same seed gives the same parameters") {
  CHECK(all_values(RainModel(ModelConfig{}, 5)) == all_values(RainModel(ModelConfig{}, 5)));
  CHECK(all_values(RainModel(ModelConfig{}, 5)) != all_values(RainModel(ModelConfig{}, 6)));
}

TEST_CASE("zero weights give a zero embedding") {
  RainModel model(ModelConfig{}, 3);
  for (Param* p : model.parameters(Component::extractor))
    if (p->trainable) std::fill(p->value.begin(), p->value.end(), 0.0);
  Rng rng(3);
  const auto f = extract(model, test::random_image(32, 32, rng));
  CHECK(f.embedding.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("global average pooling") {
  Tensor c(1, 4, 3, 5, 3.0);
  for (double v : pool_embedding(c)) CHECK(v == 3.0);
  Tensor t(1, 1, 2, 2);
  t.at(0, 0, 0, 0) = 1;
  t.at(0, 0, 0, 1) = 2;
  t.at(0, 0, 1, 0) = 3;
  t.at(0, 0, 1, 1) = 4;
  CHECK(pool_embedding(t) == std::vector<double>{2.5});
  Rng rng(4);
  Tensor r = test::random_tensor(1, 3, 4, 4, rng);
  const auto base = pool_embedding(r);
  for (double& v : r.values()) v *= -2.5;
  const auto scaled = pool_embedding(r);
  for (std::size_t k = 0; k < base.size(); ++k) CHECK(scaled[k] == doctest::Approx(-2.5 * base[k]).epsilon(1e-14));
}

TEST_CASE("decoder shape, determinism and sensitivity") {
  const RainModel model(ModelConfig{}, 4);
  Rng rng(5);
  Tensor f = test::random_tensor(1, 32, 8, 8, rng);
  const Image out = decode(model, f);
  CHECK(out.height == 32);
  CHECK(out.width == 32);
  CHECK(decode(model, f) == out);
  CHECK_THROWS_AS(decode(model, test::random_tensor(1, 16, 8, 8, rng)), std::invalid_argument);

  double total_sensitivity = 0.0;
  auto probe = [&]() {
    const Image o = decode(model, f);
    return std::accumulate(o.data.begin(), o.data.end(), 0.0);
  };
  for (int i = 0; i < 16; ++i) total_sensitivity += std::abs(test::central_difference(probe, f.values()[i * 37]));
  CHECK(total_sensitivity > 0.0);
}

TEST_CASE("discriminator outputs") {
  const RainModel model(ModelConfig{}, 6);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const double p = discriminate(model, 2, test::random_tensor(1, 32, 8, 8, rng, 3.0));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  CHECK(discriminate(model, 2, Tensor(1, 32, 8, 8)) == 0.5);
  CHECK(discriminate(model, 1, Tensor(1, 16, 16, 16)) == 0.5);
  // saturated logits still land strictly inside (0, 1)
  const double big = discriminate(model, 2, test::random_tensor(1, 32, 8, 8, rng, 1e6));
  CHECK(big > 0.0);
  CHECK(big < 1.0);

  ModelConfig single;
  single.discriminator_levels = {2};
  const RainModel one(single, 6);
  CHECK_THROWS_AS(discriminate(one, 1, Tensor(1, 16, 16, 16)), std::invalid_argument);
  CHECK_THROWS_AS(discriminate(model, 2, Tensor(1, 16, 8, 8)), std::invalid_argument);
}

TEST_CASE("lone discriminator fits separable maps") {
  Rng rng(7);
  Discriminator d(1, 8, 8);
  d.init(rng);
  std::vector<Param*> params;
  d.collect(params);
  AdamConfig cfg;
  cfg.lr = 3e-3;
  Adam opt(cfg);
  std::normal_distribution<double> noise(0.0, 1.0);
  // class 1: vertical stripes of amplitude 1; class 0: smooth noise only
  auto make = [&](int n, std::vector<int>& y) {
    Tensor t(n, 8, 8, 8);
    y.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      y[i] = i % 2;
      for (int c = 0; c < 8; ++c)
        for (int r = 0; r < 8; ++r)
          for (int x = 0; x < 8; ++x) t.at(i, c, r, x) = 0.5 * noise(rng) + (y[i] && c < 2 ? (x % 2 ? 1.0 : -1.0) : 0.0);
    }
    return t;
  };
  std::vector<int> y;
  for (int step = 0; step < 200; ++step) {
    const Tensor batch = make(32, y);
    zero_grads(params);
    const Vector z = d.forward(batch);
    Vector dz(z.size());
    for (int i = 0; i < z.size(); ++i) dz(i) = (1.0 / (1.0 + std::exp(-z(i))) - y[i]) / z.size();
    d.backward(dz, GradMode{true, false});
    opt.step(params);
  }
  const Tensor test_batch = make(200, y);
  const Vector z = d.infer(test_batch);
  int correct = 0;
  for (int i = 0; i < z.size(); ++i) correct += (z(i) > 0.0) == (y[i] == 1);
  CHECK(correct / 200.0 > 0.95);
}

TEST_CASE("classifier outputs") {
  RainModel model(ModelConfig{}, 8);
  Rng rng(8);
  std::normal_distribution<double> n(0.0, 4.0);
  std::vector<double> v(32);
  for (double& x : v) x = n(rng);
  auto p = classify(model, v);
  REQUIRE(p.size() == 10);
  for (double x : p) CHECK(x == doctest::Approx(0.1).epsilon(1e-12));
  CHECK_THROWS_AS(classify(model, std::vector<double>(31)), std::invalid_argument);

  for (Param* q : model.parameters(Component::classifier))
    for (double& x : q->value) x = n(rng);
  p = classify(model, v);
  double sum = 0.0;
  for (double x : p) {
    CHECK(x >= 0.0);
    sum += x;
  }
  CHECK(std::abs(sum - 1.0) <= 1e-6);
  const auto best = std::max_element(p.begin(), p.end()) - p.begin();

  // shift every logit by the same amount through the bias
  for (Param* q : model.parameters(Component::classifier))
    if (q->name.find("bias") != std::string::npos)
      for (double& x : q->value) x += 123.0;
  const auto shifted = classify(model, v);
  CHECK(std::max_element(shifted.begin(), shifted.end()) - shifted.begin() == best);
  for (std::size_t k = 0; k < p.size(); ++k) CHECK(shifted[k] == doctest::Approx(p[k]).epsilon(1e-9));
}

TEST_CASE("component parameter sets are disjoint and named stably") {
  RainModel model(ModelConfig{}, 9);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (Component c : {Component::extractor, Component::decoder, Component::discriminators, Component::classifier}) {
    for (const Param* p : model.parameters(c)) {
      CHECK(seen.insert(p->name).second);
      ++total;
    }
  }
  CHECK(total == model.all_parameters().size());
  RainModel again(ModelConfig{}, 10);
  std::vector<std::string> a, b;
  for (const Param* p : model.all_parameters()) a.push_back(p->name);
  for (const Param* p : again.all_parameters()) b.push_back(p->name);
  CHECK(a == b);
}

TEST_CASE("invalid model configs") {
  ModelConfig c;
  c.discriminator_levels = {3};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.input_height = 30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.decoder_channels = {8};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.discriminator_levels.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("extractor gradient (training mode)") {
  RainModel model(small_config(), 11);
  Rng rng(12);
  const Tensor x = test::random_tensor(3, 3, 8, 8, rng);
  const Tensor r1 = test::random_tensor(3, 3, 4, 4, rng);
  const Tensor r2 = test::random_tensor(3, 4, 2, 2, rng);
  Matrix re(3, 4);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) re(i, k) = std::normal_distribution<double>(0.0, 1.0)(rng);
  auto loss = [&]() {
    const auto f = model.extractor().forward(x);
    return dot(f.maps[0], r1) + dot(f.maps[1], r2) + (f.embedding.array() * re.array()).sum();
  };
  auto backward = [&]() {
    loss();
    model.extractor().backward({r1, r2}, re, true);
  };
  CHECK(param_grad_error(model.parameters(Component::extractor), loss, backward) < 1e-6);
}

TEST_CASE("decoder gradient") {
  RainModel model(small_config(), 13);
  Rng rng(14);
  Tensor f = test::random_tensor(2, 4, 2, 2, rng);
  const Tensor r = test::random_tensor(2, 3, 8, 8, rng);
  // zero biases put all-zero patches exactly on the ReLU kink
  std::normal_distribution<double> n(0.0, 0.1);
  for (Param* p : model.parameters(Component::decoder))
    if (p->name.find("bias") != std::string::npos)
      for (double& v : p->value) v = n(rng);
  auto loss = [&]() { return dot(model.decoder().forward(f), r); };
  Tensor input_grad;
  auto backward = [&]() {
    loss();
    input_grad = model.decoder().backward(r, GradMode{true, true});
  };
  CHECK(param_grad_error(model.parameters(Component::decoder), loss, backward) < 1e-6);
  std::vector<double> numeric;
  for (double& v : f.values()) numeric.push_back(test::central_difference(loss, v, 1e-5));
  CHECK(test::rel_error(input_grad.values(), numeric) < 1e-6);
}

TEST_CASE("discriminator gradient") {
  RainModel model(small_config(), 15);
  Rng rng(16);
  for (int level : {1, 2}) {
    Discriminator& d = model.discriminator(level);
    const int c = small_config().channels[level - 1];
    const int side = 8 >> level;
    Tensor f = test::random_tensor(4, c, side, side, rng);
    Vector r(4);
    r << 0.3, -1.2, 0.7, 2.0;
    auto loss = [&]() { return d.forward(f).dot(r); };
    Tensor input_grad;
    auto backward = [&]() {
      loss();
      input_grad = d.backward(r, GradMode{true, true});
    };
    std::vector<Param*> params;
    d.collect(params);
    CHECK(param_grad_error(params, loss, backward) < 1e-6);
    std::vector<double> numeric;
    for (double& v : f.values()) numeric.push_back(test::central_difference(loss, v, 1e-5));
    CHECK(test::rel_error(input_grad.values(), numeric) < 1e-6);
  }
}

TEST_CASE("classifier gradient") {
  RainModel model(small_config(), 17);
  Rng rng(18);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Param* p : model.parameters(Component::classifier))
    for (double& v : p->value) v = n(rng);
  Matrix v(5, 4), r(5, 3);
  for (int i = 0; i < 5; ++i) {
    for (int k = 0; k < 4; ++k) v(i, k) = n(rng);
    for (int k = 0; k < 3; ++k) r(i, k) = n(rng);
  }
  auto loss = [&]() { return (model.classifier().forward(v).array() * r.array()).sum(); };
  Matrix input_grad;
  auto backward = [&]() {
    loss();
    input_grad = model.classifier().backward(r, GradMode{true, true});
  };
  CHECK(param_grad_error(model.parameters(Component::classifier), loss, backward) < 1e-7);
  std::vector<double> analytic, numeric;
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 4; ++k) {
      analytic.push_back(input_grad(i, k));
      numeric.push_back(test::central_difference(loss, v(i, k), 1e-5));
    }
  CHECK(test::rel_error(analytic, numeric) < 1e-7);
}

TEST_CASE("input-only backward leaves parameter gradients untouched") {
  RainModel model(small_config(), 19);
  Rng rng(20);
  Discriminator& d = model.discriminator(2);
  std::vector<Param*> params;
  d.collect(params);
  zero_grads(params);
  d.forward(test::random_tensor(2, 4, 2, 2, rng));
  Vector r(2);
  r << 1.0, -1.0;
  const Tensor g = d.backward(r, GradMode{false, true});
  for (const Param* p : params)
    for (double v : p->grad) CHECK(v == 0.0);
  CHECK(std::any_of(g.values().begin(), g.values().end(), [](double v) { return v != 0.0; }));
}
