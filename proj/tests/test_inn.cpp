#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nerfmark/gradcheck.hpp"
#include "nerfmark/inn.hpp"
#include "nerfmark/metrics.hpp"
#include "nerfmark/rng.hpp"

using namespace nerfmark;

namespace {

float max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

void set_param(CouplingBlock& block, const std::string& name, float value) {
  bool found = false;
  block.visit_params([&](const std::string& n, Tensor& t) {
    if (n == name) {
      std::fill(t.data().begin(), t.data().end(), value);
      found = true;
    }
  });
  REQUIRE(found);
}

// Central differences are meaningless across a rectifier kink, so gradient
// checks run the network in a smooth regime: small weights and positive
// biases keep every leaky-relu preactivation strictly positive while all
// parameter paths stay active.
template <class Model>
void smooth_randomize(Model& model, Rng& rng, float w_std = 0.008f, float r_bias = 0.5f) {
  model.visit_params([&](const std::string& name, Tensor& t) {
    const bool is_bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (!is_bias) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = w_std * rng.normal();
      return;
    }
    float bias = 0.4f;  // hidden layers
    if (name.find("conv6.b") != std::string::npos) {
      bias = name.find("r.conv6") != std::string::npos ? r_bias
             : name.find("f.conv6") != std::string::npos ? 0.1f
                                                         : 0.15f;
    }
    std::fill(t.data().begin(), t.data().end(), bias);
  });
}

}  // namespace

TEST_CASE("zero-initialized coupling block is the identity") {
  Rng rng(1);
  CouplingBlock block(4, InnConfig{}, rng);
  Tensor cover = randn({1, 4, 4, 4}, rng);
  Tensor mark = randn({1, 4, 4, 4}, rng);
  auto [c2, m2] = block.forward(cover, mark);
  CHECK(max_abs_diff(c2, cover) == 0.0f);
  CHECK(max_abs_diff(m2, mark) == 0.0f);
}

TEST_CASE("hand-set scalar networks reproduce the closed-form coupling arithmetic") {
  Rng rng(2);
  InnConfig cfg;
  cfg.growth = 4;
  CouplingBlock block(1, cfg, rng);
  // Zero final weights leave the output equal to the final bias.
  set_param(block, "f.conv6.b", 1.0f);
  set_param(block, "r.conv6.b", 0.5f);
  set_param(block, "y.conv6.b", 0.25f);

  Tensor cover({1, 1, 1, 1}, {2.0f});
  Tensor mark({1, 1, 1, 1}, {3.0f});
  auto [c2, m2] = block.forward(cover, mark);
  CHECK(c2[0] == doctest::Approx(3.0f));
  const double expected = 3.0 * std::exp(0.5) + 0.25;  // sigma(0.5) = 0.5
  CHECK(m2[0] == doctest::Approx(expected).epsilon(1e-6));

  auto [c1, m1] = block.inverse(c2, m2);
  CHECK(c1[0] == doctest::Approx(2.0f).epsilon(1e-6));
  CHECK(m1[0] == doctest::Approx(3.0f).epsilon(1e-6));
}

TEST_CASE("coupling inverse undoes coupling forward for random parameters") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    InnConfig cfg;
    cfg.growth = 8;
    CouplingBlock block(4, cfg, rng);
    // Randomize the output layers too so the block is far from identity.
    block.visit_params([&](const std::string&, Tensor& t) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.05f * rng.normal();
    });
    Tensor cover = randn({2, 4, 4, 4}, rng);
    Tensor mark = randn({2, 4, 4, 4}, rng);
    auto [c2, m2] = block.forward(cover, mark);
    auto [c1, m1] = block.inverse(c2, m2);
    CHECK(max_abs_diff(c1, cover) < 1e-4f);
    CHECK(max_abs_diff(m1, mark) < 1e-4f);
  }
}

TEST_CASE("branch shape mismatches are rejected") {
  Rng rng(3);
  CouplingBlock block(4, InnConfig{}, rng);
  CHECK_THROWS_AS(block.forward(Tensor({1, 4, 4, 4}), Tensor({1, 4, 2, 2})),
                  std::invalid_argument);
  CouplingStack stack(3, InnConfig{}, rng);
  CHECK_THROWS_AS(embed(Tensor({1, 3, 8, 8}), Tensor({1, 3, 6, 6}), stack),
                  std::invalid_argument);
  CHECK_THROWS_AS(extract(Tensor({1, 3, 8, 8}), Tensor({1, 12, 2, 2}), stack),
                  std::invalid_argument);
}

TEST_CASE("full stack: forward-then-inverse reproduces both branches") {
  Rng rng(4);
  InnConfig cfg;
  cfg.growth = 8;
  CouplingStack stack(3, cfg, rng);
  stack.randomize_all(rng, 0.02f);
  REQUIRE(stack.blocks() == 8);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = randn({1, 12, 8, 8}, rng);
    Tensor b = randn({1, 12, 8, 8}, rng);
    auto [c2, m2] = stack.forward(a, b);
    auto [c1, m1] = stack.inverse(c2, m2);
    CHECK(max_abs_diff(c1, a) < 1e-4f);
    CHECK(max_abs_diff(m1, b) < 1e-4f);
  }
}

TEST_CASE("embed with a fresh stack returns the cover and dwt of the watermark") {
  Rng rng(5);
  CouplingStack stack(3, InnConfig{}, rng);  // zero-init finals: identity
  Tensor cover = rand_uniform({1, 3, 8, 8}, rng);
  Tensor mark = rand_uniform({1, 3, 8, 8}, rng);
  StegoBundle bundle = embed(cover, mark, stack);
  CHECK(max_abs_diff(bundle.stego, cover) < 1e-6f);
  CHECK(max_abs_diff(bundle.lost_info, dwt_haar(mark)) < 1e-6f);

  // Extraction with a sampled z on the identity stack returns iwt(z).
  Rng zrng(77);
  Tensor z = sample_z(bundle.lost_info.shape(), zrng);
  auto [irec, rw] = extract(bundle.stego, z, stack);
  CHECK(max_abs_diff(rw, iwt_haar(z)) < 1e-5f);
  CHECK(max_abs_diff(irec, cover) < 1e-5f);
}

TEST_CASE("extract with the exact lost information recovers cover and watermark") {
  Rng rng(6);
  InnConfig cfg;
  cfg.growth = 8;
  CouplingStack stack(3, cfg, rng);
  stack.randomize_all(rng, 0.02f);
  Tensor cover = rand_uniform({1, 3, 8, 8}, rng);
  Tensor mark = rand_uniform({1, 3, 8, 8}, rng);
  StegoBundle bundle = embed(cover, mark, stack);
  auto [irec, rw] = extract(bundle.stego, bundle.lost_info, stack);
  CHECK(max_abs_diff(irec, cover) < 1e-4f);
  CHECK(max_abs_diff(rw, mark) < 1e-4f);
}

TEST_CASE("embed and extract read the same parameters") {
  Rng rng(7);
  InnConfig cfg;
  cfg.growth = 8;
  CouplingStack stack(3, cfg, rng);
  stack.randomize_all(rng, 0.02f);
  Tensor cover = rand_uniform({1, 3, 8, 8}, rng);
  Tensor mark = rand_uniform({1, 3, 8, 8}, rng);
  const StegoBundle before = embed(cover, mark, stack);

  // Mutating one weight changes the embedding...
  stack.visit_params([&](const std::string& n, Tensor& t) {
    if (n == "block3.f.conv6.b") t[0] += 0.5f;
  });
  const StegoBundle after = embed(cover, mark, stack);
  CHECK(max_abs_diff(before.stego, after.stego) > 1e-4f);

  // ...and the inverse picks up the same mutation: the round trip stays exact.
  auto [irec, rw] = extract(after.stego, after.lost_info, stack);
  CHECK(max_abs_diff(irec, cover) < 1e-4f);
  CHECK(max_abs_diff(rw, mark) < 1e-4f);
}

TEST_CASE("clamped exponent keeps outputs finite for large inputs") {
  Rng rng(8);
  InnConfig cfg;
  cfg.growth = 8;
  CouplingStack stack(1, cfg, rng);
  stack.randomize_all(rng, 0.02f);
  Tensor a = rand_uniform({1, 4, 4, 4}, rng, -1000.0f, 1000.0f);
  Tensor b = rand_uniform({1, 4, 4, 4}, rng, -1000.0f, 1000.0f);
  auto [c2, m2] = stack.forward(a, b);
  for (std::size_t i = 0; i < c2.size(); ++i) REQUIRE(std::isfinite(c2[i]));
  for (std::size_t i = 0; i < m2.size(); ++i) REQUIRE(std::isfinite(m2[i]));
}

TEST_CASE("sample_z is seed-deterministic with standard-normal moments") {
  Rng r1(99), r2(99);
  Tensor z1 = sample_z({1, 12, 16, 16}, r1);
  Tensor z2 = sample_z({1, 12, 16, 16}, r2);
  CHECK(z1.data() == z2.data());

  Rng r3(123);
  Tensor big = sample_z({1000000}, r3);
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < big.size(); ++i) {
    s += big[i];
    s2 += static_cast<double>(big[i]) * big[i];
  }
  const double m = s / static_cast<double>(big.size());
  const double v = s2 / static_cast<double>(big.size()) - m * m;
  CHECK(m > -0.01);
  CHECK(m < 0.01);
  CHECK(v > 0.99);
  CHECK(v < 1.01);
}

TEST_CASE("a coupling block and embed are differentiable") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    InnConfig cfg;
    cfg.growth = 4;
    CouplingBlock block(4, cfg, rng);
    smooth_randomize(block, rng);
    Tensor mark = randn({1, 4, 4, 4}, rng, 0.3f);
    Tensor c1 = rand_uniform({1, 4, 4, 4}, rng, 0.75f, 1.25f);
    Tensor c2w = rand_uniform({1, 4, 4, 4}, rng, 0.75f, 1.25f);
    auto fn_block = [&](const Tensor& t) {
      auto [co, mo] = block.forward(t, mark);
      return add(sum(mul(co, c1)), sum(mul(mo, c2w)));
    };
    const double err_block = gradient_check(fn_block, randn({1, 4, 4, 4}, rng, 0.3f), 1e-3);
    INFO("seed " << seed << " coupling err " << err_block);
    CHECK(err_block < 1e-3);
  }

  Rng rng(9);
  InnConfig cfg;
  cfg.growth = 4;
  CouplingStack stack(1, cfg, rng);
  smooth_randomize(stack, rng, 0.002f, 0.1f);  // keep 8 blocks of exp scaling tame
  Tensor wm = rand_uniform({1, 1, 4, 4}, rng);
  Tensor cw = rand_uniform({1, 1, 4, 4}, rng, 0.75f, 1.25f);
  auto fn_embed = [&](const Tensor& t) {
    return sum(mul(embed(t, wm, stack).stego, cw));
  };
  const double err_embed = gradient_check(fn_embed, rand_uniform({1, 1, 4, 4}, rng, 0.2f, 0.8f), 1e-3);
  INFO("embed err " << err_embed);
  CHECK(err_embed < 1e-3);
}
