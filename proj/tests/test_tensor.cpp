#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"

#include "gdt/checkpoint.hpp"
#include "gdt/errors.hpp"
#include "gdt/ops.hpp"
#include "gdt/optim.hpp"
#include "support.hpp"

using namespace gdt;
using gdt::testing::max_gradient_error;
using gdt::testing::random_tensor;
using gdt::testing::run_backward;

namespace {

// Per-operation gradient tolerance: 1e-4 relative with a 1e-6 absolute floor.
constexpr double kGradTol = 1e-4;

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Straight evaluation of masked causal attention, one head at a time, with no
// shared code path with the library kernel.
std::vector<double> dense_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t n_seq, std::size_t len,
                                    std::size_t embed, std::size_t heads, const std::vector<std::uint8_t>& mask) {
  std::vector<double> out(n_seq * len * embed, 0.0);
  const std::size_t hd = embed / heads;
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<long double> w(len, 0.0L);
        long double norm = 0.0L;
        long double best = -INFINITY;
        std::vector<long double> scores(len, 0.0L);
        for (std::size_t j = 0; j <= i; ++j) {
          if (!mask[s * len + j]) continue;
          long double dot = 0.0L;
          for (std::size_t d = 0; d < hd; ++d) {
            dot += static_cast<long double>(q[(s * len + i) * embed + h * hd + d]) * k[(s * len + j) * embed + h * hd + d];
          }
          scores[j] = dot / std::sqrt(static_cast<long double>(hd));
          best = std::max(best, scores[j]);
        }
        if (best == -INFINITY) continue;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!mask[s * len + j]) continue;
          w[j] = std::exp(scores[j] - best);
          norm += w[j];
        }
        for (std::size_t d = 0; d < hd; ++d) {
          long double acc = 0.0L;
          for (std::size_t j = 0; j <= i; ++j) acc += w[j] / norm * v[(s * len + j) * embed + h * hd + d];
          out[(s * len + i) * embed + h * hd + d] = static_cast<double>(acc);
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul hand cases and shape errors") {
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {3, -1, 2, 5});
  CHECK(to_vec(matmul(id, m)) == to_vec(m));

  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(to_vec(c) == std::vector<double>{17, 39});

  try {
    matmul(a, Tensor::zeros({3, 1}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x2]") != std::string::npos);
    CHECK(msg.find("[3x1]") != std::string::npos);
  }
}

TEST_CASE("matmul matches a naive triple loop") {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({7, 13}, rng, false);
  const Tensor b = random_tensor({13, 5}, rng, false);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      long double acc = 0.0L;
      for (std::size_t l = 0; l < 13; ++l) acc += static_cast<long double>(a.at({i, l})) * b.at({l, j});
      CHECK(c.at({i, j}) == doctest::Approx(static_cast<double>(acc)).epsilon(1e-13));
    }
  }
}

TEST_CASE("matmul gradient of sum matches central differences within 1e-6") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  CHECK(max_gradient_error({a, b}, [&] { return sum(matmul(a, b)); }) < 1e-6);
}

TEST_CASE("every differentiable op agrees with central differences") {
  std::mt19937_64 rng(5);
  // Weighted sums avoid losses whose gradients are trivially constant.
  auto weighted = [&](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

  SUBCASE("linear") {
    Tensor x = random_tensor({5, 3}, rng), w = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
    const Tensor r = random_tensor({5, 4}, rng, false);
    CHECK(max_gradient_error({x, w, b}, [&] { return weighted(linear(x, w, b), r); }) < kGradTol);
  }
  SUBCASE("add, mul, scale") {
    Tensor x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
    const Tensor r = random_tensor({3, 4}, rng, false);
    CHECK(max_gradient_error({x, y}, [&] { return weighted(scale(mul(add(x, y), x), -1.7), r); }) < kGradTol);
  }
  SUBCASE("softmax along either axis") {
    Tensor x = random_tensor({4, 5}, rng);
    const Tensor r = random_tensor({4, 5}, rng, false);
    CHECK(max_gradient_error({x}, [&] { return weighted(softmax(x, 1), r); }) < kGradTol);
    CHECK(max_gradient_error({x}, [&] { return weighted(softmax(x, 0), r); }) < kGradTol);
  }
  SUBCASE("layer_norm within 1e-5") {
    Tensor x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    const Tensor r = random_tensor({4, 6}, rng, false);
    CHECK(max_gradient_error({x, g, b}, [&] { return weighted(layer_norm(x, g, b, 1e-5), r); }) < 1e-5);
  }
  SUBCASE("gelu and tanh") {
    Tensor x = random_tensor({3, 5}, rng, true, 2.0);
    const Tensor r = random_tensor({3, 5}, rng, false);
    CHECK(max_gradient_error({x}, [&] { return weighted(gelu(x), r); }) < kGradTol);
    CHECK(max_gradient_error({x}, [&] { return weighted(gdt::tanh(x), r); }) < kGradTol);
  }
  SUBCASE("gather, interleave and select rows") {
    Tensor table = random_tensor({6, 3}, rng);
    Tensor p = random_tensor({4, 3}, rng), q = random_tensor({4, 3}, rng);
    const std::vector<std::size_t> idx{5, 0, 2, 2};
    const Tensor r = random_tensor({4, 3}, rng, false);
    const Tensor r2 = random_tensor({8, 3}, rng, false);
    CHECK(max_gradient_error({table}, [&] { return weighted(gather_rows(table, idx), r); }) < kGradTol);
    CHECK(max_gradient_error({p, q}, [&] {
            const std::vector<Tensor> parts{p, q};
            return weighted(interleave_rows(parts), r2);
          }) < kGradTol);
    CHECK(max_gradient_error({p}, [&] { return sum(mul(select_rows(p, 2, 1), select_rows(p, 2, 0))); }) < kGradTol);
  }
  SUBCASE("causal attention with padding") {
    Tensor q = random_tensor({8, 4}, rng), k = random_tensor({8, 4}, rng), v = random_tensor({8, 4}, rng);
    const std::vector<std::uint8_t> mask{0, 1, 1, 1, 1, 1, 1, 1};
    const Tensor r = random_tensor({8, 4}, rng, false);
    CHECK(max_gradient_error({q, k, v}, [&] { return weighted(causal_attention(q, k, v, 2, 2, mask), r); }) <
          kGradTol);
  }
  SUBCASE("masked mse") {
    Tensor p = random_tensor({4, 2}, rng);
    const Tensor t = random_tensor({4, 2}, rng, false);
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    CHECK(max_gradient_error({p}, [&] { return masked_mse(p, t, mask); }) < kGradTol);
  }
}

TEST_CASE("softmax values, simplex and stability") {
  const Tensor flat = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : flat.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] < 1e-300);

  // Reference digits evaluated to 40 significant figures.
  const Tensor s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  const double ref[3] = {0.09003057317038045799802210148449179786791, 0.2447284710547976524729596183407627971993,
                         0.6652409557748218895290182801747454049327};
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.data()[i] - ref[i]) < 1e-12);

  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({20, 17}, rng, false, 30.0);
  const Tensor y = softmax(x, 1);
  for (std::size_t i = 0; i < 20; ++i) {
    long double mx = -INFINITY, z = 0.0L, total = 0.0;
    for (std::size_t j = 0; j < 17; ++j) mx = std::max<long double>(mx, x.at({i, j}));
    for (std::size_t j = 0; j < 17; ++j) z += std::exp(static_cast<long double>(x.at({i, j})) - mx);
    for (std::size_t j = 0; j < 17; ++j) {
      const double v = y.at({i, j});
      CHECK(v >= 0.0);
      CHECK(std::abs(v - static_cast<double>(std::exp(static_cast<long double>(x.at({i, j})) - mx) / z)) < 1e-12);
      total += v;
    }
    CHECK(std::abs(static_cast<double>(total) - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(softmax(x, 2), DimensionError);
}

TEST_CASE("layer_norm normalizes rows") {
  const Tensor one = Tensor::full({4}, 1.0), zero = Tensor::zeros({4});
  const Tensor c = layer_norm(Tensor::from({1, 4}, {2.5, 2.5, 2.5, 2.5}), one, zero, 1e-5);
  for (double v : c.data()) CHECK(v == 0.0);

  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({10, 32}, rng, false, 5.0);
  const Tensor ones = Tensor::full({32}, 1.0), zeros = Tensor::zeros({32});
  const Tensor y = layer_norm(x, ones, zeros, 1e-12);
  for (std::size_t i = 0; i < 10; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 32; ++j) mean += y.at({i, j});
    mean /= 32;
    for (std::size_t j = 0; j < 32; ++j) var += (y.at({i, j}) - mean) * (y.at({i, j}) - mean);
    var /= 32;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(layer_norm(x, Tensor::full({31}, 1.0), zeros, 1e-5), DimensionError);
}

TEST_CASE("attention: single token, three-token oracle, multi-head oracle") {
  const std::vector<std::uint8_t> only_last{0, 0, 1};
  const Tensor q1 = Tensor::from({3, 2}, {0.3, -0.1, 2.0, 1.0, 0.7, 0.2});
  const Tensor v1 = Tensor::from({3, 2}, {9, 9, 8, 8, 1.5, -2.5});
  const Tensor single = causal_attention(q1, q1, v1, 1, 1, only_last);
  // Rows with no visible key are zero; the last row attends only to itself.
  CHECK(single.at({0, 0}) == 0.0);
  CHECK(single.at({2, 0}) == 1.5);
  CHECK(single.at({2, 1}) == -2.5);

  std::mt19937_64 rng(21);
  const std::vector<std::uint8_t> all{1, 1, 1};
  const Tensor q = random_tensor({3, 4}, rng, false), k = random_tensor({3, 4}, rng, false),
               v = random_tensor({3, 4}, rng, false);
  const auto ref3 = dense_attention(to_vec(q), to_vec(k), to_vec(v), 1, 3, 4, 1, all);
  const Tensor out3 = causal_attention(q, k, v, 1, 1, all);
  for (std::size_t i = 0; i < ref3.size(); ++i) CHECK(std::abs(out3.data()[i] - ref3[i]) < 1e-10);

  const std::vector<std::uint8_t> mask{0, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1};
  const Tensor Q = random_tensor({12, 8}, rng, false), Kt = random_tensor({12, 8}, rng, false),
               V = random_tensor({12, 8}, rng, false);
  const auto ref = dense_attention(to_vec(Q), to_vec(Kt), to_vec(V), 2, 6, 8, 4, mask);
  const Tensor out = causal_attention(Q, Kt, V, 2, 4, mask);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.data()[i] - ref[i]) < 1e-10);
}

TEST_CASE("backward semantics") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 3}, rng);

  run_backward([&] { return sum(x); });
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  run_backward([&] { return sum(mul(x, x)); });
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]));

  Tape tape;
  TapeScope scope(tape);
  const Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // not a scalar
  const Tensor loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);  // second call without reset
}

TEST_CASE("tape replay after reset reproduces gradients bit for bit") {
  std::mt19937_64 rng(8);
  Tensor w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
  const Tensor x = random_tensor({5, 4}, rng, false);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(gdt::tanh(linear(x, w, b)));
  tape.backward(loss);
  const auto gw = std::vector<double>(w.grad().begin(), w.grad().end());
  const auto gb = std::vector<double>(b.grad().begin(), b.grad().end());
  tape.reset_gradients();
  tape.backward(loss);
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == gw);
  CHECK(std::vector<double>(b.grad().begin(), b.grad().end()) == gb);
}

TEST_CASE("operations are deterministic") {
  std::mt19937_64 a(77), b(77);
  const Tensor x = random_tensor({6, 8}, a, false);
  const Tensor y = random_tensor({6, 8}, b, false);
  std::mt19937_64 r1(5), r2(5);
  CHECK(to_vec(dropout(gelu(x), 0.3, r1)) == to_vec(dropout(gelu(y), 0.3, r2)));
}

TEST_CASE("dropout is inverted and identity at p = 0") {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::full({100, 100}, 1.0);
  CHECK(to_vec(dropout(x, 0.0, rng)) == to_vec(x));
  const Tensor y = dropout(x, 0.25, rng);
  double total = 0.0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15));
    total += v;
  }
  CHECK(total / 1e4 == doctest::Approx(1.0).epsilon(0.03));
  CHECK_THROWS_AS(dropout(x, 1.0, rng), RangeError);
}

TEST_CASE("adam: zero gradient is a no-op, first step matches closed form") {
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.warmup_steps = 0;
  cfg.learning_rate = 0.01;
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  p.zero_grad();
  std::vector<Tensor> params{p};
  auto st = make_optimizer_state(params, cfg);
  adam_step(params, st);
  CHECK(to_vec(p) == std::vector<double>{1.0, -2.0, 0.5});

  AdamConfig cfg2 = cfg;
  cfg2.weight_decay = 0.1;
  Tensor q = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  const std::vector<double> g{0.3, -4.0, 1e-3};
  std::copy(g.begin(), g.end(), q.grad_buffer().begin());
  std::vector<Tensor> qs{q};
  auto st2 = make_optimizer_state(qs, cfg2);
  adam_step(qs, st2);
  const std::vector<double> w0{1.0, -2.0, 0.5};
  for (int i = 0; i < 3; ++i) {
    // m_hat = g and v_hat = g^2 after one step.
    const double expect = w0[i] - 0.01 * (g[i] / (std::abs(g[i]) + cfg2.eps) + 0.1 * w0[i]);
    CHECK(q.data()[i] == doctest::Approx(expect).epsilon(1e-14));
  }

  std::vector<Tensor> wrong{Tensor::zeros({2}, true)};
  CHECK_THROWS_AS(adam_step(wrong, st2), DimensionError);
}

TEST_CASE("adam descends a quadratic bowl monotonically after warmup") {
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.warmup_steps = 10;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 0.0;
  Tensor p = Tensor::from({4}, {3.0, -2.0, 1.5, 4.0}, true);
  std::vector<Tensor> params{p};
  auto st = make_optimizer_state(params, cfg);
  const Tensor c = Tensor::from({4}, {0.5, 0.5, -1.0, 2.0});
  auto loss_value = [&] {
    double l = 0.0;
    for (std::size_t i = 0; i < 4; ++i) l += (p.data()[i] - c.data()[i]) * (p.data()[i] - c.data()[i]);
    return l;
  };
  double prev = loss_value();
  const double first = prev;
  for (int step = 1; step <= 100; ++step) {
    p.zero_grad();
    run_backward([&] {
      const Tensor d = add(p, scale(c, -1.0));
      return sum(mul(d, d));
    });
    adam_step(params, st);
    const double now = loss_value();
    if (step > 10) CHECK(now < prev);
    prev = now;
  }
  CHECK(prev < 0.05 * first);
}

TEST_CASE("gradient clipping caps the global norm") {
  Tensor a = Tensor::zeros({2}, true), b = Tensor::zeros({1}, true);
  a.grad_buffer()[0] = 3.0;
  a.grad_buffer()[1] = 0.0;
  b.grad_buffer()[0] = 4.0;
  std::vector<Tensor> ps{a, b};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  const double n = std::hypot(a.grad()[0], a.grad()[1], b.grad()[0]);
  CHECK(n <= 1.0);
  CHECK(n == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("warmup ramps linearly") {
  AdamConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.warmup_steps = 100;
  CHECK(scheduled_learning_rate(cfg, 50) == doctest::Approx(5e-4));
  CHECK(scheduled_learning_rate(cfg, 100) == 1e-3);
  CHECK(scheduled_learning_rate(cfg, 5000) == 1e-3);
}

TEST_CASE("parameter files round-trip and reject damage") {
  std::mt19937_64 rng(6);
  std::vector<NamedTensor> params{{"w", random_tensor({3, 2}, rng)}, {"layer.0.bias", random_tensor({5}, rng)}};
  std::stringstream ss;
  write_parameters(ss, params);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "GDT1");

  std::stringstream in(bytes);
  const auto back = read_parameters(in);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].name == params[i].name);
    CHECK(back[i].tensor.shape() == params[i].tensor.shape());
    CHECK(to_vec(back[i].tensor) == to_vec(params[i].tensor));
  }

  // The format is record-until-EOF, so a cut exactly at a record boundary is a
  // shorter valid file; every other cut must be rejected.
  std::stringstream first_only;
  write_parameters(first_only, {params[0]});
  const std::size_t boundary = first_only.str().size();
  for (std::size_t cut = 1; cut < bytes.size(); ++cut) {
    std::stringstream part(bytes.substr(0, cut));
    if (cut == boundary || cut == 4) {
      CHECK(read_parameters(part).size() == (cut == 4 ? 0u : 1u));
    } else {
      CHECK_THROWS_AS(read_parameters(part), FormatError);
    }
  }
  std::stringstream bad("GDT2" + bytes.substr(4));
  CHECK_THROWS_AS(read_parameters(bad), FormatError);
  CHECK_THROWS_AS(load_parameters("/nonexistent/dir/x.gdt"), IoError);
}
