#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "emlab/commutator.hpp"
#include "test_util.hpp"

using namespace emlab;
using namespace emlab::testing;

namespace {

struct Quadratic {
  double h[2][2];
  std::vector<double> grad(std::span<const double> t) const {
    return {h[0][0] * t[0] + h[0][1] * t[1], h[1][0] * t[0] + h[1][1] * t[1]};
  }
};

Quadratic random_quadratic(Rng& rng) {
  const double a = rng.normal(), b = rng.normal(), c = rng.normal();
  return {{{a, b}, {b, c}}};
}

/// η² (H_B H_A − H_A H_B) θ₀, written out component by component.
std::vector<double> quadratic_oracle(const Quadratic& A, const Quadratic& B, std::span<const double> t,
                                     double lr) {
  double c[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double ba = 0, ab = 0;
      for (int k = 0; k < 2; ++k) {
        ba += B.h[i][k] * A.h[k][j];
        ab += A.h[i][k] * B.h[k][j];
      }
      c[i][j] = ba - ab;
    }
  return {lr * lr * (c[0][0] * t[0] + c[0][1] * t[1]), lr * lr * (c[1][0] * t[0] + c[1][1] * t[1])};
}

GradFn fn(const Quadratic& q) {
  return [q](std::span<const double> t) { return q.grad(t); };
}

TaskSpec tiny_spec() {
  TaskSpec s;
  s.seq_len = 12;
  s.modulus = 4;
  s.num_distractors = 4;
  return s;
}

TrainConfig tiny_config(std::size_t steps) {
  TrainConfig c;
  c.lr = 0.1;
  c.batch_size = 32;
  c.total_steps = steps;
  c.checkpoint_every = 100;
  c.seed = 21;
  c.schedule = Schedule::mixed(tiny_spec(), {1, 2});
  c.eval_size = 64;
  c.model = ModelConfig::for_task(tiny_spec(), 16, 2);
  c.model.init_std = 0.3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("quadratic two-step delta matches the closed form", "[commutator]") {
  Rng rng(1, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto A = random_quadratic(rng), B = random_quadratic(rng);
    const std::vector<double> t0{rng.normal(), rng.normal()};
    const double lr = 0.01 + 0.2 * rng.uniform();
    const auto r = two_step_delta(t0, fn(A), fn(B), lr);
    const auto oracle = quadratic_oracle(A, B, t0, lr);
    CHECK(std::abs(r.delta[0] - oracle[0]) <= 1e-12);
    CHECK(std::abs(r.delta[1] - oracle[1]) <= 1e-12);

    // Same quantity through explicit parameter updates.
    std::vector<double> ta(2), tb(2), tab(2), tba(2);
    const auto ga = A.grad(t0), gb = B.grad(t0);
    for (int i = 0; i < 2; ++i) {
      ta[i] = t0[i] - lr * ga[i];
      tb[i] = t0[i] - lr * gb[i];
    }
    const auto gba = B.grad(ta), gab = A.grad(tb);
    for (int i = 0; i < 2; ++i) {
      tab[i] = ta[i] - lr * gba[i];
      tba[i] = tb[i] - lr * gab[i];
      CHECK(std::abs((tab[i] - tba[i]) - r.delta[i]) <= 1e-12);
    }

    const double d = normalized_defect(r.delta, A.grad(t0), B.grad(t0), lr);
    const double expect = norm2(oracle) / (norm2(r.step_a) * norm2(r.step_b));
    CHECK(d == Catch::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("identical batches and constant gradients commute", "[commutator]") {
  Rng rng(2, 0);
  const auto A = random_quadratic(rng);
  const std::vector<double> t0{0.3, -1.2};
  const auto r = two_step_delta(t0, fn(A), fn(A), 0.1);
  CHECK(r.delta[0] == 0.0);
  CHECK(r.delta[1] == 0.0);

  GradFn ca = [](std::span<const double>) { return std::vector<double>{1.5, -2.0}; };
  GradFn cb = [](std::span<const double>) { return std::vector<double>{0.25, 4.0}; };
  const auto c = two_step_delta(t0, ca, cb, 0.3);
  CHECK(std::abs(c.delta[0]) <= 1e-14);
  CHECK(std::abs(c.delta[1]) <= 1e-14);

  // Real model, identical minibatches.
  const auto cfg = tiny_config(0);
  const ModelParams p = initial_params(cfg);
  const auto batch = train_batch(cfg, 3);
  const auto m = two_step_delta(p, batch, batch, cfg.lr);
  for (double x : m.delta) REQUIRE(x == 0.0);
}

TEST_CASE("delta scales with the square of the learning rate", "[commutator][property]") {
  Rng rng(3, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto A = random_quadratic(rng), B = random_quadratic(rng);
    const std::vector<double> t0{rng.normal(), rng.normal()};
    const double lr = 0.05;
    const double c = 0.5 + 3.0 * rng.uniform();
    const double n1 = norm2(two_step_delta(t0, fn(A), fn(B), lr).delta);
    const double n2 = norm2(two_step_delta(t0, fn(A), fn(B), c * lr).delta);
    if (n1 < 1e-14) continue;
    CHECK(std::abs(n2 / n1 - c * c) <= 1e-10 * c * c);
  }
}

TEST_CASE("normalized defect arithmetic", "[commutator]") {
  CHECK(normalized_defect(0.0, 1e-3, 2e-3) == 0.0);
  CHECK(normalized_defect(1e-6, 1e-3, 1e-3) == Catch::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(normalized_defect(1.0, 0.0, 1.0), UndefinedInputError);
  const std::vector<double> z{0.0, 0.0}, g{1.0, 0.0};
  CHECK_THROWS_AS(normalized_defect(g, z, g, 0.1), UndefinedInputError);
}

TEST_CASE("non-finite gradients name the batch", "[commutator]") {
  const std::vector<double> t0{1.0, 1.0};
  GradFn ok = [](std::span<const double>) { return std::vector<double>{1.0, 1.0}; };
  GradFn bad = [](std::span<const double>) { return std::vector<double>{NAN, 1.0}; };
  try {
    two_step_delta(t0, ok, bad, 0.1);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("batch B") != std::string::npos);
  }
  CHECK_THROWS_AS(two_step_delta(std::vector<double>{NAN, 0.0}, ok, ok, 0.1), ContractViolation);
}

TEST_CASE("model probe leaves parameters unchanged and matches explicit steps", "[commutator]") {
  const auto cfg = tiny_config(0);
  const ModelParams p = initial_params(cfg);
  const auto before = p.values;
  const auto a = train_batch(cfg, 1), b = train_batch(cfg, 2);
  const auto r = two_step_delta(p, a, b, cfg.lr);
  CHECK(p.values == before);

  ModelParams pa = p, pb = p;
  sgd_step(pa, loss_and_grad(p, a).grads, cfg.lr);
  sgd_step(pb, loss_and_grad(p, b).grads, cfg.lr);
  ModelParams pab = pa, pba = pb;
  sgd_step(pab, loss_and_grad(pa, b).grads, cfg.lr);
  sgd_step(pba, loss_and_grad(pb, a).grads, cfg.lr);
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double e = pab.values[i] - pba.values[i];
    diff = std::max(diff, std::abs(e - r.delta[i]));
    ref = std::max(ref, std::abs(e));
  }
  CHECK(ref > 0.0);
  CHECK(diff <= 1e-9 * ref + 1e-15);
}

TEST_CASE("commutator time series on a short run", "[commutator]") {
  const auto dir = scratch_dir("comm_series");
  const auto cfg = tiny_config(400);
  train_run(cfg, dir, "c");
  std::vector<std::string> before;
  for (std::size_t s = 0; s <= 400; s += 100) before.push_back(slurp(dir / checkpoint_filename(s)));

  CommutatorOptions opts;
  opts.probe_every = 100;
  opts.probe_batch = 32;
  const auto recs = commutator_timeseries(dir, opts);
  REQUIRE(recs.size() == 4 * (3 + 1));

  // Probe purity.
  for (std::size_t s = 0, i = 0; s <= 400; s += 100, ++i)
    CHECK(slurp(dir / checkpoint_filename(s)) == before[i]);

  for (const auto& r : recs) {
    CHECK(r.step % 100 == 0);
    CHECK(r.defect >= 0.0);
    CHECK(r.ratio >= 0.0);
    CHECK(r.k > 0);
    CHECK(r.rho_exec >= 0.0);
    CHECK(r.rho_exec <= 1.0);
    if (!r.is_mean()) {
      CHECK(std::abs(r.rho_exec * r.rho_exec + r.perp_fraction * r.perp_fraction - 1.0) <= 1e-10);
      CHECK(r.delta_norm <= r.delta_norm_full * (1 + 1e-12));
      CHECK(r.ratio == Catch::Approx(r.rho_exec / r.rho_rand).epsilon(1e-12));
    }
  }

  // Determinism.
  const auto again = commutator_timeseries(dir, opts);
  REQUIRE(again.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(again[i].delta_norm == recs[i].delta_norm);
    CHECK(again[i].rho_rand == recs[i].rho_rand);
  }

  std::ostringstream os;
  write_commutator_csv(os, recs);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,trial,delta_norm,stepA_norm,stepB_norm,D,rho_exec,rho_rand,ratio,perp_frac,K");
  std::istringstream in2(os.str());
  const auto back = read_commutator_csv(in2);
  REQUIRE(back.size() == recs.size());
  CHECK(back[3].is_mean());
  CHECK(back[5].defect == Catch::Approx(recs[5].defect).epsilon(1e-10));

  std::ostringstream full;
  write_commutator_full_csv(full, recs);
  CHECK(full.str().rfind("step,trial,delta_norm,stepA_norm,stepB_norm,D\n", 0) == 0);

  opts.probe_every = 150;
  CHECK_THROWS_AS(commutator_timeseries(dir, opts), ContractViolation);
}

TEST_CASE("replay detects a tampered archive", "[commutator]") {
  const auto dir = scratch_dir("comm_tamper");
  const auto cfg = tiny_config(200);
  train_run(cfg, dir, "c");
  auto c = load_checkpoint(dir / "ckpt_100.bin");
  c.values[0] += 1.0;
  save_checkpoint(dir, 100, c.values, c.values.size());
  CommutatorOptions opts;
  opts.probe_every = 200;
  CHECK_THROWS_AS(commutator_timeseries(dir, opts), IntegrityError);
}
