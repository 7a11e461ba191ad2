#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "emlab/trainer.hpp"
#include "test_util.hpp"

using namespace emlab;
using emlab::testing::scratch_dir;

namespace {

TaskSpec tiny_spec() {
  TaskSpec s;
  s.seq_len = 12;
  s.modulus = 4;
  s.num_distractors = 4;
  return s;
}

/// Small enough to train in seconds; learns m = 1 at lr 0.1.
TrainConfig tiny_config(std::size_t steps, std::vector<std::size_t> markers = {1}) {
  TrainConfig c;
  c.lr = 0.1;
  c.batch_size = 32;
  c.total_steps = steps;
  c.checkpoint_every = 100;
  c.seed = 11;
  c.schedule = Schedule::mixed(tiny_spec(), std::move(markers));
  c.eval_size = 256;
  c.model = ModelConfig::for_task(tiny_spec(), 32, 2);
  c.model.init_std = 0.3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// m = 1 solver: one-hot token embeddings, the EOS query matches every value
/// token's key, W_V = W_O = I and the readout reads the value coordinates.
/// Each sequence holds exactly one value token, so the logits are its one-hot.
ModelParams oracle_params(const TaskSpec& spec) {
  ModelConfig c = ModelConfig::for_task(spec, spec.vocab().size(), 1);
  ModelParams p(c);
  const Vocab v = spec.vocab();
  auto te = p.tensor(p.layout.token_embed());
  for (std::size_t i = 0; i < v.size(); ++i) te(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
  const double g = 40.0;
  auto wq = p.tensor(p.layout.attn(0, AttnRole::query));
  auto wk = p.tensor(p.layout.attn(0, AttnRole::key));
  wq(static_cast<Eigen::Index>(v.eos()), 0) = g;
  for (std::size_t i = 0; i < spec.modulus; ++i) wk(static_cast<Eigen::Index>(i), 0) = g;
  auto wv = p.tensor(p.layout.attn(0, AttnRole::value));
  auto wo = p.tensor(p.layout.attn(0, AttnRole::output));
  wv.setIdentity();
  wo.setIdentity();
  auto ro = p.tensor(p.layout.readout());
  for (std::size_t i = 0; i < spec.modulus; ++i) ro(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
  return p;
}

}  // namespace

TEST_CASE("zero-step run holds only the initialization checkpoint", "[trainer]") {
  const auto dir = scratch_dir("train_zero");
  const auto r = train_run(tiny_config(0), dir, "zero");
  const auto m = read_manifest(dir);
  REQUIRE(m.checkpoints.size() == 1);
  CHECK(m.checkpoints[0].step == 0);
  CHECK(r.metrics.rows.size() == 1);
  CHECK(r.final_params.values == initial_params(tiny_config(0)).values);
}

TEST_CASE("same seed gives bit-identical archives", "[trainer]") {
  const auto a = scratch_dir("train_det_a");
  const auto b = scratch_dir("train_det_b");
  const auto cfg = tiny_config(300);
  train_run(cfg, a, "r");
  train_run(cfg, b, "r");
  for (const char* f : {"ckpt_0.bin", "ckpt_100.bin", "ckpt_200.bin", "ckpt_300.bin", "metrics.csv",
                        "manifest.json", "state.bin"})
    CHECK(slurp(a / f) == slurp(b / f));

  auto other = cfg;
  other.seed = 12;
  const auto c = scratch_dir("train_det_c");
  train_run(other, c, "r");
  CHECK(slurp(a / "ckpt_300.bin") != slurp(c / "ckpt_300.bin"));
}

TEST_CASE("zero learning rate step leaves parameters bit-identical", "[trainer][property]") {
  const auto cfg = tiny_config(1);
  ModelParams p = initial_params(cfg);
  const auto before = p.values;
  const auto lg = loss_and_grad(p, train_batch(cfg, 0));
  sgd_step(p, lg.grads, 0.0);
  CHECK(p.values == before);
  CHECK_THROWS_AS(sgd_step(p, std::vector<double>(3), 0.1), ContractViolation);
}

TEST_CASE("sgd step subtracts lr times gradient", "[trainer]") {
  const auto cfg = tiny_config(1);
  Trainer t(cfg);
  const auto before = t.params().values;
  const auto lg = loss_and_grad(t.params(), train_batch(cfg, 0));
  const double loss = t.step();
  CHECK(loss == lg.loss);
  CHECK(t.current_step() == 1);
  for (std::size_t i = 0; i < before.size(); ++i) REQUIRE(t.params().values[i] == before[i] - cfg.lr * lg.grads[i]);
}

TEST_CASE("resuming from a saved state reproduces later checkpoints", "[trainer][property]") {
  const auto full = scratch_dir("train_resume_full");
  const auto part = scratch_dir("train_resume_part");
  auto cfg = tiny_config(300);
  train_run(cfg, full, "r");

  auto short_cfg = cfg;
  short_cfg.total_steps = 100;
  train_run(short_cfg, part, "r");
  TrainOptions opts;
  opts.resume = true;
  train_run(cfg, part, "r", opts);
  for (const char* f : {"ckpt_100.bin", "ckpt_200.bin", "ckpt_300.bin", "metrics.csv", "manifest.json"})
    CHECK(slurp(full / f) == slurp(part / f));

  // The in-process path: reload the 64-bit state and step through the same streams.
  const auto st = load_state(full / "state.bin");
  CHECK(st.step == 300);
  auto longer = cfg;
  longer.total_steps = 400;
  Trainer t(longer, unflatten(st.values, cfg.model), st.step);
  while (t.current_step() < 400) t.step();
  const auto fresh = scratch_dir("train_resume_fresh");
  train_run(longer, fresh, "r");
  CHECK(load_state(fresh / "state.bin").values == t.params().values);

  auto changed = cfg;
  changed.lr = 0.2;
  CHECK_THROWS_AS(train_run(changed, part, "r", opts), ContractViolation);
}

TEST_CASE("non-finite loss aborts naming the step", "[trainer]") {
  auto cfg = tiny_config(50);
  cfg.lr = 1e8;
  try {
    train_run(cfg, scratch_dir("train_nan"), "nan");
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("config validation", "[trainer]") {
  auto cfg = tiny_config(10);
  cfg.lr = 0.0;
  CHECK_THROWS_AS(validate(cfg), ContractViolation);
  cfg = tiny_config(10);
  cfg.checkpoint_every = 0;
  CHECK_THROWS_AS(validate(cfg), ContractViolation);
  cfg = tiny_config(10);
  cfg.model.vocab_size = 99;
  CHECK_THROWS_AS(validate(cfg), ContractViolation);
  cfg = tiny_config(10);
  cfg.schedule = Schedule::curriculum({});
  CHECK_THROWS_AS(validate(cfg), ContractViolation);
}

TEST_CASE("train config survives a JSON round trip", "[trainer]") {
  auto cfg = tiny_config(500, {1, 2, 3});
  CHECK(train_config_from_json(to_json(cfg)) == cfg);
  TaskSpec s1 = tiny_spec();
  TaskSpec s2 = tiny_spec();
  s2.num_markers = 2;
  s2.op = TaskOp::mul;
  cfg.schedule = Schedule::curriculum({{s1, 100}, {s2, 200}});
  cfg.model.variant = Variant::standard;
  CHECK(train_config_from_json(to_json(cfg)) == cfg);
  CHECK(train_config_from_json(nlohmann::json::parse(to_json(cfg).dump())) == cfg);
}

TEST_CASE("untrained model scores at chance", "[trainer]") {
  // Binomial 3-sigma band around 1/8 for 2048 samples.
  const TaskSpec spec;
  const ModelConfig mc = ModelConfig::for_task(spec);
  Rng init(2024, stream_label("init"));
  const ModelParams p = init_params(mc, init);
  Rng rng(2024, stream_label("eval", 1));
  const auto r = evaluate(p, spec, 2048, rng);
  const double sigma = std::sqrt(0.125 * 0.875 / 2048.0);
  CHECK(std::abs(r.accuracy - 0.125) <= 3 * sigma);
}

TEST_CASE("oracle parameters reach perfect accuracy", "[trainer]") {
  TaskSpec spec;
  spec.num_markers = 1;
  const ModelParams p = oracle_params(spec);
  Rng rng(1, stream_label("eval", 1));
  const auto r = evaluate(p, spec, 1024, rng);
  CHECK(r.accuracy == 1.0);
  REQUIRE(r.accuracy_per_m.size() == 1);
  CHECK(r.accuracy_per_m[0] == 1.0);
  // The EOS row is almost one-hot on the value token.
  CHECK(r.eos_entropy[0] < 0.05);
}

TEST_CASE("evaluation is deterministic and per-m aligned", "[trainer]") {
  const auto cfg = tiny_config(0, {1, 2, 3});
  const auto p = initial_params(cfg);
  const auto set_a = make_eval_set(cfg);
  const auto set_b = make_eval_set(cfg);
  CHECK(set_a.marker_counts == std::vector<std::size_t>{1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(set_a.samples[i].size() == cfg.eval_size);
    for (const auto& s : set_a.samples[i]) REQUIRE(s.num_markers() == set_a.marker_counts[i]);
  }
  const auto ra = evaluate(p, set_a);
  const auto rb = evaluate(p, set_b);
  CHECK(ra.accuracy == rb.accuracy);
  CHECK(ra.accuracy_per_m == rb.accuracy_per_m);
  CHECK(ra.eos_entropy == rb.eos_entropy);

  TaskSpec mixed = tiny_spec();
  mixed.mixed_markers = {1, 2, 3};
  Rng r1(4, stream_label("eval", 0));
  Rng r2(4, stream_label("eval", 0));
  const auto e1 = evaluate(p, mixed, 100, r1);
  const auto e2 = evaluate(p, mixed, 100, r2);
  CHECK(e1.accuracy_per_m == e2.accuracy_per_m);
  CHECK(e1.accuracy_at(2) == e1.accuracy_per_m[1]);
  CHECK_THROWS_AS(e1.accuracy_at(7), ContractViolation);
}

TEST_CASE("evaluation streams are disjoint from training streams", "[trainer]") {
  std::set<std::uint64_t> train;
  for (std::uint64_t s = 0; s < 20000; ++s) train.insert(stream_label("train", s));
  for (std::uint64_t m = 0; m < 64; ++m) CHECK(train.count(stream_label("eval", m)) == 0);
  CHECK(train.count(stream_label("init")) == 0);
}

TEST_CASE("metrics CSV layout and value ranges", "[trainer][property]") {
  const auto dir = scratch_dir("train_metrics");
  auto cfg = tiny_config(200, {1, 2});
  const auto r = train_run(cfg, dir, "m");
  std::istringstream in(slurp(dir / "metrics.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,loss,acc,acc_m1,acc_m2,entropy_l1,entropy_l2");
  REQUIRE(r.metrics.rows.size() == 3);
  const double ln_t = std::log(static_cast<double>(cfg.model.seq_len));
  for (const auto& row : r.metrics.rows) {
    CHECK(row.step % cfg.checkpoint_every == 0);
    CHECK(row.eval.accuracy >= 0.0);
    CHECK(row.eval.accuracy <= 1.0);
    for (double a : row.eval.accuracy_per_m) CHECK((a >= 0.0 && a <= 1.0));
    for (double e : row.eval.eos_entropy) CHECK((e >= 0.0 && e <= ln_t + 1e-12));
  }
  const auto back = read_metrics_csv(dir / "metrics.csv");
  CHECK(back.marker_counts == std::vector<std::size_t>{1, 2});
  CHECK(back.rows.size() == 3);
  CHECK(back.rows[2].step == 200);
  CHECK(back.rows[2].eval.accuracy_per_m[1] == Catch::Approx(r.metrics.rows[2].eval.accuracy_per_m[1]));

  const auto m = read_manifest(dir);
  CHECK(train_config_from_json(m.config) == cfg);
  CHECK(m.layout.slots() == ParamLayout(cfg.model).slots());
}

TEST_CASE("probe loss trends down during a successful run", "[trainer][property]") {
  auto cfg = tiny_config(2000);
  Trainer t(cfg);
  Rng probe_rng(cfg.seed, stream_label("probe", 0));
  const auto probe = sample_batch(spec_at_step(cfg.schedule, 0), 256, probe_rng);
  std::vector<double> loss{loss_only(t.params(), probe)};
  while (t.current_step() < cfg.total_steps) {
    t.step();
    if (t.current_step() % 100 == 0) loss.push_back(loss_only(t.params(), probe));
  }
  // Windows of 500 steps starting at every 100-step mark.
  std::size_t windows = 0, violations = 0;
  for (std::size_t i = 0; i + 5 < loss.size(); ++i) {
    ++windows;
    violations += loss[i + 5] > loss[i];
  }
  CHECK(static_cast<double>(violations) <= 0.1 * static_cast<double>(windows));
  CHECK(evaluate(t.params(), make_eval_set(cfg)).accuracy >= 0.99);
}

TEST_CASE("curriculum steps follow the stage boundaries", "[trainer]") {
  TaskSpec s1 = tiny_spec();
  TaskSpec s2 = tiny_spec();
  s2.num_markers = 2;
  auto cfg = tiny_config(0);
  cfg.schedule = Schedule::curriculum({{s1, 100}, {s2, 100}});
  for (const auto& s : train_batch(cfg, 99)) CHECK(s.num_markers() == 1);
  for (const auto& s : train_batch(cfg, 100)) CHECK(s.num_markers() == 2);
  // The batch for a step does not depend on what ran before it.
  const auto a = train_batch(cfg, 150);
  const auto b = train_batch(cfg, 150);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
}
