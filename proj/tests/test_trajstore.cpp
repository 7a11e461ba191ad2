#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "emlab/trajstore.hpp"
#include "test_util.hpp"

using namespace emlab;
using emlab::testing::scratch_dir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig small_model() {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.vocab_size = 10;
  c.seq_len = 6;
  c.num_classes = 4;
  return c;
}

}  // namespace

TEST_CASE("checkpoint byte layout for four values", "[trajstore]") {
  const auto dir = scratch_dir("ckpt_layout");
  const std::vector<double> v{1, 2, 3, 4};
  const auto name = save_checkpoint(dir, 7, v, 4);
  CHECK(name == "ckpt_7.bin");
  const std::string bytes = slurp(dir / name);
  REQUIRE(bytes.size() == 40);
  CHECK(bytes.substr(0, 8) == "EMTRAJ01");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  CHECK(p[8] == 7);
  for (int i = 9; i < 16; ++i) CHECK(p[i] == 0);
  CHECK(p[16] == 4);
  // 1.0f = 0x3F800000, little-endian
  CHECK(p[24] == 0x00);
  CHECK(p[25] == 0x00);
  CHECK(p[26] == 0x80);
  CHECK(p[27] == 0x3F);
  // 4.0f = 0x40800000
  CHECK(p[39] == 0x40);
  CHECK(p[38] == 0x80);
  CHECK_FALSE(fs::exists(dir / (name + ".tmp")));
}

TEST_CASE("checkpoint round trip equals 32-bit rounding", "[trajstore]") {
  const auto dir = scratch_dir("ckpt_roundtrip");
  Rng rng(3, 0);
  std::vector<double> v(1000);
  for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform() * 20 - 10);
  v[0] = 0.0;
  v[1] = -0.0;
  v[2] = 1e-40;  // float subnormal
  v[3] = 1.0 + 1e-12;
  save_checkpoint(dir, 12, v, v.size());
  const auto c = load_checkpoint(dir / "ckpt_12.bin");
  CHECK(c.step == 12);
  REQUIRE(c.values.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(std::bit_cast<std::uint32_t>(static_cast<float>(c.values[i])) ==
          std::bit_cast<std::uint32_t>(static_cast<float>(v[i])));
    CHECK(c.values[i] == static_cast<double>(static_cast<float>(v[i])));
  }
  CHECK(c.values[3] == 1.0);

  // A second write/read of the widened values is a fixed point.
  save_checkpoint(dir, 13, c.values, c.values.size());
  CHECK(load_checkpoint(dir / "ckpt_13.bin").values == c.values);
}

TEST_CASE("checkpoint error cases", "[trajstore]") {
  const auto dir = scratch_dir("ckpt_errors");
  const std::vector<double> v{1, 2, 3, 4};
  CHECK_THROWS_AS(save_checkpoint(dir, 0, v, 5), ContractViolation);

  save_checkpoint(dir, 0, v, 4);
  std::string bytes = slurp(dir / "ckpt_0.bin");
  bytes[0] = 'X';
  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), FormatError);

  bytes = slurp(dir / "ckpt_0.bin");
  {
    std::ofstream out(dir / "short.bin", std::ios::binary);
    out << bytes.substr(0, 36);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), FormatError);

  const fs::path missing = dir / "no_such_dir";
  try {
    save_checkpoint(missing, 0, v, 4);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("no_such_dir") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "nope.bin"), IoError);
}

TEST_CASE("full-precision state round trip is exact", "[trajstore]") {
  const auto dir = scratch_dir("state_roundtrip");
  Rng rng(9, 1);
  std::vector<double> v(257);
  for (auto& x : v) x = rng.normal();
  save_state(dir / "state.bin", 42, v);
  const auto c = load_state(dir / "state.bin");
  CHECK(c.step == 42);
  CHECK(c.values == v);
}

TEST_CASE("manifest round trip and layout validation", "[trajstore]") {
  const auto dir = scratch_dir("manifest");
  RunManifest m;
  m.run_id = "abc";
  m.config = {{"lr", 0.001}};
  m.layout = ParamLayout(small_model());
  m.checkpoints = {{0, "ckpt_0.bin"}, {100, "ckpt_100.bin"}};
  write_manifest(dir, m);
  const RunManifest r = read_manifest(dir);
  CHECK(r.run_id == "abc");
  CHECK(r.config == m.config);
  CHECK(r.checkpoints == m.checkpoints);
  CHECK(r.layout.slots() == m.layout.slots());

  auto j = to_json(m);
  j["layout"][1]["offset"] = j["layout"][1]["offset"].get<std::size_t>() + 1;
  CHECK_THROWS_AS(manifest_from_json(j), FormatError);

  j = to_json(m);
  j["param_count"] = 1;
  CHECK_THROWS_AS(manifest_from_json(j), FormatError);

  CHECK_THROWS_AS(read_manifest(dir / "absent"), IntegrityError);
}

TEST_CASE("layout offsets are contiguous and sum to P", "[trajstore][property]") {
  for (auto variant : {Variant::attention_only, Variant::standard}) {
    for (std::size_t L : {1u, 2u, 3u}) {
      ModelConfig c = small_model();
      c.variant = variant;
      c.num_layers = L;
      const ParamLayout layout(c);
      std::size_t next = 0;
      for (const auto& s : layout.slots()) {
        CHECK(s.offset == next);
        next += s.size();
      }
      CHECK(next == layout.total());
    }
  }
}

TEST_CASE("load_trajectory selects tensors in flatten order", "[trajstore]") {
  const auto dir = scratch_dir("traj_select");
  const ModelConfig mc = small_model();
  Rng rng(5, 0);
  TrajectoryWriter w(dir, "run", {}, ParamLayout(mc));
  std::vector<ModelParams> saved;
  // Written out of step order on purpose; rows come back sorted.
  for (std::size_t step : {200u, 0u, 100u}) {
    auto p = init_params(mc, rng);
    w.add(step, flatten(p));
    saved.push_back(p);
  }

  const auto all = load_trajectory(dir);
  CHECK(all.snapshots() == 3);
  CHECK(all.dims() == ParamLayout(mc).total());
  CHECK(all.steps == std::vector<std::size_t>{0, 100, 200});
  // Row for step 0 is the second one written.
  const auto& p0 = saved[1];
  for (std::size_t i = 0; i < p0.size(); ++i)
    REQUIRE(all.data(0, i) == static_cast<double>(static_cast<float>(p0.values[i])));

  const std::string wv = attn_tensor_name(1, AttnRole::value);
  const std::string wq = attn_tensor_name(0, AttnRole::query);
  const auto sub = load_trajectory(dir, {wv, wq});
  REQUIRE(sub.dims() == 2 * 64);
  CHECK(sub.tensors[0].name == wv);
  CHECK(sub.tensors[0].offset == 0);
  CHECK(sub.tensors[1].offset == 64);
  const auto t_wv = saved[0].tensor(wv);  // step 200
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(sub.data(2, r * 8 + c) ==
            static_cast<double>(static_cast<float>(t_wv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)))));

  CHECK(load_trajectory(dir, {}, 100).snapshots() == 2);
  CHECK_THROWS_AS(load_trajectory(dir, {"layer0.W_X"}), ContractViolation);

  fs::remove(dir / "ckpt_100.bin");
  CHECK_THROWS_AS(load_trajectory(dir), IntegrityError);
}

TEST_CASE("single value matrix at full width holds d squared columns", "[trajstore]") {
  const auto dir = scratch_dir("traj_wide");
  const ModelConfig mc = ModelConfig::for_task(TaskSpec{}, 128, 2);
  TrajectoryWriter w(dir, "run", {}, ParamLayout(mc));
  Rng rng(1, 1);
  w.add(0, flatten(init_params(mc, rng)));
  w.add(100, flatten(init_params(mc, rng)));
  const auto t = load_trajectory(dir, {attn_tensor_name(0, AttnRole::value)});
  CHECK(t.dims() == 16384);
  CHECK(t.snapshots() == 2);
  CHECK(load_trajectory(dir).dims() == 139528);
}
