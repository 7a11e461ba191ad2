#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "emlab/taskgen.hpp"

using namespace emlab;

namespace {

TaskSpec spec_with(std::size_t m, std::size_t modulus = 8, TaskOp op = TaskOp::add) {
  TaskSpec s;
  s.num_markers = m;
  s.modulus = modulus;
  s.op = op;
  return s;
}

void check_sample_valid(const TaskSample& s, const TaskSpec& spec, std::size_t expected_m) {
  const Vocab v = spec.vocab();
  REQUIRE(s.tokens.size() == spec.seq_len);
  CHECK(s.tokens.back() == v.eos());
  CHECK(s.num_markers() == expected_m);
  std::size_t markers_seen = 0;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (s.tokens[i] == v.marker()) {
      ++markers_seen;
      REQUIRE(i + 1 <= spec.seq_len - 2);
      CHECK(v.is_value(s.tokens[i + 1]));
    }
  }
  CHECK(markers_seen == expected_m);
  for (std::size_t k = 1; k < s.marker_positions.size(); ++k) {
    const std::size_t gap = s.marker_positions[k] - s.marker_positions[k - 1];
    CHECK(gap >= 2);
    // No marker directly after another marker's value slot.
    CHECK(s.marker_positions[k] != s.marker_positions[k - 1] + 2);
  }
  for (std::size_t p : s.marker_positions) CHECK(s.tokens[p] == v.marker());
  CHECK(label_from_tokens(s.tokens, spec) == s.label);
}

}  // namespace

TEST_CASE("vocab layout", "[taskgen]") {
  const Vocab v{8, 16};
  CHECK(v.marker() == 8);
  CHECK(v.first_distractor() == 9);
  CHECK(v.eos() == 25);
  CHECK(v.size() == 26);
  CHECK(v.is_distractor(9));
  CHECK(v.is_distractor(24));
  CHECK_FALSE(v.is_distractor(25));
}

TEST_CASE("labels", "[taskgen]") {
  const std::vector<std::size_t> seven{7};
  CHECK(combine_values(seven, 16, TaskOp::add) == 7);
  const std::vector<std::size_t> three_five{3, 5};
  CHECK(combine_values(three_five, 8, TaskOp::add) == 0);
  CHECK(combine_values(three_five, 8, TaskOp::mul) == 7);
  const std::vector<std::size_t> with_zero{0, 5};
  CHECK(combine_values(with_zero, 8, TaskOp::mul) == 0);
}

TEST_CASE("single-marker sample carries its value as label", "[taskgen]") {
  const TaskSpec spec = spec_with(1, 16);
  Rng rng(1, 0);
  for (int i = 0; i < 200; ++i) {
    const TaskSample s = sample(spec, rng);
    check_sample_valid(s, spec, 1);
    CHECK(s.label == s.tokens[s.marker_positions[0] + 1]);
  }
}

TEST_CASE("infeasible specs are rejected", "[taskgen]") {
  TaskSpec spec = spec_with(3);
  spec.seq_len = 6;  // 2m+1 = 7 > 6
  Rng rng(0, 0);
  CHECK_THROWS_AS(sample(spec, rng), ContractViolation);
  spec.num_markers = 0;
  spec.seq_len = 32;
  CHECK_THROWS_AS(sample(spec, rng), ContractViolation);
}

TEST_CASE("labels recompute from tokens and spans never overlap", "[taskgen][property]") {
  Rng rng(2, 0);
  for (TaskOp op : {TaskOp::add, TaskOp::mul}) {
    for (std::size_t m = 1; m <= 6; ++m) {
      const TaskSpec spec = spec_with(m, m % 2 == 0 ? 8 : 16, op);
      for (int i = 0; i < 10000 / 6; ++i) check_sample_valid(sample(spec, rng), spec, m);
    }
  }
}

TEST_CASE("sample_batch", "[taskgen]") {
  TaskSpec spec;
  spec.mixed_markers = {1, 2, 3, 4};
  Rng a(9, stream_label("train", 3));
  Rng b(9, stream_label("train", 3));
  const auto ba = sample_batch(spec, 64, a);
  const auto bb = sample_batch(spec, 64, b);
  CHECK(ba.size() == 64);
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba[i].tokens == bb[i].tokens);
    CHECK(ba[i].label == bb[i].label);
  }
  Rng c(0, 0);
  CHECK_THROWS_AS(sample_batch(spec, 0, c), ContractViolation);
}

TEST_CASE("label histogram is uniform (chi-square)", "[taskgen][statistics]") {
  TaskSpec spec;
  spec.mixed_markers = {1, 2, 3, 4};
  Rng rng(3, 0);
  std::vector<double> counts(8, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[sample(spec, rng).label] += 1.0;
  double chi2 = 0.0;
  const double expected = n / 8.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 99.9th percentile of chi-square with 7 degrees of freedom.
  CHECK(chi2 < 24.322);
}

TEST_CASE("mixed sampling covers the marker set", "[taskgen]") {
  TaskSpec spec;
  spec.mixed_markers = {1, 2, 3, 4};
  Rng rng(4, 0);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 8000; ++i) ++counts[sample(spec, rng).num_markers()];
  for (std::size_t m = 1; m <= 4; ++m) CHECK(std::abs(counts[m] - 2000) < 200);
}

TEST_CASE("marker placement marginal is reflection symmetric", "[taskgen][statistics]") {
  const TaskSpec spec = spec_with(2);
  Rng rng(5, 0);
  const std::size_t last = spec.seq_len - 3;
  std::vector<double> counts(last + 1, 0.0);
  for (int i = 0; i < 40000; ++i)
    for (std::size_t p : sample(spec, rng).marker_positions) counts[p] += 1.0;
  for (std::size_t p = 0; p <= last / 2; ++p) {
    const double a = counts[p], b = counts[last - p];
    CHECK(std::abs(a - b) < 4.5 * std::sqrt(a + b + 1.0));
  }
}

TEST_CASE("spec_at_step", "[taskgen]") {
  const Schedule cur = Schedule::curriculum({{spec_with(1), 1000}, {spec_with(2), 1000}});
  CHECK(spec_at_step(cur, 500).num_markers == 1);
  CHECK(spec_at_step(cur, 1500).num_markers == 2);
  CHECK(spec_at_step(cur, 1000000).num_markers == 2);
  CHECK(stage_boundaries(cur) == std::vector<std::size_t>{0, 1000});

  const Schedule mixed = Schedule::mixed(TaskSpec{}, {1, 2, 3, 4});
  const TaskSpec s = spec_at_step(mixed, 123);
  CHECK(s.is_mixed());
  CHECK(s.marker_counts() == std::vector<std::size_t>{1, 2, 3, 4});

  CHECK_THROWS_AS(spec_at_step(Schedule::curriculum({}), 0), ContractViolation);
}

TEST_CASE("dataset dump format", "[taskgen]") {
  TaskSample s;
  s.tokens = {8, 3, 12, 25};
  s.label = 3;
  std::ostringstream os;
  write_dataset(os, std::span<const TaskSample>(&s, 1));
  CHECK(os.str() == "8 3 12 25\t3\n");
}
