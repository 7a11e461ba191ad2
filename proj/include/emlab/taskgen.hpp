#pragma once

// Marker-based modular arithmetic sequences.
//
// Token layout for modulus C and D distractor tokens:
//   0 .. C-1        value tokens
//   C               marker
//   C+1 .. C+D      distractors
//   C+D+1           end-of-sequence (always the last position)

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "emlab/errors.hpp"
#include "emlab/numkit.hpp"

namespace emlab {

enum class TaskOp { add, mul };

inline std::string_view to_string(TaskOp op) { return op == TaskOp::add ? "add" : "mul"; }

inline TaskOp parse_task_op(std::string_view s) {
  if (s == "add") return TaskOp::add;
  if (s == "mul") return TaskOp::mul;
  throw ContractViolation("unknown task op '" + std::string(s) + "'");
}

struct Vocab {
  std::size_t modulus = 8;
  std::size_t num_distractors = 16;

  std::size_t marker() const noexcept { return modulus; }
  std::size_t first_distractor() const noexcept { return modulus + 1; }
  std::size_t eos() const noexcept { return modulus + num_distractors + 1; }
  std::size_t size() const noexcept { return modulus + num_distractors + 2; }

  bool is_value(std::size_t id) const noexcept { return id < modulus; }
  bool is_distractor(std::size_t id) const noexcept {
    return id >= first_distractor() && id < eos();
  }
};

struct TaskSpec {
  std::size_t seq_len = 32;
  std::size_t num_markers = 1;
  /// When non-empty, each sample draws m uniformly from this set and
  /// `num_markers` is ignored.
  std::vector<std::size_t> mixed_markers;
  std::size_t modulus = 8;
  TaskOp op = TaskOp::add;
  std::size_t num_distractors = 16;

  bool is_mixed() const noexcept { return !mixed_markers.empty(); }
  Vocab vocab() const noexcept { return {modulus, num_distractors}; }
  std::size_t max_markers() const noexcept {
    return is_mixed() ? *std::max_element(mixed_markers.begin(), mixed_markers.end())
                      : num_markers;
  }
  /// Marker counts this spec can produce, ascending.
  std::vector<std::size_t> marker_counts() const {
    if (!is_mixed()) return {num_markers};
    auto v = mixed_markers;
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct TaskSample {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::vector<std::size_t> marker_positions;

  std::size_t num_markers() const noexcept { return marker_positions.size(); }
};

/// Modular sum or product of the marked values.
inline std::size_t combine_values(std::span<const std::size_t> values, std::size_t modulus,
                                  TaskOp op) {
  std::size_t acc = op == TaskOp::add ? 0 : 1 % modulus;
  for (std::size_t v : values) {
    acc = op == TaskOp::add ? (acc + v) % modulus : (acc * v) % modulus;
  }
  return acc;
}

/// Markers sit in [0, T-3] so their value slot precedes the EOS, and
/// consecutive markers are at least 3 apart: no marker is adjacent to
/// another marker or directly after another marker's value.
inline constexpr std::size_t kMinMarkerGap = 3;

inline void validate(const TaskSpec& spec) {
  if (spec.modulus < 2) throw ContractViolation("TaskSpec: modulus must be >= 2");
  if (spec.num_distractors < 1) throw ContractViolation("TaskSpec: need >= 1 distractor token");
  for (std::size_t m : spec.marker_counts()) {
    if (m < 1) throw ContractViolation("TaskSpec: num_markers must be >= 1");
    if (2 * m + 1 > spec.seq_len) {
      throw ContractViolation("TaskSpec: infeasible, 2m+1 = " + std::to_string(2 * m + 1) +
                              " > seq_len " + std::to_string(spec.seq_len));
    }
    if (kMinMarkerGap * (m - 1) + 3 > spec.seq_len) {
      throw ContractViolation("TaskSpec: " + std::to_string(m) +
                              " non-adjacent markers do not fit in seq_len " +
                              std::to_string(spec.seq_len));
    }
  }
}

/// Label recomputed from the token sequence alone.
inline std::size_t label_from_tokens(std::span<const std::size_t> tokens, const TaskSpec& spec) {
  const Vocab vocab = spec.vocab();
  std::vector<std::size_t> values;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == vocab.marker()) values.push_back(tokens[i + 1]);
  }
  return combine_values(values, spec.modulus, spec.op);
}

/// Marker positions chosen uniformly among all valid placements.
inline std::vector<std::size_t> sample_marker_positions(std::size_t m, std::size_t seq_len,
                                                        Rng& rng) {
  // Shift p_i -> p_i - (gap-1)*i maps valid placements bijectively onto
  // m-subsets of a compressed range, which we sample uniformly (Floyd).
  const std::size_t slots = seq_len - 2;  // markers in [0, T-3]
  const std::size_t compressed = slots - (kMinMarkerGap - 1) * (m - 1);
  std::vector<std::size_t> chosen;
  chosen.reserve(m);
  for (std::size_t j = compressed - m; j < compressed; ++j) {
    const std::size_t t = static_cast<std::size_t>(rng.below(j + 1));
    if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) {
      chosen.push_back(t);
    } else {
      chosen.push_back(j);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i = 0; i < m; ++i) chosen[i] += (kMinMarkerGap - 1) * i;
  return chosen;
}

inline TaskSample sample(const TaskSpec& spec, Rng& rng) {
  validate(spec);
  const Vocab vocab = spec.vocab();
  const std::size_t m =
      spec.is_mixed() ? spec.mixed_markers[rng.below(spec.mixed_markers.size())] : spec.num_markers;

  TaskSample s;
  s.marker_positions = sample_marker_positions(m, spec.seq_len, rng);
  s.tokens.assign(spec.seq_len, 0);
  std::vector<bool> taken(spec.seq_len, false);
  std::vector<std::size_t> values;
  values.reserve(m);
  for (std::size_t p : s.marker_positions) {
    const auto v = static_cast<std::size_t>(rng.below(spec.modulus));
    s.tokens[p] = vocab.marker();
    s.tokens[p + 1] = v;
    taken[p] = taken[p + 1] = true;
    values.push_back(v);
  }
  s.tokens[spec.seq_len - 1] = vocab.eos();
  taken[spec.seq_len - 1] = true;
  for (std::size_t i = 0; i < spec.seq_len; ++i) {
    if (!taken[i]) {
      s.tokens[i] = vocab.first_distractor() + static_cast<std::size_t>(rng.below(spec.num_distractors));
    }
  }
  s.label = combine_values(values, spec.modulus, spec.op);
  return s;
}

inline std::vector<TaskSample> sample_batch(const TaskSpec& spec, std::size_t batch_size,
                                            Rng& rng) {
  if (batch_size < 1) throw ContractViolation("sample_batch: batch_size must be >= 1");
  std::vector<TaskSample> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(sample(spec, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Schedules

enum class ScheduleKind { mixed, curriculum };

struct CurriculumStage {
  TaskSpec spec;
  std::size_t steps = 0;
  friend bool operator==(const CurriculumStage&, const CurriculumStage&) = default;
};

struct Schedule {
  ScheduleKind kind = ScheduleKind::mixed;
  /// Mixed: base spec whose `mixed_markers` holds the marker set.
  TaskSpec base;
  /// Curriculum: stages consumed in order.
  std::vector<CurriculumStage> stages;

  static Schedule mixed(TaskSpec base, std::vector<std::size_t> marker_set) {
    Schedule s;
    s.kind = ScheduleKind::mixed;
    base.mixed_markers = std::move(marker_set);
    s.base = std::move(base);
    return s;
  }
  static Schedule curriculum(std::vector<CurriculumStage> stages) {
    Schedule s;
    s.kind = ScheduleKind::curriculum;
    s.stages = std::move(stages);
    if (!s.stages.empty()) s.base = s.stages.front().spec;
    return s;
  }

  /// Union of marker counts across the schedule, ascending.
  std::vector<std::size_t> marker_counts() const {
    std::vector<std::size_t> out;
    if (kind == ScheduleKind::mixed) return base.marker_counts();
    for (const auto& st : stages)
      for (std::size_t m : st.spec.marker_counts()) out.push_back(m);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

/// Step at which each curriculum stage begins; empty for mixed schedules.
inline std::vector<std::size_t> stage_boundaries(const Schedule& schedule) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  for (const auto& st : schedule.stages) {
    out.push_back(start);
    start += st.steps;
  }
  return out;
}

inline TaskSpec spec_at_step(const Schedule& schedule, std::size_t step) {
  if (schedule.kind == ScheduleKind::mixed) {
    if (!schedule.base.is_mixed()) throw ContractViolation("spec_at_step: empty marker set");
    return schedule.base;
  }
  if (schedule.stages.empty()) throw ContractViolation("spec_at_step: empty schedule");
  std::size_t end = 0;
  for (const auto& st : schedule.stages) {
    end += st.steps;
    if (step < end) return st.spec;
  }
  return schedule.stages.back().spec;
}

/// One sample per line: space-separated token ids, TAB, label.
inline void write_dataset(std::ostream& os, std::span<const TaskSample> samples) {
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i != 0) os << ' ';
      os << s.tokens[i];
    }
    os << '\t' << s.label << '\n';
  }
}

}  // namespace emlab
