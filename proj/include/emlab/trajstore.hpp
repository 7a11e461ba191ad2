#pragma once

// Bit-exact persistence of parameter trajectories.
//
// ckpt_<step>.bin layout (little-endian):
//   8 bytes   magic "EMTRAJ01"
//   u64       step
//   u64       P
//   P x f32   flattened parameters, rounded to nearest from f64
//
// manifest.json holds the run id, the training config, the ordered
// checkpoint list and the tensor layout table.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "emlab/errors.hpp"
#include "emlab/model.hpp"
#include "emlab/numkit.hpp"

namespace emlab {

namespace fs = std::filesystem;

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'T', 'R', 'A', 'J', '0', '1'};
inline constexpr char kStateMagic[8] = {'E', 'M', 'S', 'T', 'A', 'T', 'E', '1'};

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

/// Write to a temporary sibling, then rename over the target.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string checkpoint_filename(std::size_t step) {
  return "ckpt_" + std::to_string(step) + ".bin";
}

inline std::string encode_checkpoint(std::size_t step, std::span<const double> flat) {
  std::string buf;
  buf.reserve(24 + 4 * flat.size());
  buf.append(kCheckpointMagic, 8);
  detail::put_u64(buf, step);
  detail::put_u64(buf, flat.size());
  for (double x : flat) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  return buf;
}

/// Writes ckpt_<step>.bin into `dir` and returns the file name.
inline std::string save_checkpoint(const fs::path& dir, std::size_t step,
                                   std::span<const double> flat, std::size_t expected_p) {
  if (flat.size() != expected_p) {
    throw ContractViolation("save_checkpoint: length " + std::to_string(flat.size()) +
                            " != manifest P " + std::to_string(expected_p));
  }
  const std::string name = checkpoint_filename(step);
  detail::write_file_atomic(dir / name, encode_checkpoint(step, flat));
  return name;
}

struct Checkpoint {
  std::size_t step = 0;
  std::vector<double> values;  ///< widened from the stored f32
};

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError(origin + ": bad checkpoint magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  Checkpoint c;
  c.step = detail::get_u64(p + 8);
  const std::uint64_t n = detail::get_u64(p + 16);
  if (bytes.size() != 24 + 4 * n)
    throw FormatError(origin + ": length " + std::to_string(bytes.size()) + " inconsistent with P " +
                      std::to_string(n));
  c.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i)
    c.values[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + 24 + 4 * i)));
  return c;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Full-precision training state (for resuming).

inline void save_state(const fs::path& path, std::size_t step, std::span<const double> flat) {
  std::string buf;
  buf.append(kStateMagic, 8);
  detail::put_u64(buf, step);
  detail::put_u64(buf, flat.size());
  for (double x : flat) detail::put_u64(buf, std::bit_cast<std::uint64_t>(x));
  detail::write_file_atomic(path, buf);
}

inline Checkpoint load_state(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kStateMagic, 8) != 0)
    throw FormatError(path.string() + ": bad state magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  Checkpoint c;
  c.step = detail::get_u64(p + 8);
  const std::uint64_t n = detail::get_u64(p + 16);
  if (bytes.size() != 24 + 8 * n) throw FormatError(path.string() + ": truncated state");
  c.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i)
    c.values[i] = std::bit_cast<double>(detail::get_u64(p + 24 + 8 * i));
  return c;
}

// ---------------------------------------------------------------------------
// Manifest

struct CheckpointEntry {
  std::size_t step = 0;
  std::string file;
  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct RunManifest {
  std::string run_id;
  nlohmann::json config;  ///< full training config, as written by the trainer
  std::vector<CheckpointEntry> checkpoints;
  ParamLayout layout;

  std::size_t param_count() const noexcept { return layout.total(); }
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j;
  j["format"] = "emlab-trajectory-v1";
  j["run_id"] = m.run_id;
  j["config"] = m.config;
  j["param_count"] = m.param_count();
  auto& layout = j["layout"] = nlohmann::json::array();
  for (const auto& s : m.layout.slots())
    layout.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  auto& ck = j["checkpoints"] = nlohmann::json::array();
  for (const auto& c : m.checkpoints) ck.push_back({{"step", c.step}, {"file", c.file}});
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config = j.at("config");
    std::vector<TensorSlot> slots;
    for (const auto& s : j.at("layout"))
      slots.push_back({s.at("name").get<std::string>(), s.at("offset").get<std::size_t>(),
                       s.at("rows").get<std::size_t>(), s.at("cols").get<std::size_t>()});
    m.layout = ParamLayout(std::move(slots));
    if (j.at("param_count").get<std::size_t>() != m.layout.total())
      throw FormatError("manifest: layout does not sum to param_count");
    for (const auto& c : j.at("checkpoints"))
      m.checkpoints.push_back({c.at("step").get<std::size_t>(), c.at("file").get<std::string>()});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
  detail::write_file_atomic(dir / "manifest.json", to_json(m).dump(2) + "\n");
}

inline RunManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IntegrityError("missing manifest: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

/// Appends checkpoints to a run directory, keeping manifest.json current
/// after every write.
class TrajectoryWriter {
 public:
  TrajectoryWriter(fs::path dir, std::string run_id, nlohmann::json config, ParamLayout layout)
      : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    manifest_.run_id = std::move(run_id);
    manifest_.config = std::move(config);
    manifest_.layout = std::move(layout);
    write_manifest(dir_, manifest_);
  }

  void add(std::size_t step, std::span<const double> flat) {
    const std::string name = save_checkpoint(dir_, step, flat, manifest_.param_count());
    manifest_.checkpoints.push_back({step, name});
    write_manifest(dir_, manifest_);
  }

  const RunManifest& manifest() const noexcept { return manifest_; }
  const fs::path& dir() const noexcept { return dir_; }

 private:
  fs::path dir_;
  RunManifest manifest_;
};

/// n snapshots x P' selected coordinates.
struct TrajectoryMatrix {
  Matrix data;
  std::vector<std::size_t> steps;
  std::vector<TensorSlot> tensors;  ///< offsets relative to the selected columns

  std::size_t snapshots() const noexcept { return data.rows(); }
  std::size_t dims() const noexcept { return data.cols(); }
};

/// Loads the named tensors (all tensors when `names` is empty) from every
/// checkpoint with step <= `upto_step`, ordered by step.
inline TrajectoryMatrix load_trajectory(const fs::path& dir, const std::vector<std::string>& names = {},
                                        std::size_t upto_step = static_cast<std::size_t>(-1)) {
  const RunManifest m = read_manifest(dir);
  std::vector<TensorSlot> selected;
  if (names.empty()) {
    selected = m.layout.slots();
  } else {
    for (const auto& n : names) {
      if (!m.layout.contains(n)) throw ContractViolation("load_trajectory: unknown tensor '" + n + "'");
      selected.push_back(m.layout.find(n));
    }
  }
  std::size_t width = 0;
  TrajectoryMatrix out;
  for (const auto& s : selected) {
    out.tensors.push_back({s.name, width, s.rows, s.cols});
    width += s.size();
  }

  auto entries = m.checkpoints;
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.step < b.step; });
  std::erase_if(entries, [&](const auto& e) { return e.step > upto_step; });

  out.data = Matrix(entries.size(), width);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const fs::path path = dir / entries[i].file;
    if (!fs::exists(path))
      throw IntegrityError("checkpoint listed in manifest is missing: " + path.string());
    const Checkpoint c = load_checkpoint(path);
    if (c.values.size() != m.param_count())
      throw IntegrityError(path.string() + ": P " + std::to_string(c.values.size()) +
                           " != manifest P " + std::to_string(m.param_count()));
    if (c.step != entries[i].step)
      throw IntegrityError(path.string() + ": step " + std::to_string(c.step) +
                           " != manifest step " + std::to_string(entries[i].step));
    auto row = out.data.row(i);
    std::size_t col = 0;
    for (const auto& s : selected) {
      std::copy_n(c.values.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), row.begin() + static_cast<std::ptrdiff_t>(col));
      col += s.size();
    }
    out.steps.push_back(entries[i].step);
  }
  return out;
}

}  // namespace emlab
