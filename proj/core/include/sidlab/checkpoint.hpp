#pragma once

// Binary checkpoint container:
//
//   8 bytes   magic "SIDLAB01"
//   u64       JSON metadata length, then that many UTF-8 bytes
//   records   until end of file, each:
//               u64 name length, name bytes,
//               u64 rank, rank × u64 dims,
//               product(dims) × f64 payload
//
// All integers and floats are little-endian. The metadata carries
// "tensor_count" so truncation at a record boundary is detected too.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/nets.hpp"
#include "sidlab/tensorgrad.hpp"

namespace sidlab {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kVersion, kTruncated, kShape, kIncompatible };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kCheckpointMagic[9] = "SIDLAB01";

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, tg::Tensor>> tensors;

  void add(const std::string& name, const tg::Tensor& t) { tensors.emplace_back(name, t); }
  void add_parameters(const std::string& prefix, const std::vector<tg::Parameter>& params);
  bool contains(const std::string& name) const;
  const tg::Tensor& at(const std::string& name) const;
  // Copies `prefix + p.name` into each parameter, checking shapes.
  void load_parameters(const std::string& prefix, std::vector<tg::Parameter>& params) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// A network stored under `prefix` with its spec and schedule in metadata.
void add_network(Checkpoint& ckpt, const std::string& prefix, const ScoreNet& net);
ScoreNet network_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

nlohmann::json schedule_to_json(const DiffusionSchedule& sched);
DiffusionSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace sidlab
