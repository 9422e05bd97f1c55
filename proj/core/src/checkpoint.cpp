#include "sidlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sidlab {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_f64(std::string& out, double v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v;
    std::memcpy(&v, bytes_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f64s(std::vector<double>& out, const char* what) {
    if (out.size() > (bytes_.size() - pos_) / 8) need(out.size() * 8, what);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * 8);
    pos_ += out.size() * 8;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add_parameters(const std::string& prefix,
                                const std::vector<tg::Parameter>& params) {
  for (const auto& p : params) add(prefix + p.name, p.value);
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const tg::Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw CheckpointError(CheckpointError::Kind::kShape, "checkpoint has no tensor '" + name + "'");
}

void Checkpoint::load_parameters(const std::string& prefix,
                                 std::vector<tg::Parameter>& params) const {
  for (auto& p : params) {
    const tg::Tensor& t = at(prefix + p.name);
    if (t.shape() != p.value.shape()) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "tensor '" + prefix + p.name + "' has shape " +
                                tg::shape_string(t.shape()) + ", architecture expects " +
                                tg::shape_string(p.value.shape()));
    }
    p.value = t;
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json meta = ckpt.metadata;
  meta["tensor_count"] = ckpt.tensors.size();
  const std::string meta_text = meta.dump();

  std::string out(kCheckpointMagic, 8);
  put_u64(out, meta_text.size());
  out += meta_text;
  for (const auto& [name, t] : ckpt.tensors) {
    put_u64(out, name.size());
    out += name;
    put_u64(out, t.rank());
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.data()) put_f64(out, v);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) {
    throw CheckpointError(CheckpointError::Kind::kIo, "cannot write checkpoint " + path.string());
  }
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) {
    throw CheckpointError(CheckpointError::Kind::kIo, "short write to " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) {
    throw CheckpointError(CheckpointError::Kind::kIo, "cannot read checkpoint " + path.string());
  }
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader in(bytes);
  if (bytes.size() < 8 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          path.string() + " is not a SIDLAB01 checkpoint (bad magic/version)");
  }
  in.str(8, "magic");
  Checkpoint ckpt;
  const std::uint64_t meta_len = in.u64("metadata length");
  try {
    ckpt.metadata = nlohmann::json::parse(in.str(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(CheckpointError::Kind::kTruncated,
                          std::string("corrupt checkpoint metadata: ") + e.what());
  }
  while (!in.at_end()) {
    const std::uint64_t name_len = in.u64("tensor name length");
    std::string name = in.str(name_len, "tensor name");
    const std::uint64_t rank = in.u64("tensor rank");
    if (rank > 8) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, "implausible tensor rank in " + name);
    }
    tg::Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(in.u64("tensor dims"));
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    in.need(count * 8, "tensor payload");
    std::vector<double> data(count);
    in.f64s(data, "tensor payload");
    ckpt.tensors.emplace_back(std::move(name), tg::Tensor(std::move(shape), std::move(data)));
  }
  const auto expected = ckpt.metadata.value("tensor_count", ckpt.tensors.size());
  if (expected != ckpt.tensors.size()) {
    throw CheckpointError(CheckpointError::Kind::kTruncated,
                          "checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                              " tensors, metadata promises " + std::to_string(expected));
  }
  return ckpt;
}

nlohmann::json schedule_to_json(const DiffusionSchedule& sched) {
  return {{"kind", "linear"}, {"T", sched.steps()}, {"beta_1", sched.beta_1()},
          {"beta_T", sched.beta_T()}};
}

DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  return DiffusionSchedule::linear(j.at("T").get<int>(), j.at("beta_1").get<double>(),
                                   j.at("beta_T").get<double>());
}

void add_network(Checkpoint& ckpt, const std::string& prefix, const ScoreNet& net) {
  ckpt.metadata["networks"][prefix] = {{"spec", net.spec().to_json()},
                                       {"schedule", schedule_to_json(net.schedule())}};
  ckpt.add_parameters(prefix, net.parameters());
}

ScoreNet network_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& nets = ckpt.metadata.value("networks", nlohmann::json::object());
  if (!nets.contains(prefix)) {
    throw CheckpointError(CheckpointError::Kind::kIncompatible,
                          "checkpoint has no network under '" + prefix + "'");
  }
  const auto& entry = nets.at(prefix);
  ScoreNet net(NetworkSpec::from_json(entry.at("spec")), schedule_from_json(entry.at("schedule")),
               0);
  ckpt.load_parameters(prefix, net.parameters());
  return net;
}

}  // namespace sidlab
