#pragma once

// "SGCK" checkpoint files: parameters, normalization statistics and training
// history behind a config digest and a whole-file checksum.
//
// Layout (little-endian):
//   "SGCK" | u16 version | u64 config digest
//   u32 n_tensors, then per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f32 payload
//   f64 mu_x, mu_y, sigma_x, sigma_y, eps
//   u32 n_epochs, then per epoch: u32 epoch, f64 loss, f64 val_acc
//   u64 FNV-1a of every preceding byte

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/graph.hpp"
#include "siftgraph/io.hpp"
#include "siftgraph/tensor.hpp"

namespace siftgraph {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double val_acc = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct Checkpoint {
  std::uint64_t config_digest = 0;
  ParamSet params;
  NormalizationStats stats;
  std::vector<EpochRecord> history;
};

// Bit-exact comparison of everything a checkpoint stores.
inline bool same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
  if (a.config_digest != b.config_digest || !(a.stats == b.stats) || a.history != b.history) return false;
  if (a.params.size() != b.params.size()) return false;
  for (auto ia = a.params.begin(), ib = b.params.begin(); ia != a.params.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
    const auto va = ia->second.values(), vb = ib->second.values();
    if (std::memcmp(va.data(), vb.data(), va.size_bytes()) != 0) return false;
  }
  return true;
}

enum class CheckpointFault { bad_magic, version, checksum, truncated, config_mismatch };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointFault fault, const std::string& msg) : Error(ErrorKind::validation, msg), fault_(fault) {}
  CheckpointFault fault() const { return fault_; }

 private:
  CheckpointFault fault_;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes("SGCK");
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(ck.config_digest);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    const auto v = t.values();
    w.bytes({reinterpret_cast<const char*>(v.data()), v.size_bytes()});
  }
  for (double s : {ck.stats.mu_x, ck.stats.mu_y, ck.stats.sigma_x, ck.stats.sigma_y, ck.stats.eps}) w.put(s);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.history.size()));
  for (const auto& h : ck.history) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(h.epoch));
    w.put(h.loss);
    w.put(h.val_acc);
  }
  w.put<std::uint64_t>(fnv1a64(w.str()));
  return w.str();
}

// `expected_digest`, when non-zero, must match the stored config digest.
inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& name = "checkpoint",
                                    std::uint64_t expected_digest = 0) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "SGCK")
    throw CheckpointError(CheckpointFault::bad_magic, name + ": not a checkpoint (bad magic)");
  if (bytes.size() < 6) throw CheckpointError(CheckpointFault::truncated, name + ": truncated header");
  std::uint16_t version;
  std::memcpy(&version, bytes.data() + 4, 2);
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointFault::version, name + ": unsupported checkpoint version " + std::to_string(version) +
                                                        " (expected " + std::to_string(kCheckpointVersion) + ")");

  Checkpoint ck;
  try {
    ByteReader r(bytes, name);
    r.bytes(6);
    ck.config_digest = r.get<std::uint64_t>();
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string pname(r.bytes(r.get<std::uint32_t>()));
      const auto rank = r.get<std::uint32_t>();
      if (rank > 8) throw CheckpointError(CheckpointFault::checksum, name + ": implausible tensor rank");
      Shape shape(rank);
      std::size_t count = 1;
      for (auto& d : shape) {
        d = r.get<std::uint64_t>();
        if (d > (std::size_t{1} << 32)) throw CheckpointError(CheckpointFault::checksum, name + ": implausible tensor size");
        count *= d;
      }
      if (count > r.remaining() / sizeof(float)) r.bytes(r.remaining() + 1);
      std::vector<float> v(count);
      const auto raw = r.bytes(count * sizeof(float));
      std::memcpy(v.data(), raw.data(), raw.size());
      if (ck.params.contains(pname)) throw CheckpointError(CheckpointFault::checksum, name + ": duplicate tensor " + pname);
      ck.params.add(pname, Tensor(std::move(shape), std::move(v), true));
    }
    ck.stats.mu_x = r.get<double>();
    ck.stats.mu_y = r.get<double>();
    ck.stats.sigma_x = r.get<double>();
    ck.stats.sigma_y = r.get<double>();
    ck.stats.eps = r.get<double>();
    const auto epochs = r.get<std::uint32_t>();
    if (epochs > r.remaining() / 20) r.bytes(r.remaining() + 1);
    ck.history.resize(epochs);
    for (auto& h : ck.history) {
      h.epoch = static_cast<int>(r.get<std::uint32_t>());
      h.loss = r.get<double>();
      h.val_acc = r.get<double>();
    }
    const std::size_t body = r.position();
    const auto stored = r.get<std::uint64_t>();
    if (r.remaining() != 0) throw CheckpointError(CheckpointFault::checksum, name + ": trailing bytes after checksum");
    if (stored != fnv1a64(bytes.substr(0, body)))
      throw CheckpointError(CheckpointFault::checksum, name + ": checksum mismatch (file is corrupt)");
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(CheckpointFault::truncated, e.what());
  }
  if (expected_digest != 0 && ck.config_digest != expected_digest)
    throw CheckpointError(CheckpointFault::config_mismatch,
                          name + ": config digest " + hex64(ck.config_digest) + " does not match " + hex64(expected_digest));
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  atomic_write(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest = 0) {
  return decode_checkpoint(read_file(path), path.string(), expected_digest);
}

}  // namespace siftgraph
