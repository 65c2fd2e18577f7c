#pragma once

// MOWCKPT1 checkpoints: the 8-byte magic, then for each named tensor a u32
// name length, the UTF-8 name, u32 rank, u32 dims and raw f64 values, all
// little-endian, until end of file. Theta entries are stored under "theta/",
// Phi entries under "phi/".

#include <string>
#include <string_view>
#include <vector>

#include "mownet/binary_io.hpp"
#include "mownet/errors.hpp"
#include "mownet/param_set.hpp"

namespace mownet {

inline constexpr std::string_view kCheckpointMagic = "MOWCKPT1";

struct Checkpoint {
  ParamSet theta;
  ParamSet phi;
};

inline std::vector<char> encode_checkpoint(const ParamSet& theta, const ParamSet& phi) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  auto put = [&w](const std::string& prefix, const ParamSet& ps) {
    for (const auto& [name, t] : ps) {
      const auto full = prefix + name;
      w.u32(static_cast<std::uint32_t>(full.size()));
      w.bytes(full);
      w.u32(2);
      w.u32(static_cast<std::uint32_t>(t.rows()));
      w.u32(static_cast<std::uint32_t>(t.cols()));
      for (double v : t.data()) w.f64(v);
    }
  };
  put("theta/", theta);
  put("phi/", phi);
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("bad checkpoint magic", 0);
  }
  Checkpoint ck;
  while (!r.at_end()) {
    const auto entry_at = r.offset();
    const auto len = r.u32("name length");
    if (len > r.remaining()) throw FormatError("name length exceeds file size", entry_at);
    auto name = r.bytes(len, "name");
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 2) throw FormatError("unsupported tensor rank " + std::to_string(rank), r.offset() - 4);
    std::size_t rows = 1, cols = 1;
    if (rank == 2) rows = r.u32("dims");
    cols = r.u32("dims");
    if (rows == 0 || cols == 0) throw FormatError("zero tensor dimension", r.offset());
    if (r.remaining() / 8 < rows * cols) throw FormatError("truncated tensor '" + name + "'", r.offset());
    std::vector<double> values(rows * cols);
    for (auto& v : values) v = r.f64("tensor values");
    auto tensor = Tensor::parameter(rows, cols, std::move(values));
    try {
      if (name.starts_with("theta/")) {
        ck.theta.insert(name.substr(6), tensor);
      } else if (name.starts_with("phi/")) {
        ck.phi.insert(name.substr(4), tensor);
      } else {
        throw FormatError("tensor '" + name + "' belongs to no group", entry_at);
      }
    } catch (const ContractError& e) {
      throw FormatError(e.what(), entry_at);
    }
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParamSet& theta, const ParamSet& phi) {
  io::write_file(path, encode_checkpoint(theta, phi));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace mownet
