#pragma once

// Parameter snapshots.
//
// Binary blob, all integers and doubles little-endian:
//   offset 0   char[8]  magic "PGPARAM1"
//          8   u32      format version (1)
//         12   u32      activation (0 tanh, 1 relu, 2 identity)
//         16   u32      number of layer sizes L
//         20   u32[L]   layer sizes
//              u32      trailing log-std length (0 for plain networks)
//              u64      parameter count N (network parameters + log std)
//              f64[N]   canonical flat parameters, log std last
//
// The JSON sidecar repeats the header fields in readable form.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "polgrad/error.hpp"
#include "polgrad/nn.hpp"
#include "polgrad/policy.hpp"

namespace polgrad {

namespace detail {

inline constexpr std::array<char, 8> kParamMagic{'P', 'G', 'P', 'A', 'R', 'A', 'M', '1'};

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  std::uint64_t get(int bytes) {
    if (pos_ + static_cast<std::size_t>(bytes) > data_.size()) {
      throw IoError("parameter blob truncated");
    }
    std::uint64_t x = 0;
    for (int i = 0; i < bytes; ++i) {
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    }
    return x;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string raw(std::size_t n) {
    if (pos_ + n > data_.size()) throw IoError("parameter blob truncated");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t activation_code(Activation a) {
  switch (a) {
    case Activation::tanh: return 0;
    case Activation::relu: return 1;
    case Activation::identity: return 2;
  }
  return 0;
}

inline Activation activation_from_code(std::uint32_t c) {
  switch (c) {
    case 0: return Activation::tanh;
    case 1: return Activation::relu;
    case 2: return Activation::identity;
    default: throw IoError("parameter blob: unknown activation code");
  }
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Decoded snapshot: architecture plus flat parameters.
struct ParamBlob {
  std::vector<int> layer_sizes;
  Activation activation = Activation::tanh;
  int log_std_dim = 0;
  ParamVector values;
};

inline std::string encode_params(const MLPNet& net, const ParamVector& values, int log_std_dim) {
  std::string out(detail::kParamMagic.begin(), detail::kParamMagic.end());
  detail::put_u32(out, 1);
  detail::put_u32(out, detail::activation_code(net.activation()));
  detail::put_u32(out, static_cast<std::uint32_t>(net.layer_sizes().size()));
  for (int s : net.layer_sizes()) detail::put_u32(out, static_cast<std::uint32_t>(s));
  detail::put_u32(out, static_cast<std::uint32_t>(log_std_dim));
  detail::put_u64(out, static_cast<std::uint64_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    detail::put_u64(out, std::bit_cast<std::uint64_t>(values[i]));
  }
  return out;
}

inline ParamBlob decode_params(const std::string& bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.raw(8);
  if (std::memcmp(magic.data(), detail::kParamMagic.data(), 8) != 0) {
    throw IoError("parameter blob: bad magic");
  }
  if (r.u32() != 1) throw IoError("parameter blob: unsupported version");
  ParamBlob blob;
  blob.activation = detail::activation_from_code(r.u32());
  const std::uint32_t n_sizes = r.u32();
  if (n_sizes < 2 || n_sizes > 64) throw IoError("parameter blob: bad layer count");
  for (std::uint32_t i = 0; i < n_sizes; ++i) blob.layer_sizes.push_back(static_cast<int>(r.u32()));
  blob.log_std_dim = static_cast<int>(r.u32());
  const std::uint64_t n = r.u64();
  MLPNet probe(blob.layer_sizes, blob.activation);
  if (n != probe.param_count() + static_cast<std::uint64_t>(blob.log_std_dim)) {
    throw IoError("parameter blob: count does not match architecture");
  }
  blob.values.resize(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) blob.values[static_cast<Eigen::Index>(i)] = r.f64();
  if (!r.at_end()) throw IoError("parameter blob: trailing bytes");
  return blob;
}

inline nlohmann::json params_sidecar(const MLPNet& net, int log_std_dim, std::size_t count,
                                     const std::string& blob_name) {
  return {{"format", "pgparam"},
          {"version", 1},
          {"blob", blob_name},
          {"layer_sizes", net.layer_sizes()},
          {"activation", to_string(net.activation())},
          {"log_std_dim", log_std_dim},
          {"param_count", count},
          {"layout", "layer-major; weights row-major then bias; log_std last"},
          {"endianness", "little"}};
}

/// Writes `<stem>.bin` and `<stem>.json`.
inline void save_net(const std::string& stem, const MLPNet& net) {
  const ParamVector v = net.flatten();
  detail::write_file(stem + ".bin", encode_params(net, v, 0));
  const std::string name = stem.substr(stem.find_last_of('/') + 1) + ".bin";
  detail::write_file(stem + ".json", params_sidecar(net, 0, v.size(), name).dump(2) + "\n");
}

inline void save_policy(const std::string& stem, const GaussianPolicy& policy) {
  const ParamVector v = policy.flatten();
  detail::write_file(stem + ".bin", encode_params(policy.mean_net(), v, policy.act_dim()));
  const std::string name = stem.substr(stem.find_last_of('/') + 1) + ".bin";
  detail::write_file(stem + ".json",
                     params_sidecar(policy.mean_net(), policy.act_dim(), v.size(), name).dump(2) +
                         "\n");
}

inline MLPNet load_net(const std::string& path) {
  ParamBlob b = decode_params(detail::read_file(path));
  if (b.log_std_dim != 0) throw IoError("load_net: blob holds a policy");
  MLPNet net(b.layer_sizes, b.activation);
  net.unflatten(b.values);
  return net;
}

inline GaussianPolicy load_policy(const std::string& path) {
  ParamBlob b = decode_params(detail::read_file(path));
  if (b.log_std_dim != b.layer_sizes.back()) throw IoError("load_policy: blob is not a policy");
  GaussianPolicy p(MLPNet(b.layer_sizes, b.activation), Vector::Zero(b.log_std_dim));
  p.unflatten(b.values);
  return p;
}

}  // namespace polgrad
