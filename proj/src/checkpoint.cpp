// SPDX-License-Identifier: Apache-2.0
#include "uprl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace uprl {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xFF);
  b[1] = static_cast<char>((v >> 8) & 0xFF);
  b[2] = static_cast<char>((v >> 16) & 0xFF);
  b[3] = static_cast<char>((v >> 24) & 0xFF);
  out.append(b, 4);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.append(b, 8);
}

struct Reader {
  const std::string& buf;
  std::size_t pos{0};

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw std::runtime_error(std::string("checkpoint: truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
      bits = (bits << 8) | static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]);
    pos += 8;
    return std::bit_cast<double>(bits);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::string out;
  out.append("UPRL", 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    const auto& shape = t.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf};
  if (r.bytes(4, "magic") != "UPRL")
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version) + " in " + path);
  NamedTensors out;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.bytes(name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8)
      throw std::runtime_error("checkpoint: implausible rank in " + path);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(r.u32("dim"));
      numel *= static_cast<std::size_t>(d);
    }
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("values");
    out.emplace_back(std::move(name),
                     Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, NamedTensors& dest) {
  NamedTensors loaded = load_checkpoint(path);
  std::map<std::string, Tensor*> index;
  for (auto& [name, t] : loaded) index[name] = &t;

  for (auto& [name, t] : dest) {
    auto it = index.find(name);
    if (it == index.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "' in " +
                               path);
    if (it->second->shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name +
                               "': file has " + shape_str(it->second->shape()) +
                               ", model wants " + shape_str(t.shape()));
    auto src = it->second->data();
    auto dst = t.raw_data();
    std::copy(src.begin(), src.end(), dst.begin());
    index.erase(it);
  }
  if (!index.empty())
    throw std::runtime_error("checkpoint: unexpected extra tensor '" +
                             index.begin()->first + "' in " + path);
}

}  // namespace uprl
