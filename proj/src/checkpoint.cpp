#include "kgc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "kgc/error.hpp"

namespace kgc {

namespace {

constexpr char kMagic[8] = {'K', 'G', 'C', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

struct Reader {
  const std::uint8_t* p;
  const std::uint8_t* end;

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n) throw parse_error("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(*p++) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(*p++) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
};

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_params(const std::vector<const Parameter*>& params,
                                           const std::string& metadata_json) {
  std::vector<std::uint8_t> body;
  put_u32(body, static_cast<std::uint32_t>(metadata_json.size()));
  body.insert(body.end(), metadata_json.begin(), metadata_json.end());
  put_u64(body, params.size());
  for (const Parameter* p : params) {
    put_u32(body, static_cast<std::uint32_t>(p->name.size()));
    body.insert(body.end(), p->name.begin(), p->name.end());
    put_u32(body, static_cast<std::uint32_t>(p->value.rank()));
    for (auto d : p->value.shape()) put_u64(body, static_cast<std::uint64_t>(d));
    for (double v : p->value.values()) put_f64(body, v);
  }

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, fnv1a64(body.data(), body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

void write_checkpoint(const std::string& path, const std::vector<const Parameter*>& params,
                      const std::string& metadata_json) {
  const auto bytes = serialize_params(params, metadata_json);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw parse_error("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw parse_error("short write to checkpoint: " + path);
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes.data(), bytes.data() + bytes.size()};
  const std::string magic = r.str(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) {
    throw parse_error("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw config_error("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t stored_sum = r.u64();
  const std::uint64_t actual_sum = fnv1a64(r.p, static_cast<std::size_t>(r.end - r.p));
  if (stored_sum != actual_sum) throw parse_error("checkpoint checksum mismatch");

  Checkpoint ckpt;
  ckpt.metadata_json = r.str(r.u32());
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    CheckpointEntry entry;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      entry.shape.push_back(static_cast<std::int64_t>(r.u64()));
      numel *= entry.shape.back();
    }
    entry.values.reserve(static_cast<std::size_t>(numel));
    for (std::int64_t j = 0; j < numel; ++j) entry.values.push_back(r.f64());
    ckpt.tensors.emplace(name, std::move(entry));
  }
  return ckpt;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw parse_error("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void apply_checkpoint(const Checkpoint& ckpt, const ParamList& params) {
  for (Parameter* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) {
      throw config_error("checkpoint is missing parameter '" + p->name + "'");
    }
    if (it->second.shape != p->value.shape()) {
      throw config_error("checkpoint shape " + shape_str(it->second.shape) + " for '" + p->name +
                         "' does not match model shape " + p->value.shape_str());
    }
    p->value.values() = it->second.values;
  }
}

}  // namespace kgc
