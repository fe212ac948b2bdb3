#include "mdtaf/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace mdtaf {

namespace {

constexpr std::size_t kMagicLen = 8;
constexpr std::size_t kVersionOffset = 5;  // "MDTAF" then three version digits
constexpr std::uint64_t kMaxNameLen = 1 << 16;
constexpr std::uint64_t kMaxRank = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  const auto v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) {
      throw FormatError("checkpoint " + path_ + " is truncated while reading " + what);
    }
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading checkpoint " + path);
  return bytes;
}

Checkpoint parse(const std::string& bytes, const std::string& path) {
  if (bytes.size() < kMagicLen) throw FormatError("checkpoint " + path + " is truncated while reading magic");
  const std::string magic = bytes.substr(0, kMagicLen);
  if (magic != kCheckpointMagic) {
    if (magic.compare(0, kVersionOffset, kCheckpointMagic, kVersionOffset) == 0) {
      throw VersionError("checkpoint " + path + " has version " + magic.substr(kVersionOffset) + ", expected " +
                         std::string(kCheckpointMagic + kVersionOffset));
    }
    throw MagicError("checkpoint " + path + " does not start with " + kCheckpointMagic);
  }
  Reader r(bytes, path);
  r.str(kMagicLen, "magic");

  const auto json_len = r.u64("config length");
  r.need(json_len, "config");
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(r.str(json_len, "config")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path + " has a malformed config: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint " + path + " has an invalid config: " + e.what());
  }

  const auto count = r.u64("tensor count");
  // Every tensor needs at least a name length, a rank and one value.
  if (count > r.remaining() / 20) throw FormatError("checkpoint " + path + " is truncated: too few bytes for " +
                                                    std::to_string(count) + " tensors");
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = r.u64("tensor name length");
    if (name_len == 0 || name_len > kMaxNameLen) throw FormatError("checkpoint " + path + ": bad tensor name length");
    auto name = r.str(name_len, "tensor name");
    const auto rank = r.u64("tensor rank");
    if (rank == 0 || rank > kMaxRank) throw FormatError("checkpoint " + path + ": tensor " + name + " has rank " +
                                                        std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto e = r.u64("tensor extent");
      if (e == 0 || e > (std::uint64_t{1} << 40) || numel > (std::uint64_t{1} << 40) / e) {
        throw FormatError("checkpoint " + path + ": tensor " + name + " has an invalid extent");
      }
      numel *= e;
      shape.push_back(static_cast<std::int64_t>(e));
    }
    r.need(numel * 4, ("data of " + name).c_str());
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    if (ck.params.contains(name)) throw FormatError("checkpoint " + path + ": duplicate tensor " + name);
    ck.params.insert(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint " + path + " has trailing bytes");
  return ck;
}

}  // namespace

void check_against_layout(const ParamStore<float>& params, const ParamLayout& layout) {
  const auto& specs = layout.specs();
  if (params.size() != specs.size()) {
    throw TensorCountError("checkpoint holds " + std::to_string(params.size()) + " tensors, configuration expects " +
                           std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& name = params.names()[i];
    if (name != specs[i].name) {
      throw ShapeMismatchError("tensor #" + std::to_string(i) + " is " + name + ", configuration expects " +
                               specs[i].name);
    }
    const auto& shape = params.tensors()[i].shape();
    if (shape != specs[i].shape) {
      throw ShapeMismatchError("tensor " + name + " has shape " + shape_str(shape) + ", configuration expects " +
                               shape_str(specs[i].shape));
    }
  }
}

void save_checkpoint(const ParamStore<float>& params, const ModelConfig& cfg, const std::string& path) {
  std::string out(kCheckpointMagic, kMagicLen);
  const auto json = to_json(cfg).dump();
  put_u64(out, json.size());
  out += json;
  put_u64(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.tensors()[i];
    put_u64(out, name.size());
    out += name;
    put_u64(out, static_cast<std::uint64_t>(t.rank()));
    for (auto e : t.shape()) put_u64(out, static_cast<std::uint64_t>(e));
    for (auto v : t.data()) put_f32(out, v);
  }

  const auto tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  auto ck = parse(read_file(path), path);
  check_against_layout(ck.params, model_layout(ck.config));
  return ck;
}

ParamStore<float> load_checkpoint_params(const std::string& path, const ModelConfig& expected) {
  auto ck = parse(read_file(path), path);
  check_against_layout(ck.params, model_layout(expected));
  return std::move(ck.params);
}

}  // namespace mdtaf
