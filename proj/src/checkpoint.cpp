#include "snf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "snf/errors.hpp"

namespace snf {

namespace {

constexpr char kMagic[8] = {'S', 'N', 'F', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_raw(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ValidationError("checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw ValidationError("checkpoint has no array named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "snf-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["kind"] = ckpt.kind;
  manifest["meta"] = ckpt.meta;
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    arrays.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  manifest["arrays"] = arrays;
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_raw(out, kCheckpointVersion);
  put_raw(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto& [name, t] : ckpt.arrays)
    for (double v : t.data()) put_raw(out, v);
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("not a checkpoint file (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_raw<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get_raw<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw ValidationError("checkpoint manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  pos += len;
  const std::size_t payload = pos;

  Checkpoint ckpt;
  ckpt.kind = manifest.value("kind", "");
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& a : manifest.at("arrays")) {
    Shape shape = a.at("shape").get<Shape>();
    const auto offset = a.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    std::size_t p = payload + offset * sizeof(double);
    if (p + n * sizeof(double) > bytes.size()) throw ValidationError("checkpoint payload truncated");
    std::vector<double> data(n);
    if (n) std::memcpy(data.data(), bytes.data() + p, n * sizeof(double));
    ckpt.arrays.emplace_back(a.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace snf
