#include "pdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pdiff/image_io.hpp"

namespace pdiff {

namespace {

constexpr char kMagic[8] = {'P', 'D', 'I', 'F', 'F', 'C', 'K', 'P'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("cannot write checkpoint " + path.string());
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.shape().size());
    for (int d : t.shape()) u64(static_cast<std::uint64_t>(d));
    bytes(t.data(), t.size() * sizeof(double));
  }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot read checkpoint " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated checkpoint " + path_.string());
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 30)) throw IoError("corrupt checkpoint " + path_.string());
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Tensor tensor() {
    const std::uint64_t rank = u64();
    if (rank > 8) throw IoError("corrupt checkpoint " + path_.string());
    std::vector<int> shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(u64()));
    Tensor t(shape);
    bytes(t.data(), t.size() * sizeof(double));
    return t;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

void write_arrays(Writer& w, const std::map<std::string, Tensor>& arrays) {
  w.u64(arrays.size());
  for (const auto& [name, t] : arrays) {
    w.str(name);
    w.tensor(t);
  }
}

std::map<std::string, Tensor> read_arrays(Reader& r) {
  std::map<std::string, Tensor> out;
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    out[name] = r.tensor();
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  const std::uint32_t version = Checkpoint::kVersion;
  w.bytes(&version, sizeof version);
  w.str(ckpt.header.dump());
  write_arrays(w, ckpt.arrays);
  write_arrays(w, ckpt.optimizer);
  w.u64(static_cast<std::uint64_t>(ckpt.step));
  w.u64(ckpt.rng_states.size());
  for (const auto& [name, state] : ckpt.rng_states) {
    w.str(name);
    w.str(state);
  }
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  r.bytes(&version, sizeof version);
  if (version != Checkpoint::kVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  try {
    c.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string());
  }
  c.arrays = read_arrays(r);
  c.optimizer = read_arrays(r);
  c.step = static_cast<long>(r.u64());
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    c.rng_states[name] = r.str();
  }
  return c;
}

void require_compatible_header(const nlohmann::json& expected, const nlohmann::json& found) {
  for (const auto& [key, value] : expected.items()) {
    if (!found.contains(key)) throw ValidationError("checkpoint header lacks '" + key + "'");
    if (found.at(key) != value) {
      throw ValidationError("checkpoint mismatch on '" + key + "': expected " + value.dump() + ", found " +
                            found.at(key).dump());
    }
  }
}

}  // namespace pdiff
