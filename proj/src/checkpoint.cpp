#include "pbseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "pbseg/config.hpp"

namespace pbseg {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'S', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  }

  bool at_eof() { return in_.peek() == EOF; }

  void bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw std::runtime_error("checkpoint: " + path_ + ": truncated while reading " + what);
    }
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    bytes(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::vector<NamedParam>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);

  std::ostringstream config_text;
  for (const auto& [k, v] : model_config_entries(cfg)) config_text << k << "=" << v << "\n";
  const std::string cfg_str = config_text.str();
  put_u32(out, static_cast<std::uint32_t>(cfg_str.size()));
  out.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));

  for (const NamedParam& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) put_u64(out, e);
    for (double v : p.tensor.values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

CheckpointData load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: " + path + ": bad magic, not a PBSG file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: " + path + ": unsupported format version " + std::to_string(version));
  }
  const std::uint32_t cfg_len = r.u32("config length");
  std::string cfg_str(cfg_len, '\0');
  r.bytes(cfg_str.data(), cfg_len, "config block");

  CheckpointData ckpt;
  std::istringstream cfg_in(cfg_str);
  std::string line;
  while (std::getline(cfg_in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: " + path + ": malformed config line '" + line + "'");
    apply_model_key(ckpt.config, line.substr(0, eq), line.substr(eq + 1));
  }

  while (!r.at_eof()) {
    const std::uint32_t name_len = r.u32("parameter name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "parameter name");
    const std::uint32_t rank = r.u32("parameter rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<std::size_t>(r.u64("parameter extent"));
      numel *= shape[i];
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64("parameter data");
    ckpt.params.push_back({name, Tensor(shape, std::move(data))});
  }
  return ckpt;
}

void load_params(PBSegModel& model, const CheckpointData& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedParam& p : ckpt.params) by_name[p.name] = &p.tensor;
  for (NamedParam& p : model.params()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                               ", model expects " + shape_str(p.tensor.shape()));
    }
    p.tensor.values() = it->second->values();
  }
}

}  // namespace pbseg
