#include "looplab/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "looplab/errors.hpp"
#include "looplab/format.hpp"

namespace looplab {

namespace {

constexpr const char* kMagic = "looplab-net";
constexpr int kVersion = 1;

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double get_f64(const std::string& in, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw FormatError("net file: bad " + what + " '" + text + "'");
  }
  if (used != text.size() || text.empty() || text[0] == '-')
    throw FormatError("net file: bad " + what + " '" + text + "'");
  return static_cast<std::size_t>(v);
}

std::size_t next_line(const std::string& in, std::size_t pos, std::string& line) {
  const std::size_t nl = in.find('\n', pos);
  if (nl == std::string::npos) throw FormatError("net file: truncated header");
  line = in.substr(pos, nl - pos);
  return nl + 1;
}

}  // namespace

const Matrix* TensorFile::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string encode_tensor_file(const TensorFile& file) {
  const NetConfig& c = file.config;
  std::string out = std::string(kMagic) + " v" + std::to_string(kVersion) + " d=" + std::to_string(c.d) +
                    " L=" + std::to_string(c.L) + " recall=" + std::string(to_string(c.recall)) +
                    " norm=" + std::string(to_string(c.norm)) + " mlp_hidden=" + std::to_string(c.mlp_hidden) +
                    " mix_bandwidth=" + (c.mix_bandwidth ? std::to_string(*c.mix_bandwidth) : "full") +
                    " mix_heads=" + std::to_string(c.mix_heads) + " eps=" + fmt17(file.eps) +
                    " tensors=" + std::to_string(file.tensors.size()) + "\n";
  for (const auto& [name, m] : file.tensors) {
    if (name.empty() || name.find_first_of(" \n\t") != std::string::npos)
      throw FormatError("net file: tensor name '" + name + "' contains whitespace");
    out += name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    for (double v : m.data()) put_f64(out, v);
  }
  return out;
}

TensorFile decode_tensor_file(const std::string& bytes) {
  std::string header;
  std::size_t pos = next_line(bytes, 0, header);
  std::istringstream hs(header);
  std::string magic, version, field;
  hs >> magic >> version;
  if (magic != kMagic) throw FormatError("net file: bad magic");
  if (version != "v" + std::to_string(kVersion)) throw FormatError("net file: unsupported version " + version);
  std::map<std::string, std::string> kv;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("net file: bad header field '" + field + "'");
    kv[field.substr(0, eq)] = field.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("net file: header lacks " + key);
    return it->second;
  };

  TensorFile file;
  NetConfig& c = file.config;
  c.d = parse_size(need("d"), "d");
  c.L = parse_size(need("L"), "L");
  try {
    c.recall = parse_recall_mode(need("recall"));
    c.norm = parse_norm_mode(need("norm"));
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("net file: ") + e.what());
  }
  c.mlp_hidden = parse_size(need("mlp_hidden"), "mlp_hidden");
  const std::string& bw = need("mix_bandwidth");
  c.mix_bandwidth = bw == "full" ? std::nullopt : std::optional<std::size_t>(parse_size(bw, "mix_bandwidth"));
  c.mix_heads = parse_size(need("mix_heads"), "mix_heads");
  try {
    std::size_t used = 0;
    file.eps = std::stod(need("eps"), &used);
  } catch (const std::exception&) {
    throw FormatError("net file: bad eps");
  }
  const std::size_t count = parse_size(need("tensors"), "tensors");

  for (std::size_t t = 0; t < count; ++t) {
    std::string line;
    pos = next_line(bytes, pos, line);
    std::istringstream ls(line);
    std::string name, rows_s, cols_s, extra;
    if (!(ls >> name >> rows_s >> cols_s) || (ls >> extra)) throw FormatError("net file: bad tensor line");
    const std::size_t rows = parse_size(rows_s, "rows"), cols = parse_size(cols_s, "cols");
    const std::size_t n = rows * cols;
    if (bytes.size() - pos < 8 * n) throw FormatError("net file: truncated tensor " + name);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(bytes, pos + 8 * i);
    pos += 8 * n;
    try {
      file.tensors.emplace_back(name, Matrix(rows, cols, std::move(data)));
    } catch (const Error& e) {
      throw FormatError("net file: tensor " + name + ": " + e.what());
    }
  }
  if (pos != bytes.size()) throw FormatError("net file: trailing bytes");
  return file;
}

TensorFile to_tensor_file(const LoopedNet& net) {
  TensorFile file;
  file.config = net.config();
  file.eps = net.params().eps;
  for (const auto& [name, m] : net.params().named_tensors()) file.tensors.emplace_back(name, *m);
  return file;
}

LoopedNet net_from_tensor_file(const TensorFile& file) {
  try {
    file.config.validate();
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("net file: ") + e.what());
  }
  NetParams p = LoopedNet::zero_params(file.config);
  p.eps = file.eps;
  for (auto& [name, m] : p.named_tensors()) {
    const Matrix* src = file.find(name);
    if (src == nullptr) throw FormatError("net file: missing tensor " + name);
    if (src->rows() != m->rows() || src->cols() != m->cols())
      throw FormatError("net file: tensor " + name + " has the wrong shape");
    *m = *src;
  }
  return LoopedNet(file.config, std::move(p));
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw Error("write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw Error("cannot rename " + tmp + " to " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_net(const std::string& path, const LoopedNet& net) {
  write_file_atomic(path, encode_tensor_file(to_tensor_file(net)));
}

LoopedNet load_net(const std::string& path) { return net_from_tensor_file(decode_tensor_file(read_file(path))); }

}  // namespace looplab
