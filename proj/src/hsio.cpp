#include "latref/hsio.hpp"

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "json.hpp"
#include "latref/errors.hpp"
#include "latref/kernels.hpp"

namespace latref::hsio {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'R', 'H', 'S'};
constexpr std::size_t kMaxDims = 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | static_cast<std::uint32_t>(b[off + 1]) << 8 |
         static_cast<std::uint32_t>(b[off + 2]) << 16 | static_cast<std::uint32_t>(b[off + 3]) << 24;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write tensor file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace

std::size_t element_size(DType dtype) { return dtype == DType::F16 ? 2 : 4; }

const char* dtype_name(DType dtype) { return dtype == DType::F16 ? "float16" : "float32"; }

std::size_t TensorHeader::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::uint16_t float_to_half(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

float half_to_float(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor, DType dtype) {
  TensorHeader header{kFormatVersion, dtype, tensor.dims};
  if (tensor.dims.empty() || tensor.dims.size() > kMaxDims) {
    throw FormatError("tensor rank must lie in [1, " + std::to_string(kMaxDims) + "]");
  }
  if (header.element_count() != tensor.values.size()) {
    throw ShapeError("tensor dims do not match value count");
  }
  std::vector<std::uint8_t> out;
  out.reserve(header.header_bytes() + header.payload_bytes());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_u32(out, d);
  for (double v : tensor.values) {
    if (dtype == DType::F32) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      const std::uint16_t h = float_to_half(static_cast<float>(v));
      out.push_back(static_cast<std::uint8_t>(h & 0xff));
      out.push_back(static_cast<std::uint8_t>(h >> 8));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_matrix(const Matrix& m, DType dtype) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.values.assign(m.data().begin(), m.data().end());
  return encode_tensor(t, dtype);
}

TensorHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10) throw FormatError("tensor header truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected LRHS");
  TensorHeader h;
  h.version = get_u32(bytes, 4);
  if (h.version != kFormatVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(h.version));
  }
  const std::uint8_t dtype = bytes[8];
  if (dtype > 1) throw FormatError("unknown dtype byte " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  const std::size_t ndim = bytes[9];
  if (ndim == 0 || ndim > kMaxDims) throw FormatError("invalid ndim " + std::to_string(ndim));
  if (bytes.size() < 10 + 4 * ndim) throw FormatError("tensor dims truncated");
  for (std::size_t i = 0; i < ndim; ++i) h.dims.push_back(get_u32(bytes, 10 + 4 * i));
  return h;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  const TensorHeader h = decode_header(bytes);
  const std::size_t expected = h.header_bytes() + h.payload_bytes();
  if (bytes.size() < expected) {
    throw CorruptionError("tensor payload truncated: " + std::to_string(bytes.size()) + " of " +
                          std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) throw CorruptionError("trailing bytes after tensor payload");

  Tensor t;
  t.dims = h.dims;
  const std::size_t n = h.element_count();
  t.values.resize(n);
  std::size_t off = h.header_bytes();
  if (h.dtype == DType::F32) {
    for (std::size_t i = 0; i < n; ++i, off += 4)
      t.values[i] = std::bit_cast<float>(get_u32(bytes, off));
  } else {
    for (std::size_t i = 0; i < n; ++i, off += 2) {
      const auto bits = static_cast<std::uint16_t>(bytes[off] | bytes[off + 1] << 8);
      t.values[i] = half_to_float(bits);
    }
  }
  return t;
}

Matrix decode_matrix(std::span<const std::uint8_t> bytes) {
  Tensor t = decode_tensor(bytes);
  if (t.dims.size() == 1) return Matrix(1, t.dims[0], std::move(t.values));
  if (t.dims.size() != 2) {
    throw FormatError("expected a 2-D tensor, got ndim " + std::to_string(t.dims.size()));
  }
  return Matrix(t.dims[0], t.dims[1], std::move(t.values));
}

void write_tensor(const fs::path& path, const Tensor& tensor, DType dtype) {
  write_file(path, encode_tensor(tensor, dtype));
}

void write_tensor(const fs::path& path, const Matrix& m, DType dtype) {
  write_file(path, encode_matrix(m, dtype));
}

TensorHeader read_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor file " + path.string());
  std::vector<std::uint8_t> head(10 + 4 * kMaxDims);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  return decode_header(head);
}

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

Matrix read_matrix(const fs::path& path) { return decode_matrix(read_file(path)); }

SanitizeStats& SanitizeStats::operator+=(const SanitizeStats& o) {
  nan += o.nan;
  pos_inf += o.pos_inf;
  neg_inf += o.neg_inf;
  return *this;
}

Matrix sanitize(const Matrix& h, const SanitizeConfig& cfg, SanitizeStats* stats) {
  if (!(cfg.clamp > 0.0) || !std::isfinite(cfg.clamp)) {
    throw ConfigError("sanitize clamp constant must be positive and finite");
  }
  Matrix out = h;
  SanitizeStats local;
  for (double& v : out.data()) {
    if (std::isnan(v)) {
      v = 0.0;
      ++local.nan;
    } else if (std::isinf(v)) {
      if (v > 0) {
        v = cfg.clamp;
        ++local.pos_inf;
      } else {
        v = -cfg.clamp;
        ++local.neg_inf;
      }
    }
  }
  if (stats) *stats += local;
  return out;
}

Matrix token_normalize(const Matrix& h) {
  const std::vector<double> gain(h.cols(), 1.0);
  const std::vector<double> bias(h.cols(), 0.0);
  return kernels::layer_norm_rows(h, gain, bias, kTokenNormEps);
}

std::size_t resolve_layer_index(long index, std::size_t stack_size) {
  const long n = static_cast<long>(stack_size);
  if (index < -n || index >= n) {
    throw IndexError("layer index " + std::to_string(index) + " out of range for a stack of " +
                     std::to_string(stack_size));
  }
  return static_cast<std::size_t>(index < 0 ? n + index : index);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "'");
}

std::string to_json_line(const LabeledExample& e) {
  json j{{"id", e.id},
         {"tensor_path", e.tensor_path},
         {"label", e.label},
         {"split", to_string(e.split)},
         {"domain", e.domain},
         {"num_tokens", e.num_tokens},
         {"layer_index", e.layer_index},
         {"schema_id", e.schema_id},
         {"question_id", e.question_id}};
  return j.dump();
}

LabeledExample parse_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& err) {
    throw DataError(std::string("manifest line is not valid JSON: ") + err.what());
  }
  LabeledExample e;
  try {
    e.id = j.at("id").get<std::string>();
    e.tensor_path = j.at("tensor_path").get<std::string>();
    e.label = j.at("label").get<int>();
    e.split = parse_split(j.at("split").get<std::string>());
    e.domain = j.value("domain", std::string{});
    e.num_tokens = j.at("num_tokens").get<std::size_t>();
    e.layer_index = j.value("layer_index", -1L);
    e.schema_id = j.value("schema_id", std::string{});
    e.question_id = j.value("question_id", std::string{});
  } catch (const json::exception& err) {
    throw DataError(std::string("malformed manifest entry: ") + err.what());
  }
  if (e.label != 0 && e.label != 1) {
    throw DataError("example " + e.id + ": label " + std::to_string(e.label) + " is not 0 or 1");
  }
  return e;
}

std::vector<LabeledExample> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<LabeledExample> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    entries.push_back(parse_json_line(line));
  }
  return entries;
}

void write_manifest(const fs::path& path, std::span<const LabeledExample> entries) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) out << to_json_line(e) << '\n';
}

std::size_t Dataset::count_label(int label) const {
  std::size_t n = 0;
  for (const auto& e : examples) n += e.label == label;
  return n;
}

Dataset load_dataset(const fs::path& manifest, Split split, const LoadOptions& options) {
  const fs::path base = manifest.parent_path();
  Dataset ds;
  for (const LabeledExample& entry : read_manifest(manifest)) {
    if (entry.split != split) continue;
    if (options.layer_index && entry.layer_index != *options.layer_index) continue;
    if (options.domain && entry.domain != *options.domain) continue;

    fs::path tensor_path(entry.tensor_path);
    if (tensor_path.is_relative()) tensor_path = base / tensor_path;
    if (!fs::exists(tensor_path)) {
      throw DataError("example " + entry.id + ": tensor file " + tensor_path.string() + " is missing");
    }
    Matrix raw = read_matrix(tensor_path);
    if (raw.rows() != entry.num_tokens) {
      throw DataError("example " + entry.id + ": num_tokens=" + std::to_string(entry.num_tokens) +
                      " but tensor first dim is " + std::to_string(raw.rows()));
    }
    Example ex;
    ex.id = entry.id;
    ex.h_safe = token_normalize(sanitize(raw, options.sanitize, &ds.sanitize_stats));
    ex.pad_mask.assign(raw.rows(), 0);
    ex.label = entry.label;
    ex.domain = entry.domain;
    ex.layer_index = entry.layer_index;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace latref::hsio
