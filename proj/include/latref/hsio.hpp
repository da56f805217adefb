#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latref/matrix.hpp"
#include "latref/numerics.hpp"

// Hidden-state I/O: the LRHS tensor container, JSON-Lines manifests and the
// sanitize -> token-normalize load path.
//
// LRHS layout (all integers little-endian):
//   offset 0   char[4]  magic "LRHS"
//   offset 4   u32      version (= 1)
//   offset 8   u8       dtype (0 = float32, 1 = float16)
//   offset 9   u8       ndim
//   offset 10  u32[ndim] dims
//   then       row-major little-endian payload, element_size * prod(dims) bytes
namespace latref::hsio {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F16 = 1 };

std::size_t element_size(DType dtype);
const char* dtype_name(DType dtype);

struct TensorHeader {
  std::uint32_t version = kFormatVersion;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;

  std::size_t element_count() const;
  std::size_t header_bytes() const { return 10 + 4 * dims.size(); }
  std::size_t payload_bytes() const { return element_count() * element_size(dtype); }
};

// N-dimensional tensor; values are upcast to double on read.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor, DType dtype);
std::vector<std::uint8_t> encode_matrix(const Matrix& m, DType dtype = DType::F32);
TensorHeader decode_header(std::span<const std::uint8_t> bytes);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
// Accepts ndim 2 (rows x cols) or ndim 1 (read as a single row).
Matrix decode_matrix(std::span<const std::uint8_t> bytes);

void write_tensor(const fs::path& path, const Tensor& tensor, DType dtype = DType::F32);
void write_tensor(const fs::path& path, const Matrix& m, DType dtype = DType::F32);
TensorHeader read_header(const fs::path& path);
Tensor read_tensor(const fs::path& path);
Matrix read_matrix(const fs::path& path);

struct SanitizeConfig {
  double clamp = 1e4;  // M
};

struct SanitizeStats {
  std::size_t nan = 0;
  std::size_t pos_inf = 0;
  std::size_t neg_inf = 0;

  std::size_t total() const { return nan + pos_inf + neg_inf; }
  SanitizeStats& operator+=(const SanitizeStats& o);
};

// NaN -> 0, +inf -> M, -inf -> -M; finite values pass through untouched.
Matrix sanitize(const Matrix& h, const SanitizeConfig& cfg = {}, SanitizeStats* stats = nullptr);

// Per-token layer norm with unit gain and zero bias.
inline constexpr double kTokenNormEps = 1e-12;
Matrix token_normalize(const Matrix& h);

// Maps a signed layer index onto [0, stack_size). -1 is the last layer.
std::size_t resolve_layer_index(long index, std::size_t stack_size);

enum class Split { Train, Dev, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

// One manifest line. Field names are written verbatim to JSON.
struct LabeledExample {
  std::string id;
  std::string tensor_path;
  int label = 0;  // 1 = answerable
  Split split = Split::Train;
  std::string domain;
  std::size_t num_tokens = 0;
  long layer_index = -1;
  std::string schema_id;
  std::string question_id;
};

std::string to_json_line(const LabeledExample& e);
LabeledExample parse_json_line(const std::string& line);
std::vector<LabeledExample> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, std::span<const LabeledExample> entries);

struct Example {
  std::string id;
  Matrix h_safe;
  PadMask pad_mask;
  int label = 0;
  std::string domain;
  long layer_index = -1;
};

struct Dataset {
  std::vector<Example> examples;
  SanitizeStats sanitize_stats;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  std::size_t count_label(int label) const;
};

struct LoadOptions {
  SanitizeConfig sanitize;
  // Keep only entries whose stored layer_index equals this value.
  std::optional<long> layer_index;
  std::optional<std::string> domain;
};

// Reads every manifest entry of `split` in manifest order, sanitizes and
// token-normalizes each tensor. Relative tensor paths resolve against the
// manifest's directory.
Dataset load_dataset(const fs::path& manifest, Split split, const LoadOptions& options = {});

}  // namespace latref::hsio
