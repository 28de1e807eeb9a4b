#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "residual_lens/attn_metrics.hpp"
#include "residual_lens/linalg.hpp"

namespace residual_lens {

// RSTF v1 (little-endian):
//   "RSTF" | u32 version=1 | u32 L | u32 T | u32 d | u32 H | u8 flags | 3 pad
//   | (L+1) + L u64 section offsets (hidden[0..L], then attention[1..L])
//   | hidden[l]    = T*d binary32, row-major
//   | attention[l] = H*T*T binary32, head-major then row-major
// Flags bit0 = has_attention. Attention offsets are 0 when absent.
inline constexpr std::uint32_t kRstfVersion = 1;
inline constexpr std::size_t kRstfFixedHeaderBytes = 28;

struct TraceMeta {
  std::string model_name;
  std::optional<std::string> prompt_text;
  std::optional<std::vector<std::string>> token_strings;
  std::optional<std::int64_t> created_unix_s;
  std::uint32_t layers = 0;  // L; the trace holds L + 1 hidden matrices
  std::uint32_t tokens = 0;
  std::uint32_t dim = 0;
  std::uint32_t heads = 0;
  bool has_attention = false;
};

struct Trace {
  TraceMeta meta;
  std::vector<std::vector<float>> hidden;     // L + 1 entries, T*d each
  std::vector<std::vector<float>> attention;  // L entries for layers 1..L, H*T*T each; empty if absent

  // Upcast views used by the analysis code.
  RepMatrix hidden_matrix(std::size_t layer) const;
  AttnTensor attention_tensor(std::size_t layer) const;  // layer in 1..L
};

// Throws InvariantViolation describing the first broken invariant.
void validate_trace(const Trace& trace);

std::size_t rstf_size(const TraceMeta& meta);

// Serialized RSTF bytes (no sidecar). Validates first.
std::vector<std::uint8_t> encode_trace(const Trace& trace);

// Random-access byte source behind the reader.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::uint64_t size() const = 0;
  // Reads up to out.size() bytes at offset; returns the count actually read.
  virtual std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) = 0;
};

class MemorySource final : public ByteSource {
 public:
  explicit MemorySource(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  std::uint64_t size() const override { return bytes_.size(); }
  std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) override;

 private:
  std::vector<std::uint8_t> bytes_;
};

// Throws IoFailure when the file cannot be opened.
std::unique_ptr<ByteSource> open_file_source(const std::filesystem::path& path);

// Streaming reader: the constructor reads only the header and offset table;
// each accessor reads exactly one section.
class TraceReader {
 public:
  // Throws BadMagic, UnsupportedVersion, Truncated or DimMismatch.
  explicit TraceReader(std::unique_ptr<ByteSource> source);

  const TraceMeta& meta() const noexcept { return meta_; }

  // Throws LayerOutOfRange or Truncated.
  std::vector<float> hidden(std::size_t layer) const;

  // Layer in 1..L. Validates causality and row sums (InvariantViolation
  // beyond tolerance); rows that will be renormalized are counted in
  // *adjusted_rows when given.
  std::vector<float> attention(std::size_t layer, std::size_t* adjusted_rows = nullptr) const;

 private:
  std::vector<float> read_section(std::uint64_t offset, std::size_t count) const;

  std::unique_ptr<ByteSource> source_;
  TraceMeta meta_;
  std::vector<std::uint64_t> offsets_;
};

struct ReadResult {
  Trace trace;
  std::vector<std::size_t> attention_adjusted_rows;  // per attention layer
};

// Full read of an RSTF stream. Metadata from a sidecar is not merged here.
ReadResult read_trace(std::unique_ptr<ByteSource> source);

// Reads `path` and merges its sidecar when present. Throws IoFailure when the
// file is missing.
ReadResult read_trace(const std::filesystem::path& path);

// `run.rstf` -> `run.meta.json`.
std::filesystem::path sidecar_path(const std::filesystem::path& trace_path);

// Writes the trace and its sidecar; returns the RSTF byte count. Throws
// IoFailure or InvariantViolation.
std::size_t write_trace(const Trace& trace, const std::filesystem::path& path);

std::string sidecar_json(const TraceMeta& meta);
void merge_sidecar_json(const std::string& text, TraceMeta& meta);

}  // namespace residual_lens
