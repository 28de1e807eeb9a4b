#include "residual_lens/trace_io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>

#include "residual_lens/error.hpp"

namespace residual_lens {

namespace {

using json = nlohmann::ordered_json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

std::size_t offset_count(std::uint32_t layers) { return 2 * static_cast<std::size_t>(layers) + 1; }

std::size_t hidden_bytes(const TraceMeta& m) { return std::size_t{4} * m.tokens * m.dim; }

std::size_t attention_bytes(const TraceMeta& m) {
  return std::size_t{4} * m.heads * m.tokens * m.tokens;
}

void check_attention_layer(std::span<const float> w, const TraceMeta& m, std::size_t layer, bool exact_causal,
                           std::size_t* adjusted) {
  const std::size_t t = m.tokens;
  std::size_t count = 0;
  for (std::size_t h = 0; h < m.heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      const float* row = w.data() + (h * t + i) * t;
      bool repaired = false;
      double sum = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const double v = row[j];
        if (!std::isfinite(v)) {
          throw Error(ErrorKind::InvariantViolation, "non-finite attention weight in layer " + std::to_string(layer));
        }
        if (j > i) {
          if (exact_causal ? v != 0.0 : std::abs(v) > kCausalTolerance) {
            throw Error(ErrorKind::InvariantViolation,
                        "attention in layer " + std::to_string(layer) + " is not causal");
          }
          if (v != 0.0) repaired = true;
        } else {
          sum += v;
        }
      }
      if (std::abs(sum - 1.0) > kRowSumTolerance) {
        throw Error(ErrorKind::InvariantViolation, "attention row " + std::to_string(i) + " of head " +
                                                       std::to_string(h) + " in layer " + std::to_string(layer) +
                                                       " sums to " + std::to_string(sum));
      }
      if (std::abs(sum - 1.0) > kRenormLogThreshold) repaired = true;
      if (repaired) ++count;
    }
  }
  if (adjusted) *adjusted = count;
}

}  // namespace

RepMatrix Trace::hidden_matrix(std::size_t layer) const {
  if (layer >= hidden.size()) throw Error(ErrorKind::LayerOutOfRange, "hidden layer " + std::to_string(layer));
  const auto& h = hidden[layer];
  return RepMatrix(meta.tokens, meta.dim, std::vector<double>(h.begin(), h.end()));
}

AttnTensor Trace::attention_tensor(std::size_t layer) const {
  if (layer == 0 || layer > attention.size()) {
    throw Error(ErrorKind::LayerOutOfRange, "attention layer " + std::to_string(layer));
  }
  const auto& a = attention[layer - 1];
  return AttnTensor(meta.heads, meta.tokens, std::vector<double>(a.begin(), a.end()));
}

void validate_trace(const Trace& trace) {
  const TraceMeta& m = trace.meta;
  const auto fail = [](const std::string& why) { throw Error(ErrorKind::InvariantViolation, why); };
  if (m.tokens == 0 || m.dim == 0) fail("trace needs T >= 1 and d >= 1");
  if (m.has_attention && m.heads == 0) fail("attention present but H = 0");
  if (trace.hidden.size() != std::size_t{m.layers} + 1) fail("trace must hold L + 1 hidden matrices");
  const std::size_t hidden_n = std::size_t{m.tokens} * m.dim;
  for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
    if (trace.hidden[l].size() != hidden_n) fail("hidden layer " + std::to_string(l) + " does not match T x d");
    for (float v : trace.hidden[l])
      if (!std::isfinite(v)) fail("hidden layer " + std::to_string(l) + " has a non-finite entry");
  }
  if (!m.has_attention) {
    if (!trace.attention.empty()) fail("attention tensors present but has_attention is unset");
    return;
  }
  if (trace.attention.size() != m.layers) fail("trace must hold L attention tensors");
  const std::size_t attn_n = std::size_t{m.heads} * m.tokens * m.tokens;
  for (std::size_t l = 0; l < trace.attention.size(); ++l) {
    if (trace.attention[l].size() != attn_n) fail("attention layer " + std::to_string(l + 1) + " does not match H x T x T");
    check_attention_layer(trace.attention[l], m, l + 1, /*exact_causal=*/true, nullptr);
  }
}

std::size_t rstf_size(const TraceMeta& meta) {
  std::size_t n = kRstfFixedHeaderBytes + 8 * offset_count(meta.layers);
  n += (std::size_t{meta.layers} + 1) * hidden_bytes(meta);
  if (meta.has_attention) n += std::size_t{meta.layers} * attention_bytes(meta);
  return n;
}

std::vector<std::uint8_t> encode_trace(const Trace& trace) {
  validate_trace(trace);
  const TraceMeta& m = trace.meta;
  std::vector<std::uint8_t> out;
  out.reserve(rstf_size(m));
  out.insert(out.end(), {'R', 'S', 'T', 'F'});
  put_u32(out, kRstfVersion);
  put_u32(out, m.layers);
  put_u32(out, m.tokens);
  put_u32(out, m.dim);
  put_u32(out, m.heads);
  out.push_back(m.has_attention ? 1 : 0);
  out.insert(out.end(), {0, 0, 0});

  std::uint64_t cursor = kRstfFixedHeaderBytes + 8 * offset_count(m.layers);
  for (std::size_t l = 0; l <= m.layers; ++l) {
    put_u64(out, cursor);
    cursor += hidden_bytes(m);
  }
  for (std::size_t l = 0; l < m.layers; ++l) {
    if (m.has_attention) {
      put_u64(out, cursor);
      cursor += attention_bytes(m);
    } else {
      put_u64(out, 0);
    }
  }
  for (const auto& h : trace.hidden) put_floats(out, h);
  for (const auto& a : trace.attention) put_floats(out, a);
  return out;
}

std::size_t MemorySource::read_at(std::uint64_t offset, std::span<std::uint8_t> out) {
  if (offset >= bytes_.size()) return 0;
  const std::size_t n = std::min<std::size_t>(out.size(), bytes_.size() - offset);
  std::memcpy(out.data(), bytes_.data() + offset, n);
  return n;
}

namespace {

class FileSource final : public ByteSource {
 public:
  explicit FileSource(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    in_.seekg(0, std::ios::end);
    size_ = static_cast<std::uint64_t>(in_.tellg());
  }
  std::uint64_t size() const override { return size_; }
  std::size_t read_at(std::uint64_t offset, std::span<std::uint8_t> out) override {
    if (offset >= size_) return 0;
    std::lock_guard lock(mu_);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(offset));
    in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    return static_cast<std::size_t>(in_.gcount());
  }

 private:
  std::mutex mu_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
};

}  // namespace

std::unique_ptr<ByteSource> open_file_source(const std::filesystem::path& path) {
  return std::make_unique<FileSource>(path);
}

TraceReader::TraceReader(std::unique_ptr<ByteSource> source) : source_(std::move(source)) {
  std::uint8_t head[kRstfFixedHeaderBytes];
  const std::size_t got = source_->read_at(0, head);
  if (got < 4 || std::memcmp(head, "RSTF", 4) != 0) throw Error(ErrorKind::BadMagic, "stream does not start with RSTF");
  if (got < kRstfFixedHeaderBytes) throw Error(ErrorKind::Truncated, "header is incomplete");
  const std::uint32_t version = get_u32(head + 4);
  if (version != kRstfVersion) {
    throw Error(ErrorKind::UnsupportedVersion, "RSTF version " + std::to_string(version));
  }
  meta_.layers = get_u32(head + 8);
  meta_.tokens = get_u32(head + 12);
  meta_.dim = get_u32(head + 16);
  meta_.heads = get_u32(head + 20);
  const std::uint8_t flags = head[24];
  meta_.has_attention = (flags & 1u) != 0;
  if ((flags & ~1u) != 0) throw Error(ErrorKind::DimMismatch, "unknown flag bits set");
  if (meta_.tokens == 0 || meta_.dim == 0 || (meta_.has_attention && meta_.heads == 0)) {
    throw Error(ErrorKind::DimMismatch, "zero dimension in header");
  }

  const std::size_t n_off = offset_count(meta_.layers);
  const std::uint64_t table_end = kRstfFixedHeaderBytes + 8 * static_cast<std::uint64_t>(n_off);
  if (table_end > source_->size()) throw Error(ErrorKind::Truncated, "offset table is incomplete");
  std::vector<std::uint8_t> table(8 * n_off);
  if (source_->read_at(kRstfFixedHeaderBytes, table) != table.size()) {
    throw Error(ErrorKind::Truncated, "offset table is incomplete");
  }
  offsets_.resize(n_off);
  for (std::size_t k = 0; k < n_off; ++k) offsets_[k] = get_u64(table.data() + 8 * k);

  const auto check_section = [&](std::uint64_t off, std::uint64_t len, const char* what, std::size_t l) {
    if (off < table_end) throw Error(ErrorKind::DimMismatch, std::string(what) + " section overlaps the header");
    if (off + len > source_->size()) {
      throw Error(ErrorKind::Truncated, std::string(what) + " section of layer " + std::to_string(l) +
                                            " extends past the end of the stream");
    }
  };
  for (std::size_t l = 0; l <= meta_.layers; ++l) check_section(offsets_[l], hidden_bytes(meta_), "hidden", l);
  for (std::size_t l = 1; l <= meta_.layers; ++l) {
    const std::uint64_t off = offsets_[meta_.layers + l];
    if (meta_.has_attention) {
      check_section(off, attention_bytes(meta_), "attention", l);
    } else if (off != 0) {
      throw Error(ErrorKind::DimMismatch, "attention offset set without the attention flag");
    }
  }
}

std::vector<float> TraceReader::read_section(std::uint64_t offset, std::size_t count) const {
  std::vector<std::uint8_t> raw(4 * count);
  if (source_->read_at(offset, raw) != raw.size()) throw Error(ErrorKind::Truncated, "section read came up short");
  std::vector<float> out(count);
  for (std::size_t k = 0; k < count; ++k) out[k] = std::bit_cast<float>(get_u32(raw.data() + 4 * k));
  return out;
}

std::vector<float> TraceReader::hidden(std::size_t layer) const {
  if (layer > meta_.layers) throw Error(ErrorKind::LayerOutOfRange, "hidden layer " + std::to_string(layer));
  std::vector<float> h = read_section(offsets_[layer], std::size_t{meta_.tokens} * meta_.dim);
  for (float v : h) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::InvariantViolation, "hidden layer " + std::to_string(layer) + " has a non-finite entry");
    }
  }
  return h;
}

std::vector<float> TraceReader::attention(std::size_t layer, std::size_t* adjusted_rows) const {
  if (!meta_.has_attention) throw Error(ErrorKind::LayerOutOfRange, "trace stores no attention");
  if (layer == 0 || layer > meta_.layers) {
    throw Error(ErrorKind::LayerOutOfRange, "attention layer " + std::to_string(layer));
  }
  std::vector<float> a =
      read_section(offsets_[meta_.layers + layer], std::size_t{meta_.heads} * meta_.tokens * meta_.tokens);
  check_attention_layer(a, meta_, layer, /*exact_causal=*/false, adjusted_rows);
  return a;
}

ReadResult read_trace(std::unique_ptr<ByteSource> source) {
  TraceReader reader(std::move(source));
  ReadResult res;
  res.trace.meta = reader.meta();
  const std::uint32_t L = reader.meta().layers;
  res.trace.hidden.reserve(L + 1);
  for (std::size_t l = 0; l <= L; ++l) res.trace.hidden.push_back(reader.hidden(l));
  if (reader.meta().has_attention) {
    res.trace.attention.reserve(L);
    res.attention_adjusted_rows.resize(L);
    for (std::size_t l = 1; l <= L; ++l) {
      res.trace.attention.push_back(reader.attention(l, &res.attention_adjusted_rows[l - 1]));
    }
  }
  return res;
}

std::filesystem::path sidecar_path(const std::filesystem::path& trace_path) {
  std::filesystem::path p = trace_path;
  p.replace_extension(".meta.json");
  return p;
}

std::string sidecar_json(const TraceMeta& meta) {
  json j;
  j["model_name"] = meta.model_name;
  j["prompt"] = meta.prompt_text ? json(*meta.prompt_text) : json(nullptr);
  j["tokens"] = meta.token_strings ? json(*meta.token_strings) : json(nullptr);
  j["created_unix_s"] = meta.created_unix_s ? json(*meta.created_unix_s) : json(nullptr);
  return j.dump(2) + "\n";
}

void merge_sidecar_json(const std::string& text, TraceMeta& meta) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::IoFailure, std::string("malformed sidecar: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::IoFailure, "sidecar is not a JSON object");
  try {
    if (j.contains("model_name") && j["model_name"].is_string()) meta.model_name = j["model_name"];
    if (j.contains("prompt") && j["prompt"].is_string()) meta.prompt_text = j["prompt"].get<std::string>();
    if (j.contains("tokens") && j["tokens"].is_array()) {
      meta.token_strings = j["tokens"].get<std::vector<std::string>>();
    }
    if (j.contains("created_unix_s") && j["created_unix_s"].is_number_integer()) {
      meta.created_unix_s = j["created_unix_s"].get<std::int64_t>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::IoFailure, std::string("malformed sidecar: ") + e.what());
  }
}

ReadResult read_trace(const std::filesystem::path& path) {
  ReadResult res = read_trace(open_file_source(path));
  const auto side = sidecar_path(path);
  std::ifstream in(side);
  if (in) {
    std::stringstream ss;
    ss << in.rdbuf();
    merge_sidecar_json(ss.str(), res.trace.meta);
  }
  return res;
}

std::size_t write_trace(const Trace& trace, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_trace(trace);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoFailure, "write to " + path.string() + " failed");
  }
  TraceMeta meta = trace.meta;
  if (!meta.created_unix_s) {
    meta.created_unix_s =
        std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  }
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw Error(ErrorKind::IoFailure, "cannot write sidecar for " + path.string());
  side << sidecar_json(meta);
  if (!side) throw Error(ErrorKind::IoFailure, "sidecar write failed for " + path.string());
  return bytes.size();
}

}  // namespace residual_lens
