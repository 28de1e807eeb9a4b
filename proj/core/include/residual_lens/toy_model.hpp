#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "residual_lens/trace_io.hpp"

namespace residual_lens {

enum class Positional { Rotary, None };

struct ToyModelConfig {
  std::size_t layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t heads = 4;
  std::size_t ff_dim = 64;
  std::size_t vocab = 64;
  Positional positional = Positional::Rotary;
  std::uint64_t seed = 1;
  std::size_t max_tokens = 4096;
};

// Throws BadConfig.
void validate_config(const ToyModelConfig& config);

// JSON keys: layers, hidden_dim, heads, ff_dim, vocab, positional
// ("rotary" | "none"), seed. Missing keys keep their defaults. Throws BadConfig.
ToyModelConfig parse_config(const std::string& json_text);
ToyModelConfig load_config(const std::filesystem::path& path);
std::string config_json(const ToyModelConfig& config);

struct Intervention {
  enum class Kind { MlpAblate, InjectMassive };

  Kind kind = Kind::MlpAblate;
  std::set<std::size_t> layers;  // block indices, 0-based
  std::size_t token = 0;
  double magnitude = 0.0;        // InjectMassive only
  std::uint64_t dir_seed = 0;    // InjectMassive only

  static Intervention mlp_ablate(std::set<std::size_t> layers, std::size_t token = 0);
  static Intervention inject_massive(std::size_t layer, double magnitude, std::uint64_t dir_seed = 0,
                                     std::size_t token = 0);
};

// Unit direction used by InjectMassive for a given seed and width.
std::vector<double> injection_direction(std::uint64_t dir_seed, std::size_t dim);

// Pre-norm decoder-only transformer with causal softmax attention, optional
// rotary positions, and a two-layer GELU MLP. Weights are immutable after
// construction, so concurrent forward calls are safe.
//
// Block l maps hidden state l to hidden state l + 1:
//   h   = x + Attn(rms(x))
//   out = h + MLP(rms(h))          (MLP term zeroed for an ablated token)
//   out[token] += magnitude * u    (InjectMassive)
// The trace stores hidden states 0..L and the attention of block l as
// attention layer l + 1.
class ToyModel {
 public:
  explicit ToyModel(const ToyModelConfig& config);

  const ToyModelConfig& config() const noexcept { return config_; }

  // FNV-1a over the bit patterns of every weight, in a fixed order.
  std::uint64_t weight_checksum() const;

  // Throws TokenOutOfRange, LayerOutOfRange, InvalidArgument.
  Trace forward(std::span<const std::size_t> tokens, std::span<const Intervention> interventions = {}) const;

 private:
  struct Block {
    std::vector<double> wq, wk, wv, wo;  // d x d, input-major
    std::vector<double> w_up;            // d x ff
    std::vector<double> w_down;          // ff x d
  };

  ToyModelConfig config_;
  std::vector<double> embedding_;  // vocab x d
  std::vector<Block> blocks_;
};

}  // namespace residual_lens
