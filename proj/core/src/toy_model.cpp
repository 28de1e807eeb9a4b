#include "residual_lens/toy_model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "residual_lens/error.hpp"
#include "residual_lens/random.hpp"

namespace residual_lens {

namespace {

using json = nlohmann::ordered_json;

constexpr double kRmsEps = 1e-6;
constexpr double kRotaryBase = 10000.0;

std::vector<double> uniform_weights(Rng& rng, std::size_t n, double scale) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-scale, scale);
  return w;
}

// out (rows x n) = in (rows x m) * w (m x n)
std::vector<double> matmul(std::span<const double> in, std::size_t rows, std::size_t m, std::span<const double> w,
                           std::size_t n) {
  std::vector<double> out(rows * n, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t k = 0; k < m; ++k) {
      const double a = in[i * m + k];
      const double* wr = w.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += a * wr[j];
    }
  }
  return out;
}

std::vector<double> rms_norm(std::span<const double> x, std::size_t rows, std::size_t d) {
  std::vector<double> out(rows * d);
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += x[i * d + k] * x[i * d + k];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = x[i * d + k] * inv;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void apply_rotary(std::vector<double>& qk, std::size_t rows, std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* v = qk.data() + pos * d + h * dh;
      for (std::size_t k = 0; k + 1 < dh; k += 2) {
        const double freq = std::pow(kRotaryBase, -static_cast<double>(k) / static_cast<double>(dh));
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = v[k], b = v[k + 1];
        v[k] = a * c - b * s;
        v[k + 1] = a * s + b * c;
      }
    }
  }
}

void fnv_mix(std::uint64_t& h, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  }
}

}  // namespace

void validate_config(const ToyModelConfig& c) {
  const auto bad = [](const std::string& why) { throw Error(ErrorKind::BadConfig, why); };
  if (c.layers < 1) bad("layers must be >= 1");
  if (c.hidden_dim < 1) bad("hidden_dim must be >= 1");
  if (c.heads < 1) bad("heads must be >= 1");
  if (c.hidden_dim % c.heads != 0) {
    bad("hidden_dim " + std::to_string(c.hidden_dim) + " is not divisible by heads " + std::to_string(c.heads));
  }
  if (c.positional == Positional::Rotary && (c.hidden_dim / c.heads) % 2 != 0) {
    bad("rotary positions need an even head dimension");
  }
  if (c.ff_dim < 1) bad("ff_dim must be >= 1");
  if (c.vocab < 2) bad("vocab must be >= 2");
  if (c.max_tokens < 1) bad("max_tokens must be >= 1");
}

ToyModelConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::BadConfig, "config must be a JSON object");
  ToyModelConfig c;
  const auto read_count = [&](const char* key, std::size_t& out) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw Error(ErrorKind::BadConfig, std::string(key) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  };
  read_count("layers", c.layers);
  read_count("hidden_dim", c.hidden_dim);
  read_count("heads", c.heads);
  read_count("ff_dim", c.ff_dim);
  read_count("vocab", c.vocab);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer()) throw Error(ErrorKind::BadConfig, "seed must be an integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("positional")) {
    const auto& p = j["positional"];
    if (p == "rotary") {
      c.positional = Positional::Rotary;
    } else if (p == "none") {
      c.positional = Positional::None;
    } else {
      throw Error(ErrorKind::BadConfig, "positional must be \"rotary\" or \"none\"");
    }
  }
  validate_config(c);
  return c;
}

ToyModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const ToyModelConfig& c) {
  json j;
  j["layers"] = c.layers;
  j["hidden_dim"] = c.hidden_dim;
  j["heads"] = c.heads;
  j["ff_dim"] = c.ff_dim;
  j["vocab"] = c.vocab;
  j["positional"] = c.positional == Positional::Rotary ? "rotary" : "none";
  j["seed"] = c.seed;
  return j.dump(2);
}

Intervention Intervention::mlp_ablate(std::set<std::size_t> layers, std::size_t token) {
  Intervention iv;
  iv.kind = Kind::MlpAblate;
  iv.layers = std::move(layers);
  iv.token = token;
  return iv;
}

Intervention Intervention::inject_massive(std::size_t layer, double magnitude, std::uint64_t dir_seed,
                                          std::size_t token) {
  Intervention iv;
  iv.kind = Kind::InjectMassive;
  iv.layers = {layer};
  iv.magnitude = magnitude;
  iv.dir_seed = dir_seed;
  iv.token = token;
  return iv;
}

std::vector<double> injection_direction(std::uint64_t dir_seed, std::size_t dim) {
  // Offset keeps the direction stream distinct from weight streams sharing a seed.
  Rng rng(dir_seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<double> u(dim);
  rng.unit_vector(u);
  return u;
}

ToyModel::ToyModel(const ToyModelConfig& config) : config_(config) {
  validate_config(config_);
  const std::size_t d = config_.hidden_dim;
  const std::size_t ff = config_.ff_dim;
  Rng rng(config_.seed);
  // Projections are uniform with scale 1/sqrt(fan_in); the two projections
  // writing into the residual stream are further damped by 1/sqrt(2L).
  // Embeddings are unit scale so untrained updates do not swamp token identity.
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sff = 1.0 / std::sqrt(static_cast<double>(ff));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.layers));
  embedding_ = uniform_weights(rng, config_.vocab * d, 1.0);
  blocks_.reserve(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Block b;
    b.wq = uniform_weights(rng, d * d, sd);
    b.wk = uniform_weights(rng, d * d, sd);
    b.wv = uniform_weights(rng, d * d, sd);
    b.wo = uniform_weights(rng, d * d, sd * out_scale);
    b.w_up = uniform_weights(rng, d * ff, sd);
    b.w_down = uniform_weights(rng, ff * d, sff * out_scale);
    blocks_.push_back(std::move(b));
  }
}

std::uint64_t ToyModel::weight_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  fnv_mix(h, embedding_);
  for (const Block& b : blocks_) {
    for (const auto* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down}) fnv_mix(h, *w);
  }
  return h;
}

Trace ToyModel::forward(std::span<const std::size_t> tokens, std::span<const Intervention> interventions) const {
  const std::size_t T = tokens.size();
  const std::size_t d = config_.hidden_dim;
  const std::size_t H = config_.heads;
  const std::size_t dh = d / H;
  const std::size_t ff = config_.ff_dim;
  const std::size_t L = config_.layers;
  if (T < 1 || T > config_.max_tokens) {
    throw Error(ErrorKind::InvalidArgument, "token count must lie in [1, " + std::to_string(config_.max_tokens) + "]");
  }
  for (std::size_t t : tokens) {
    if (t >= config_.vocab) throw Error(ErrorKind::TokenOutOfRange, "token id " + std::to_string(t));
  }
  for (const Intervention& iv : interventions) {
    for (std::size_t l : iv.layers) {
      if (l >= L) throw Error(ErrorKind::LayerOutOfRange, "intervention layer " + std::to_string(l));
    }
    if (iv.token >= T) throw Error(ErrorKind::TokenOutOfRange, "intervention token " + std::to_string(iv.token));
    if (iv.kind == Intervention::Kind::InjectMassive && !(iv.magnitude > 0.0 && std::isfinite(iv.magnitude))) {
      throw Error(ErrorKind::InvalidArgument, "injection magnitude must be positive");
    }
  }

  Trace trace;
  trace.meta.model_name = "toy-L" + std::to_string(L) + "-d" + std::to_string(d) + "-H" + std::to_string(H) +
                          "-seed" + std::to_string(config_.seed);
  std::vector<std::string> token_strings;
  for (std::size_t t : tokens) token_strings.push_back(std::to_string(t));
  trace.meta.token_strings = std::move(token_strings);
  trace.meta.layers = static_cast<std::uint32_t>(L);
  trace.meta.tokens = static_cast<std::uint32_t>(T);
  trace.meta.dim = static_cast<std::uint32_t>(d);
  trace.meta.heads = static_cast<std::uint32_t>(H);
  trace.meta.has_attention = true;

  std::vector<double> x(T * d);
  for (std::size_t i = 0; i < T; ++i) {
    std::copy_n(embedding_.begin() + static_cast<std::ptrdiff_t>(tokens[i] * d), d, x.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  trace.hidden.emplace_back(x.begin(), x.end());

  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < L; ++l) {
    const Block& b = blocks_[l];

    const std::vector<double> h1 = rms_norm(x, T, d);
    std::vector<double> q = matmul(h1, T, d, b.wq, d);
    std::vector<double> k = matmul(h1, T, d, b.wk, d);
    const std::vector<double> v = matmul(h1, T, d, b.wv, d);
    if (config_.positional == Positional::Rotary) {
      apply_rotary(q, T, d, H);
      apply_rotary(k, T, d, H);
    }

    std::vector<float> attn(H * T * T, 0.0f);
    std::vector<double> mixed(T * d, 0.0);
    std::vector<double> weights(T);
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = q.data() + i * d + hd * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = k.data() + j * d + hd * dh;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          weights[j] = s * score_scale;
          mx = std::max(mx, weights[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          weights[j] = std::exp(weights[j] - mx);
          z += weights[j];
        }
        double* out = mixed.data() + i * d + hd * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const double w = weights[j] / z;
          attn[(hd * T + i) * T + j] = static_cast<float>(w);
          const double* vj = v.data() + j * d + hd * dh;
          for (std::size_t e = 0; e < dh; ++e) out[e] += w * vj[e];
        }
      }
    }
    const std::vector<double> attn_out = matmul(mixed, T, d, b.wo, d);
    for (std::size_t n = 0; n < T * d; ++n) x[n] += attn_out[n];

    const std::vector<double> h2 = rms_norm(x, T, d);
    std::vector<double> up = matmul(h2, T, d, b.w_up, ff);
    for (double& u : up) u = gelu(u);
    std::vector<double> mlp = matmul(up, T, ff, b.w_down, d);
    for (const Intervention& iv : interventions) {
      if (iv.kind == Intervention::Kind::MlpAblate && iv.layers.contains(l)) {
        std::fill_n(mlp.begin() + static_cast<std::ptrdiff_t>(iv.token * d), d, 0.0);
      }
    }
    for (std::size_t n = 0; n < T * d; ++n) x[n] += mlp[n];

    for (const Intervention& iv : interventions) {
      if (iv.kind == Intervention::Kind::InjectMassive && iv.layers.contains(l)) {
        const std::vector<double> u = injection_direction(iv.dir_seed, d);
        for (std::size_t e = 0; e < d; ++e) x[iv.token * d + e] += iv.magnitude * u[e];
      }
    }

    trace.hidden.emplace_back(x.begin(), x.end());
    trace.attention.push_back(std::move(attn));
  }
  return trace;
}

}  // namespace residual_lens
