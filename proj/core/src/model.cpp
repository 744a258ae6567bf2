#include "lmkit/model.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "lmkit/rng.hpp"

namespace lmkit {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
  if (hidden_size == 0 || hidden_size % num_heads != 0)
    throw ConfigError("hidden_size must be a positive multiple of num_heads");
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
}

KVState KVState::truncated(std::size_t new_length) const {
  if (new_length > length)
    throw ContractError("KVState::truncated: new_length exceeds length");
  KVState out;
  out.length = new_length;
  out.layers.resize(layers.size());
  if (length == 0) return out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t stride = layers[l].keys.size() / length;
    out.layers[l].keys.assign(layers[l].keys.begin(),
                              layers[l].keys.begin() + new_length * stride);
    out.layers[l].values.assign(layers[l].values.begin(),
                                layers[l].values.begin() + new_length * stride);
  }
  return out;
}

std::size_t KVState::byte_size() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    n += (l.keys.size() + l.values.size()) * sizeof(float);
  return n;
}

namespace {

// Counter-based init: value depends only on (seed, tensor id, element index),
// so weights are reproducible across platforms without weight files.
float init_uniform(std::uint64_t seed, std::uint32_t tensor_id, std::uint64_t idx,
                   float scale) {
  const std::uint64_t stream = mix64(seed ^ (tensor_id + 1) * 0x9E3779B97F4A7C15ULL);
  const std::uint64_t h = mix64(stream + idx * 0xBF58476D1CE4E5B9ULL);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;  // [0, 1)
  return static_cast<float>((2.0 * u - 1.0) * scale);
}

struct LayerWeights {
  std::vector<float> ln1_g, ln1_b;
  std::vector<float> wq, wk, wv, wo;  // hidden x hidden, row-major [out][in]
  std::vector<float> bq, bk, bv, bo;
  std::vector<float> ln2_g, ln2_b;
  std::vector<float> w_up;    // ff x hidden
  std::vector<float> b_up;    // ff
  std::vector<float> w_down;  // hidden x ff
  std::vector<float> b_down;  // hidden
};

void layer_norm(const float* x, const float* gamma, const float* beta,
                std::size_t n, float* out) {
  float mean = 0.0f;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + 1e-5f);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
}

void matvec(const float* w, const float* x, const float* bias,
            std::size_t rows, std::size_t cols, float* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    float acc = bias ? bias[r] : 0.0f;
    const float* wr = w + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc;
  }
}

class ToyTransformer final : public ModelBackend {
 public:
  explicit ToyTransformer(const ModelConfig& config) : cfg_(config) {
    cfg_.validate();
    init_weights();
  }

  const ModelConfig& config() const override { return cfg_; }

  FullOutput forward_full(const TokenSequence& tokens) const override {
    check_tokens(tokens, 0);
    FullOutput out;
    out.positions = tokens.size();
    out.vocab_size = cfg_.vocab_size;
    out.logits.resize(tokens.size() * cfg_.vocab_size);
    out.kv = empty_kv();
    for (std::size_t t = 0; t < tokens.size(); ++t)
      advance(tokens[t], out.kv, out.logits.data() + t * cfg_.vocab_size);
    return out;
  }

  StepOutput forward_incremental(KVState cached,
                                 const TokenSequence& new_tokens) const override {
    if (cached.layers.empty() && cached.length == 0) cached = empty_kv();
    if (cached.layers.size() != cfg_.num_layers)
      throw ContractError("KVState layer count does not match backend config");
    check_tokens(new_tokens, cached.length);
    StepOutput out;
    out.logits.resize(cfg_.vocab_size);
    for (std::size_t t = 0; t < new_tokens.size(); ++t) {
      const bool last = (t + 1 == new_tokens.size());
      advance(new_tokens[t], cached, last ? out.logits.data() : nullptr);
    }
    out.kv = std::move(cached);
    return out;
  }

 private:
  KVState empty_kv() const {
    KVState kv;
    kv.layers.resize(cfg_.num_layers);
    const std::size_t reserve = cfg_.max_seq_len * cfg_.hidden_size;
    for (auto& l : kv.layers) {
      l.keys.reserve(std::min<std::size_t>(reserve, 1u << 22));
      l.values.reserve(std::min<std::size_t>(reserve, 1u << 22));
    }
    return kv;
  }

  void check_tokens(const TokenSequence& tokens, std::size_t already) const {
    if (tokens.empty()) throw LengthError("sequence must contain at least one token");
    if (already + tokens.size() > cfg_.max_seq_len)
      throw LengthError("sequence of length " + std::to_string(already + tokens.size()) +
                        " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (Token t : tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size)
        throw ContractError("token id " + std::to_string(t) + " outside vocab");
  }

  // Process one token at position kv.length, appending its attention state.
  // Writes logits for that position when logits_out is non-null. This is the
  // single code path behind both forward entry points.
  void advance(Token token, KVState& kv, float* logits_out) const {
    const std::size_t h = cfg_.hidden_size;
    const std::size_t heads = cfg_.num_heads;
    const std::size_t dh = h / heads;
    const std::size_t ff = 4 * h;
    const std::size_t pos = kv.length;

    thread_local std::vector<float> x, xn, q, attn, tmp, mlp, scores;
    x.resize(h);
    xn.resize(h);
    q.resize(h);
    attn.resize(h);
    tmp.resize(std::max(h, ff));
    mlp.resize(ff);
    scores.resize(pos + 1);

    const float* embed_row = embed_.data() + static_cast<std::size_t>(token) * h;
    const float* pos_row = pos_.data() + pos * h;
    for (std::size_t i = 0; i < h; ++i) x[i] = embed_row[i] + pos_row[i];

    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const LayerWeights& w = layers_[l];
      KVState::LayerKV& lkv = kv.layers[l];

      layer_norm(x.data(), w.ln1_g.data(), w.ln1_b.data(), h, xn.data());
      matvec(w.wq.data(), xn.data(), w.bq.data(), h, h, q.data());
      matvec(w.wk.data(), xn.data(), w.bk.data(), h, h, tmp.data());
      lkv.keys.insert(lkv.keys.end(), tmp.begin(), tmp.begin() + h);
      matvec(w.wv.data(), xn.data(), w.bv.data(), h, h, tmp.data());
      lkv.values.insert(lkv.values.end(), tmp.begin(), tmp.begin() + h);

      // Causal attention over positions [0, pos] with per-head softmax.
      for (std::size_t head = 0; head < heads; ++head) {
        const std::size_t off = head * dh;
        float max_score = -1e30f;
        for (std::size_t j = 0; j <= pos; ++j) {
          const float* krow = lkv.keys.data() + j * h + off;
          float s = 0.0f;
          for (std::size_t d = 0; d < dh; ++d) s += q[off + d] * krow[d];
          s *= inv_sqrt_dh;
          scores[j] = s;
          if (s > max_score) max_score = s;
        }
        float denom = 0.0f;
        for (std::size_t j = 0; j <= pos; ++j) {
          scores[j] = std::exp(scores[j] - max_score);
          denom += scores[j];
        }
        const float inv_denom = 1.0f / denom;
        for (std::size_t d = 0; d < dh; ++d) {
          float acc = 0.0f;
          for (std::size_t j = 0; j <= pos; ++j)
            acc += scores[j] * lkv.values[j * h + off + d];
          attn[off + d] = acc * inv_denom;
        }
      }

      matvec(w.wo.data(), attn.data(), w.bo.data(), h, h, tmp.data());
      for (std::size_t i = 0; i < h; ++i) x[i] += tmp[i];

      layer_norm(x.data(), w.ln2_g.data(), w.ln2_b.data(), h, xn.data());
      matvec(w.w_up.data(), xn.data(), w.b_up.data(), ff, h, mlp.data());
      for (std::size_t i = 0; i < ff; ++i) mlp[i] = mlp[i] > 0.0f ? mlp[i] : 0.0f;
      matvec(w.w_down.data(), mlp.data(), w.b_down.data(), h, ff, tmp.data());
      for (std::size_t i = 0; i < h; ++i) x[i] += tmp[i];
    }

    kv.length = pos + 1;

    if (logits_out != nullptr) {
      layer_norm(x.data(), lnf_g_.data(), lnf_b_.data(), h, xn.data());
      matvec(unembed_.data(), xn.data(), nullptr, cfg_.vocab_size, h, logits_out);
    }
  }

  void init_weights() {
    const std::size_t h = cfg_.hidden_size;
    const std::size_t ff = 4 * h;
    const float embed_scale = 0.25f;
    const float proj_scale = 0.6f / std::sqrt(static_cast<float>(h));
    const float down_scale = 0.6f / std::sqrt(static_cast<float>(ff));
    const float bias_scale = 0.02f;

    std::uint32_t id = 0;
    auto fill = [&](std::vector<float>& v, std::size_t n, float scale) {
      const std::uint32_t tensor_id = id++;
      v.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        v[i] = init_uniform(cfg_.seed, tensor_id, i, scale);
    };
    auto ones = [&](std::vector<float>& v, std::size_t n) {
      id++;
      v.assign(n, 1.0f);
    };
    auto zeros = [&](std::vector<float>& v, std::size_t n) {
      id++;
      v.assign(n, 0.0f);
    };

    fill(embed_, cfg_.vocab_size * h, embed_scale);
    fill(pos_, cfg_.max_seq_len * h, embed_scale);
    layers_.resize(cfg_.num_layers);
    for (auto& w : layers_) {
      ones(w.ln1_g, h);
      zeros(w.ln1_b, h);
      fill(w.wq, h * h, proj_scale);
      fill(w.wk, h * h, proj_scale);
      fill(w.wv, h * h, proj_scale);
      fill(w.wo, h * h, proj_scale);
      fill(w.bq, h, bias_scale);
      fill(w.bk, h, bias_scale);
      fill(w.bv, h, bias_scale);
      fill(w.bo, h, bias_scale);
      ones(w.ln2_g, h);
      zeros(w.ln2_b, h);
      fill(w.w_up, ff * h, proj_scale);
      fill(w.b_up, ff, bias_scale);
      fill(w.w_down, h * ff, down_scale);
      fill(w.b_down, h, bias_scale);
    }
    ones(lnf_g_, h);
    zeros(lnf_b_, h);
    fill(unembed_, cfg_.vocab_size * h, embed_scale);
  }

  ModelConfig cfg_;
  std::vector<float> embed_, pos_;
  std::vector<LayerWeights> layers_;
  std::vector<float> lnf_g_, lnf_b_;
  std::vector<float> unembed_;
};

}  // namespace

std::unique_ptr<ModelBackend> build_toy_model(const ModelConfig& config) {
  return std::make_unique<ToyTransformer>(config);
}

}  // namespace lmkit
