#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "littlebird/attention.hpp"
#include "littlebird/ops.hpp"
#include "littlebird/param_store.hpp"
#include "littlebird/posbias.hpp"

namespace littlebird {

enum class AttnPath { Dense, Blocked };

struct ModelConfig {
  Index vocab = 0;
  Index dim = 64;
  Index heads = 4;
  Index layers = 2;
  Index pack = 64;
  Index block = 64;
  double init_std = 0.02;

  AttentionSpec attention_spec() const {
    AttentionSpec s;
    s.heads = heads;
    s.head_dim = dim / heads;
    s.block = block;
    s.pack = pack;
    return s;
  }

  void validate() const {
    if (vocab < 1) throw ConfigError("ModelConfig: vocab must be >= 1");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("ModelConfig: dim must be a positive multiple of heads");
    if (layers < 0) throw ConfigError("ModelConfig: layers must be >= 0");
    attention_spec().validate();
  }
};

template <class S>
struct LayerNormParamsT {
  TensorT<S> gain, shift;
  LayerNormParamsT() = default;
  LayerNormParamsT(ParamStoreT<S>& store, const std::string& prefix, Index d) {
    gain = store.add(prefix + ".gain", TensorT<S>::constant({d}, S(1)));
    shift = store.add(prefix + ".shift", TensorT<S>::zeros({d}));
  }
};

template <class S>
struct FfnParamsT {
  LinearMapT<S> in, out;
  FfnParamsT() = default;
  FfnParamsT(ParamStoreT<S>& store, const std::string& prefix, Index d, SplitMix64& rng, S init_std)
      : in(store, prefix + ".in", d, 4 * d, rng, init_std),
        out(store, prefix + ".out", 4 * d, d, rng, init_std) {}

  TensorT<S> forward(const TensorT<S>& x) const {
    return ffn(x, in.weight, in.bias, out.weight, out.bias);
  }
};

// ---------------------------------------------------------------------------
// One pack & unpack layer. The pack step compresses X into C_P through its
// own projections; the unpack step runs sliding-window attention over
// [C_P ; X]. P' and X' both feed the next layer.
// ---------------------------------------------------------------------------
template <class S>
struct LittleBirdLayerT {
  MultiHeadProjT<S> pack_proj, unpack_proj;
  BiasSlopesT<S> slopes;
  LayerNormParamsT<S> ln_pack, ln_attn, ln_out;
  FfnParamsT<S> ffn_params;

  LittleBirdLayerT() = default;
  LittleBirdLayerT(ParamStoreT<S>& store, const std::string& prefix, const ModelConfig& cfg,
                   SplitMix64& rng)
      : pack_proj(store, prefix + ".pack", cfg.dim, cfg.heads, rng, S(cfg.init_std)),
        unpack_proj(store, prefix + ".unpack", cfg.dim, cfg.heads, rng, S(cfg.init_std)),
        slopes(store, prefix + ".slopes", cfg.heads),
        ln_pack(store, prefix + ".ln_pack", cfg.dim),
        ln_attn(store, prefix + ".ln_attn", cfg.dim),
        ln_out(store, prefix + ".ln_out", cfg.dim),
        ffn_params(store, prefix + ".ffn", cfg.dim, rng, S(cfg.init_std)) {}

  std::pair<TensorT<S>, TensorT<S>> forward(const TensorT<S>& x, const TensorT<S>& p,
                                            const PositionIds& pos, const AttentionSpec& spec,
                                            AttnPath path, const AttnContextT<S>& ctx = {}) const {
    TensorT<S> c_p, p_next;
    if (spec.pack > 0) {
      std::vector<uint8_t> key_valid(pos.real.begin(), pos.real.end());
      c_p = pack_attention(pack_proj, p, x, &key_valid, ctx);
      p_next = layer_norm(add(c_p, p), ln_pack.gain, ln_pack.shift);
    }
    TensorT<S> c_x = path == AttnPath::Dense
                         ? usw_attention_dense(unpack_proj, x, c_p, pos, slopes, spec, ctx)
                         : usw_attention_blocked(unpack_proj, x, c_p, pos, slopes, spec, ctx);
    TensorT<S> a = layer_norm(add(c_x, x), ln_attn.gain, ln_attn.shift);
    TensorT<S> x_next = layer_norm(add(ffn_params.forward(a), a), ln_out.gain, ln_out.shift);
    return {x_next, p_next};
  }
};

// ---------------------------------------------------------------------------
// Quadratic reference layer: full attention with the bidirectional distance
// bias over all pairs. Same parameter shapes minus the pack machinery.
// ---------------------------------------------------------------------------
template <class S>
struct DenseLayerT {
  MultiHeadProjT<S> attn;
  BiasSlopesT<S> slopes;
  LayerNormParamsT<S> ln_attn, ln_out;
  FfnParamsT<S> ffn_params;

  DenseLayerT() = default;
  DenseLayerT(ParamStoreT<S>& store, const std::string& prefix, const ModelConfig& cfg, SplitMix64& rng)
      : attn(store, prefix + ".attn", cfg.dim, cfg.heads, rng, S(cfg.init_std)),
        slopes(store, prefix + ".slopes", cfg.heads),
        ln_attn(store, prefix + ".ln_attn", cfg.dim),
        ln_out(store, prefix + ".ln_out", cfg.dim),
        ffn_params(store, prefix + ".ffn", cfg.dim, rng, S(cfg.init_std)) {}

  TensorT<S> forward(const TensorT<S>& x, const PositionIds& pos, const AttnContextT<S>& ctx = {}) const {
    std::vector<uint8_t> key_valid(pos.real.begin(), pos.real.end());
    TensorT<S> bias = bialibi_distance(pos, slopes);
    TensorT<S> c_x = full_attention(attn, x, x, &bias, &key_valid, ctx);
    TensorT<S> a = layer_norm(add(c_x, x), ln_attn.gain, ln_attn.shift);
    return layer_norm(add(ffn_params.forward(a), a), ln_out.gain, ln_out.shift);
  }
};

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Vocabulary logits over every position; serves masked-token denoising and
/// label-token classification readouts.
template <class S>
struct TokenHeadT {
  LinearMapT<S> out;
  TokenHeadT() = default;
  TokenHeadT(ParamStoreT<S>& store, const std::string& prefix, Index dim, Index vocab, SplitMix64& rng,
             S init_std)
      : out(store, prefix + ".out", dim, vocab, rng, init_std) {}

  TensorT<S> forward(const TensorT<S>& hidden) const { return linear(hidden, out.weight, out.bias); }
};

template <class S>
struct SpanPredictionT {
  TensorT<S> start_dist;  // 1 x l over real tokens
  TensorT<S> end_dist;    // 1 x l, conditioned on the chosen start
  Index start = -1;
  Index end = -1;
};

/// Span selection head. Start scoring is question-conditioned: the sentinel
/// representation is mapped through a linear layer and dotted against every
/// position. End scoring feeds [start rep ; candidate rep] through a
/// gelu-activated double layer, conditioned on the chosen start.
template <class S>
struct SpanHeadT {
  LinearMapT<S> start_query;  // d -> d
  LinearMapT<S> end_hidden;   // 2d -> d
  LinearMapT<S> end_out;      // d -> 1

  SpanHeadT() = default;
  SpanHeadT(ParamStoreT<S>& store, const std::string& prefix, Index dim, SplitMix64& rng, S init_std)
      : start_query(store, prefix + ".start_query", dim, dim, rng, init_std),
        end_hidden(store, prefix + ".end_hidden", 2 * dim, dim, rng, init_std),
        end_out(store, prefix + ".end_out", dim, 1, rng, init_std) {}

  /// Start logits (1 x l) for one sentinel position.
  TensorT<S> start_logits(const TensorT<S>& hidden, Index question_pos) const {
    TensorT<S> hq = slice_rows(hidden, question_pos, 1);
    return matmul_nt(linear(hq, start_query.weight, start_query.bias), hidden);
  }

  /// End logits (1 x l) conditioned on a start position.
  TensorT<S> end_logits(const TensorT<S>& hidden, Index start_pos) const {
    TensorT<S> hs = repeat_row(slice_rows(hidden, start_pos, 1), hidden.rows());
    TensorT<S> cat = concat_cols<S>({hs, hidden});
    TensorT<S> z = gelu(linear(cat, end_hidden.weight, end_hidden.bias));
    return reshape(linear(z, end_out.weight, end_out.bias), {Index(1), hidden.rows()});
  }

  /// Per-sentinel (start, end) distributions, start argmax feeding the end
  /// scorer, both masked to real tokens.
  std::vector<SpanPredictionT<S>> forward(const TensorT<S>& hidden,
                                          const std::vector<Index>& question_positions,
                                          const std::vector<uint8_t>& real) const {
    if (question_positions.empty()) throw InputError("span head: no [QUESTION] positions given");
    bool any_real = false;
    for (uint8_t r : real) any_real = any_real || r;
    if (!any_real) throw InputError("span head: no valid positions to point at");
    const KeyMask mask = KeyMask::per_key(1, real);

    std::vector<SpanPredictionT<S>> out;
    out.reserve(question_positions.size());
    for (Index qp : question_positions) {
      if (qp < 0 || qp >= hidden.rows()) throw InputError("span head: question position outside sequence");
      SpanPredictionT<S> pred;
      pred.start_dist = masked_softmax(start_logits(hidden, qp), mask);
      pred.start = argmax_row(pred.start_dist);
      pred.end_dist = masked_softmax(end_logits(hidden, pred.start), mask);
      pred.end = argmax_row(pred.end_dist);
      out.push_back(std::move(pred));
    }
    return out;
  }

  static Index argmax_row(const TensorT<S>& dist) {
    Index best = 0;
    for (Index c = 1; c < dist.cols(); ++c)
      if (dist.at(0, c) > dist.at(0, best)) best = c;
    return best;
  }
};

// ---------------------------------------------------------------------------
// Encoders. Token embeddings are scaled by sqrt(dim) at lookup; there is no
// positional embedding table anywhere - position enters only through the
// distance biases built from position ids.
// ---------------------------------------------------------------------------

template <class S>
class LittleBirdEncoderT {
 public:
  explicit LittleBirdEncoderT(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng(seed);
    embed_ = store_.add("embed", TensorT<S>::randn({cfg_.vocab, cfg_.dim}, rng, S(cfg_.init_std)));
    if (cfg_.pack > 0)
      pack_init_ = store_.add("pack_init", TensorT<S>::randn({cfg_.pack, cfg_.dim}, rng, S(cfg_.init_std)));
    layers_.reserve(static_cast<size_t>(cfg_.layers));
    for (Index i = 0; i < cfg_.layers; ++i)
      layers_.emplace_back(store_, "layers." + std::to_string(i), cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return store_; }
  const ParamStoreT<S>& params() const { return store_; }
  std::vector<LittleBirdLayerT<S>>& layers() { return layers_; }
  const std::vector<LittleBirdLayerT<S>>& layers() const { return layers_; }
  TensorT<S>& embedding() { return embed_; }
  TensorT<S>& pack_init() { return pack_init_; }

  TensorT<S> embed(const std::vector<Index>& tokens) const {
    return scale(gather_rows(embed_, tokens), S(std::sqrt(static_cast<double>(cfg_.dim))));
  }

  /// Threads (X, P) through the stack; returns final hidden states, and the
  /// final pack state through `pack_out` when requested.
  TensorT<S> encode(const std::vector<Index>& tokens, const PositionIds& pos, AttnPath path,
                    AttnContextT<S> ctx = {}, TensorT<S>* pack_out = nullptr) const {
    if (static_cast<Index>(tokens.size()) != pos.size())
      throw InputError("encode: tokens and position ids disagree on length");
    pos.validate();
    const AttentionSpec spec = cfg_.attention_spec();
    TensorT<S> x = embed(tokens);
    TensorT<S> p = pack_init_;
    for (size_t i = 0; i < layers_.size(); ++i) {
      ctx.layer = static_cast<Index>(i);
      auto [x2, p2] = layers_[i].forward(x, p, pos, spec, path, ctx);
      x = x2;
      p = p2;
    }
    if (pack_out) *pack_out = p;
    return x;
  }

 private:
  ModelConfig cfg_;
  ParamStoreT<S> store_;
  TensorT<S> embed_;
  TensorT<S> pack_init_;
  std::vector<LittleBirdLayerT<S>> layers_;
};

template <class S>
class DenseEncoderT {
 public:
  explicit DenseEncoderT(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng(seed);
    embed_ = store_.add("embed", TensorT<S>::randn({cfg_.vocab, cfg_.dim}, rng, S(cfg_.init_std)));
    layers_.reserve(static_cast<size_t>(cfg_.layers));
    for (Index i = 0; i < cfg_.layers; ++i)
      layers_.emplace_back(store_, "layers." + std::to_string(i), cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return store_; }
  const ParamStoreT<S>& params() const { return store_; }
  std::vector<DenseLayerT<S>>& layers() { return layers_; }
  const std::vector<DenseLayerT<S>>& layers() const { return layers_; }
  TensorT<S>& embedding() { return embed_; }

  TensorT<S> embed(const std::vector<Index>& tokens) const {
    return scale(gather_rows(embed_, tokens), S(std::sqrt(static_cast<double>(cfg_.dim))));
  }

  TensorT<S> encode(const std::vector<Index>& tokens, const PositionIds& pos,
                    AttnContextT<S> ctx = {}) const {
    if (static_cast<Index>(tokens.size()) != pos.size())
      throw InputError("encode: tokens and position ids disagree on length");
    pos.validate();
    TensorT<S> x = embed(tokens);
    for (size_t i = 0; i < layers_.size(); ++i) {
      ctx.layer = static_cast<Index>(i);
      x = layers_[i].forward(x, pos, ctx);
    }
    return x;
  }

 private:
  ModelConfig cfg_;
  ParamStoreT<S> store_;
  TensorT<S> embed_;
  std::vector<DenseLayerT<S>> layers_;
};

using LittleBirdEncoder = LittleBirdEncoderT<double>;
using DenseEncoder = DenseEncoderT<double>;
using TokenHead = TokenHeadT<double>;
using SpanHead = SpanHeadT<double>;

}  // namespace littlebird
