#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "littlebird/ops.hpp"
#include "littlebird/param_store.hpp"
#include "littlebird/rng.hpp"
#include "littlebird/tensor.hpp"

namespace littlebird {

// ---------------------------------------------------------------------------
// Position ids. Distances are always computed from these ids, never from
// array indices; padding insertion works by remapping them.
// ---------------------------------------------------------------------------
struct PositionIds {
  std::vector<long> ids;      // non-negative, strictly increasing
  std::vector<uint8_t> real;  // real-token flag per position

  static PositionIds sequential(Index l) {
    PositionIds p;
    p.ids.resize(static_cast<size_t>(l));
    p.real.assign(static_cast<size_t>(l), 1);
    for (Index i = 0; i < l; ++i) p.ids[static_cast<size_t>(i)] = i;
    return p;
  }

  Index size() const { return static_cast<Index>(ids.size()); }

  void validate() const {
    if (ids.size() != real.size()) throw InputError("PositionIds: ids/real size mismatch");
    long prev = -1;
    for (long id : ids) {
      if (id < 0) throw InputError("PositionIds: negative id");
      if (id <= prev) throw InputError("PositionIds: ids must be strictly increasing");
      prev = id;
    }
  }
};

/// At each boundary index, with probability `prob`, shifts all ids after the
/// boundary by a gap drawn uniformly from [0, max_len]. Real-token flags are
/// untouched; ids never decrease and tokens are never reordered.
inline PositionIds insert_virtual_padding(const PositionIds& pos, const std::vector<Index>& boundaries,
                                          double prob, long max_len, SplitMix64& rng) {
  if (prob < 0.0 || prob > 1.0) throw InputError("insert_virtual_padding: prob outside [0, 1]");
  if (max_len < 0) throw InputError("insert_virtual_padding: negative max_len");
  PositionIds out = pos;
  const Index n = out.size();
  for (Index b : boundaries) {
    if (b < 0 || b >= n) throw InputError("insert_virtual_padding: boundary outside sequence");
    if (!rng.bernoulli(prob)) continue;
    const long gap = rng.uniform_int(0, max_len);
    for (Index i = b + 1; i < n; ++i) out.ids[static_cast<size_t>(i)] += gap;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slopes. One learnable (alpha, beta, gamma) triple per head per layer:
// alpha biases interactions with position id 0, beta penalizes keys to the
// left by distance, gamma keys to the right.
// ---------------------------------------------------------------------------

/// Head-geometric slope sequence 2^(-8k/H) for k = 1..H.
template <class S>
std::vector<S> alibi_slope_sequence(Index heads) {
  std::vector<S> m(static_cast<size_t>(heads));
  for (Index k = 1; k <= heads; ++k)
    m[static_cast<size_t>(k - 1)] = static_cast<S>(std::pow(2.0, -8.0 * static_cast<double>(k) / static_cast<double>(heads)));
  return m;
}

template <class S>
struct BiasSlopesT {
  TensorT<S> alpha;  // length H
  TensorT<S> beta;
  TensorT<S> gamma;

  BiasSlopesT() = default;

  /// Registers trainable slopes: alpha 0, beta/gamma the geometric sequence.
  BiasSlopesT(ParamStoreT<S>& store, const std::string& prefix, Index heads) {
    alpha = store.add(prefix + ".alpha", TensorT<S>::zeros({heads}));
    TensorT<S> b = TensorT<S>::zeros({heads});
    TensorT<S> g = TensorT<S>::zeros({heads});
    const auto seq = alibi_slope_sequence<S>(heads);
    for (Index h = 0; h < heads; ++h) {
      b.array()[h] = seq[static_cast<size_t>(h)];
      g.array()[h] = seq[static_cast<size_t>(h)];
    }
    beta = store.add(prefix + ".beta", std::move(b));
    gamma = store.add(prefix + ".gamma", std::move(g));
  }

  Index heads() const { return alpha.dim(0); }
};

using BiasSlopes = BiasSlopesT<double>;

// ---------------------------------------------------------------------------
// Distance matrices
// ---------------------------------------------------------------------------

/// Causal linear-bias distance matrix: m*(i-j) on and below the diagonal,
/// +infinity above (the masked half). Reference artifact, not differentiable.
template <class S>
TensorT<S> alibi_distance(Index l, S m) {
  if (l < 1) throw InputError("alibi_distance: l must be >= 1");
  if (!(m > S(0))) throw InputError("alibi_distance: slope must be positive");
  TensorT<S> d = TensorT<S>::zeros({l, l});
  const S inf = std::numeric_limits<S>::infinity();
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j < l; ++j) d.at(i, j) = (i >= j) ? m * static_cast<S>(i - j) : inf;
  return d;
}

namespace detail {

enum class BiasCase : uint8_t { Self, Zero, Left, Right };

/// Case split for one (query id, key id) pair. Self wins over the position-0
/// rule, so the id-0 diagonal entry is 0.
inline BiasCase bias_case(long qi, long kj) {
  if (qi == kj) return BiasCase::Self;
  if (qi == 0 || kj == 0) return BiasCase::Zero;
  return (qi > kj) ? BiasCase::Left : BiasCase::Right;
}

}  // namespace detail

/// Bias block for one head over explicit query/key id spans: rows are query
/// ids, columns key ids. Differentiable in the slope vectors.
template <class S>
TensorT<S> bialibi_span(const std::vector<long>& query_ids, const std::vector<long>& key_ids,
                        const BiasSlopesT<S>& slopes, Index head) {
  const Index rows = static_cast<Index>(query_ids.size());
  const Index cols = static_cast<Index>(key_ids.size());
  const S a = slopes.alpha.at(head), b = slopes.beta.at(head), g = slopes.gamma.at(head);
  TensorT<S> out = TensorT<S>::zeros({rows, cols});
  for (Index i = 0; i < rows; ++i) {
    const long qi = query_ids[static_cast<size_t>(i)];
    for (Index j = 0; j < cols; ++j) {
      const long kj = key_ids[static_cast<size_t>(j)];
      switch (detail::bias_case(qi, kj)) {
        case detail::BiasCase::Self: break;
        case detail::BiasCase::Zero: out.at(i, j) = a; break;
        case detail::BiasCase::Left: out.at(i, j) = b * static_cast<S>(qi - kj); break;
        case detail::BiasCase::Right: out.at(i, j) = g * static_cast<S>(kj - qi); break;
      }
    }
  }
  if (any_tracked<S>({&slopes.alpha, &slopes.beta, &slopes.gamma})) {
    TensorT<S> pa = slopes.alpha, pb = slopes.beta, pg = slopes.gamma;
    make_tracked<S>(out, {slopes.alpha, slopes.beta, slopes.gamma},
                    [pa, pb, pg, query_ids, key_ids, head](const TensorT<S>& o) mutable {
                      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
                      S da = S(0), db = S(0), dg = S(0);
                      for (Index i = 0; i < o.rows(); ++i) {
                        const long qi = query_ids[static_cast<size_t>(i)];
                        for (Index j = 0; j < o.cols(); ++j) {
                          const long kj = key_ids[static_cast<size_t>(j)];
                          const S g2 = go(i, j);
                          if (g2 == S(0)) continue;
                          switch (detail::bias_case(qi, kj)) {
                            case detail::BiasCase::Self: break;
                            case detail::BiasCase::Zero: da += g2; break;
                            case detail::BiasCase::Left: db += g2 * static_cast<S>(qi - kj); break;
                            case detail::BiasCase::Right: dg += g2 * static_cast<S>(kj - qi); break;
                          }
                        }
                      }
                      pa.grad()[head] += da;
                      pb.grad()[head] += db;
                      pg.grad()[head] += dg;
                    });
  }
  return out;
}

/// Full bidirectional distance tensor, one l x l plane per head, computed
/// from position ids. Differentiable in the slopes.
template <class S>
TensorT<S> bialibi_distance(const PositionIds& pos, const BiasSlopesT<S>& slopes) {
  pos.validate();
  const Index heads = slopes.heads();
  const Index l = pos.size();
  TensorT<S> out = TensorT<S>::zeros({heads, l, l});
  for (Index h = 0; h < heads; ++h) {
    const S a = slopes.alpha.at(h), b = slopes.beta.at(h), g = slopes.gamma.at(h);
    auto plane = out.plane(h);
    for (Index i = 0; i < l; ++i) {
      const long qi = pos.ids[static_cast<size_t>(i)];
      for (Index j = 0; j < l; ++j) {
        const long kj = pos.ids[static_cast<size_t>(j)];
        switch (detail::bias_case(qi, kj)) {
          case detail::BiasCase::Self: plane(i, j) = S(0); break;
          case detail::BiasCase::Zero: plane(i, j) = a; break;
          case detail::BiasCase::Left: plane(i, j) = b * static_cast<S>(qi - kj); break;
          case detail::BiasCase::Right: plane(i, j) = g * static_cast<S>(kj - qi); break;
        }
      }
    }
  }
  if (any_tracked<S>({&slopes.alpha, &slopes.beta, &slopes.gamma})) {
    TensorT<S> pa = slopes.alpha, pb = slopes.beta, pg = slopes.gamma;
    std::vector<long> ids = pos.ids;
    make_tracked<S>(out, {slopes.alpha, slopes.beta, slopes.gamma},
                    [pa, pb, pg, ids](const TensorT<S>& o) mutable {
                      const Index heads2 = o.dim(0), l2 = o.dim(1);
                      for (Index h = 0; h < heads2; ++h) {
                        ConstMatMap<S> gp(o.grad().data() + h * l2 * l2, l2, l2);
                        S da = S(0), db = S(0), dg = S(0);
                        for (Index i = 0; i < l2; ++i)
                          for (Index j = 0; j < l2; ++j) {
                            const S g2 = gp(i, j);
                            if (g2 == S(0)) continue;
                            switch (detail::bias_case(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)])) {
                              case detail::BiasCase::Self: break;
                              case detail::BiasCase::Zero: da += g2; break;
                              case detail::BiasCase::Left:
                                db += g2 * static_cast<S>(ids[static_cast<size_t>(i)] - ids[static_cast<size_t>(j)]);
                                break;
                              case detail::BiasCase::Right:
                                dg += g2 * static_cast<S>(ids[static_cast<size_t>(j)] - ids[static_cast<size_t>(i)]);
                                break;
                            }
                          }
                        pa.grad()[h] += da;
                        pb.grad()[h] += db;
                        pg.grad()[h] += dg;
                      }
                    });
  }
  return out;
}

/// Constant bias block for pack-token keys: ((beta + gamma) / 2) * block for
/// one head, any shape. Differentiable in beta and gamma.
template <class S>
TensorT<S> pack_bias_block(const BiasSlopesT<S>& slopes, Index head, Index rows, Index cols, Index block) {
  const S c = (slopes.beta.at(head) + slopes.gamma.at(head)) * S(0.5) * static_cast<S>(block);
  TensorT<S> out = TensorT<S>::constant({rows, cols}, c);
  if (any_tracked<S>({&slopes.beta, &slopes.gamma})) {
    TensorT<S> pb = slopes.beta, pg = slopes.gamma;
    const S half_block = S(0.5) * static_cast<S>(block);
    make_tracked<S>(out, {slopes.beta, slopes.gamma}, [pb, pg, head, half_block](const TensorT<S>& o) mutable {
      const S total = o.grad().sum() * half_block;
      pb.grad()[head] += total;
      pg.grad()[head] += total;
    });
  }
  return out;
}

/// Pack-token distance tensor: one constant s x l plane per head with value
/// ((beta + gamma) / 2) * block. s = 0 yields empty planes.
template <class S>
TensorT<S> pack_distance(Index pack, Index l, const BiasSlopesT<S>& slopes, Index block) {
  if (pack < 0) throw InputError("pack_distance: pack size must be >= 0");
  const Index heads = slopes.heads();
  TensorT<S> out = TensorT<S>::zeros({heads, pack, l});
  for (Index h = 0; h < heads; ++h) {
    const S c = (slopes.beta.at(h) + slopes.gamma.at(h)) * S(0.5) * static_cast<S>(block);
    out.plane(h).setConstant(c);
  }
  if (pack > 0 && l > 0 && any_tracked<S>({&slopes.beta, &slopes.gamma})) {
    TensorT<S> pb = slopes.beta, pg = slopes.gamma;
    const S half_block = S(0.5) * static_cast<S>(block);
    make_tracked<S>(out, {slopes.beta, slopes.gamma}, [pb, pg, half_block](const TensorT<S>& o) mutable {
      const Index heads2 = o.dim(0), r = o.dim(1), c2 = o.dim(2);
      for (Index h = 0; h < heads2; ++h) {
        ConstVecMap<S> gp(o.grad().data() + h * r * c2, r * c2);
        const S total = gp.sum() * half_block;
        pb.grad()[h] += total;
        pg.grad()[h] += total;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-(layer, head, ids) bias cache for no-grad paths. Ids change only when
// padding insertion changes, so eval loops hit the same entries repeatedly.
// Entries are validated against the current slope values and rebuilt if the
// slopes have moved. Safe for concurrent lookups; insertion is exclusive.
// ---------------------------------------------------------------------------
template <class S>
class BiasCacheT {
 public:
  /// Head bias matrix (l x l) for the given layer/head, built under no-grad.
  TensorT<S> head_bias(Index layer, Index head, const PositionIds& pos, const BiasSlopesT<S>& slopes) {
    const uint64_t key = hash_key(layer, head, pos.ids);
    const S a = slopes.alpha.at(head), b = slopes.beta.at(head), g = slopes.gamma.at(head);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = map_.find(key);
      if (it != map_.end() && it->second.ids == pos.ids && it->second.alpha == a && it->second.beta == b &&
          it->second.gamma == g)
        return it->second.bias;
    }
    NoGradGuard ng;
    TensorT<S> bias = bialibi_span<S>(pos.ids, pos.ids, slopes, head);
    {
      std::lock_guard<std::mutex> lock(mu_);
      map_[key] = Entry{pos.ids, a, b, g, bias};
    }
    return bias;
  }

  size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return map_.size();
  }

 private:
  struct Entry {
    std::vector<long> ids;
    S alpha, beta, gamma;
    TensorT<S> bias;
  };

  static uint64_t hash_key(Index layer, Index head, const std::vector<long>& ids) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ULL;
    };
    mix(static_cast<uint64_t>(layer));
    mix(static_cast<uint64_t>(head) + 0x9e3779b97f4a7c15ULL);
    for (long id : ids) mix(static_cast<uint64_t>(id));
    return h;
  }

  mutable std::mutex mu_;
  std::unordered_map<uint64_t, Entry> map_;
};

using BiasCache = BiasCacheT<double>;

}  // namespace littlebird
