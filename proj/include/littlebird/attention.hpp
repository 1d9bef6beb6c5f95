#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "littlebird/ops.hpp"
#include "littlebird/param_store.hpp"
#include "littlebird/posbias.hpp"

namespace littlebird {

// ---------------------------------------------------------------------------
// Geometry of one attention configuration.
// ---------------------------------------------------------------------------
struct AttentionSpec {
  Index heads = 1;
  Index head_dim = 1;
  Index block = 1;   // sliding-window block size, tokens
  Index pack = 0;    // pack rows
  Index global_block = 0;  // the block whose keys every query may attend

  Index dim() const { return heads * head_dim; }

  void validate() const {
    if (heads < 1 || head_dim < 1) throw InputError("AttentionSpec: heads and head_dim must be >= 1");
    if (block < 1) throw InputError("AttentionSpec: block size must be >= 1");
    if (pack < 0) throw InputError("AttentionSpec: pack size must be >= 0");
    if (global_block != 0) throw InputError("AttentionSpec: global block is fixed at 0");
  }
};

/// Count of attention score entries computed in one forward pass. A
/// (query, key) pair is counted once per attention call, not once per head:
/// all heads share the same score geometry. Counters only grow within a pass.
struct ScoreAudit {
  long long unpack_scores = 0;  // X-query scores (window + global + pack keys)
  long long pack_scores = 0;    // pack-query scores over X

  long long total() const { return unpack_scores + pack_scores; }
  void add_unpack(long long n) { unpack_scores += n; }
  void add_pack(long long n) { pack_scores += n; }
};

/// Upper bound on the score count of one layer's attention at length l:
/// l*(4b + s) for the unpack step plus l*s for pack attention.
inline long long complexity_bound(const AttentionSpec& spec, Index l) {
  return static_cast<long long>(l) * (4 * spec.block + spec.pack) + static_cast<long long>(l) * spec.pack;
}

// ---------------------------------------------------------------------------
// Block-structured sparsity. Block membership is floor(position_id / b), not
// the array index, so a remapped id vector (padding insertion) produces the
// same allowed sets as physically inserted masked pads.
// ---------------------------------------------------------------------------
class SparsityMask {
 public:
  SparsityMask(const PositionIds& pos, const AttentionSpec& spec) : block_(spec.block) {
    idblk_.reserve(pos.ids.size());
    for (long id : pos.ids) idblk_.push_back(id / block_);
  }

  long id_block(Index i) const { return idblk_[static_cast<size_t>(i)]; }

  /// X-to-X rule: key's id-block is the global block, the query's own
  /// id-block, or one of its two neighbors.
  bool allowed(Index q, Index k) const {
    const long qb = idblk_[static_cast<size_t>(q)];
    const long kb = idblk_[static_cast<size_t>(k)];
    return kb == 0 || kb == qb || kb == qb - 1 || kb == qb + 1;
  }

  /// Dense combined mask for the reference path over [pack keys ; X keys]:
  /// pack columns are always valid, X columns require the sparsity rule and
  /// a real key.
  KeyMask usw_key_mask(const PositionIds& pos, Index pack) const {
    const Index l = pos.size();
    std::vector<uint8_t> m(static_cast<size_t>(l * (pack + l)), 0);
    for (Index q = 0; q < l; ++q) {
      const size_t base = static_cast<size_t>(q * (pack + l));
      for (Index c = 0; c < pack; ++c) m[base + static_cast<size_t>(c)] = 1;
      for (Index k = 0; k < l; ++k)
        m[base + static_cast<size_t>(pack + k)] =
            (allowed(q, k) && pos.real[static_cast<size_t>(k)]) ? 1 : 0;
    }
    return KeyMask::dense(l, pack + l, std::move(m));
  }

  Index allowed_real_count(const PositionIds& pos, Index q) const {
    Index n = 0;
    for (Index k = 0; k < pos.size(); ++k)
      if (allowed(q, k) && pos.real[static_cast<size_t>(k)]) ++n;
    return n;
  }

 private:
  Index block_;
  std::vector<long> idblk_;
};

// ---------------------------------------------------------------------------
// Projections of one multi-head attention: Q, K, V and the output map.
// Heads are column blocks of the projected matrices.
// ---------------------------------------------------------------------------
template <class S>
struct MultiHeadProjT {
  Index heads = 1;
  LinearMapT<S> q, k, v, o;

  MultiHeadProjT() = default;
  MultiHeadProjT(ParamStoreT<S>& store, const std::string& prefix, Index dim, Index heads_in,
                 SplitMix64& rng, S init_std = S(0.02))
      : heads(heads_in),
        q(store, prefix + ".q", dim, dim, rng, init_std),
        k(store, prefix + ".k", dim, dim, rng, init_std),
        v(store, prefix + ".v", dim, dim, rng, init_std),
        o(store, prefix + ".o", dim, dim, rng, init_std) {}
};

using MultiHeadProj = MultiHeadProjT<double>;

/// Per-head attention probabilities captured from a forward pass, in head
/// order. Supported by the reference (dense) paths.
template <class S>
struct AttnCaptureT {
  std::vector<TensorT<S>> probs;
};

using AttnCapture = AttnCaptureT<double>;

/// Optional per-call instrumentation and caching.
template <class S>
struct AttnContextT {
  ScoreAudit* audit = nullptr;
  AttnCaptureT<S>* capture = nullptr;
  BiasCacheT<S>* bias_cache = nullptr;  // consulted only under no-grad
  Index layer = 0;
};

using AttnContext = AttnContextT<double>;

// ---------------------------------------------------------------------------
// Generic dense attention over query sequence X and context C with an
// optional per-head bias (heads x l x m) subtracted from the scaled scores.
// A query whose keys are all masked yields a zero attended row.
// ---------------------------------------------------------------------------
template <class S>
TensorT<S> full_attention(const MultiHeadProjT<S>& proj, const TensorT<S>& x, const TensorT<S>& c,
                          const TensorT<S>* bias, const std::vector<uint8_t>* key_valid,
                          const AttnContextT<S>& ctx = {}) {
  const Index l = x.rows(), m = c.rows(), d = x.cols();
  const Index heads = proj.heads;
  if (d % heads != 0) throw ShapeError("full_attention: dim not divisible by head count");
  const Index dh = d / heads;
  if (bias && (bias->rank() != 3 || bias->dim(0) != heads || bias->dim(1) != l || bias->dim(2) != m))
    throw ShapeError("full_attention: bias must be heads x l x m");
  if (key_valid && static_cast<Index>(key_valid->size()) != m)
    throw ShapeError("full_attention: key validity length mismatch");

  TensorT<S> qm = linear(x, proj.q.weight, proj.q.bias);
  TensorT<S> km = linear(c, proj.k.weight, proj.k.bias);
  TensorT<S> vm = linear(c, proj.v.weight, proj.v.bias);

  const KeyMask mask = key_valid ? KeyMask::per_key(l, *key_valid) : KeyMask::all_valid(l, m);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  std::vector<TensorT<S>> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    TensorT<S> qh = slice_cols(qm, h * dh, dh);
    TensorT<S> kh = slice_cols(km, h * dh, dh);
    TensorT<S> vh = slice_cols(vm, h * dh, dh);
    TensorT<S> scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (bias) scores = sub(scores, slice_plane(*bias, h));
    TensorT<S> probs = masked_softmax(scores, mask);
    if (ctx.capture) ctx.capture->probs.push_back(probs);
    head_outs.push_back(matmul(probs, vh));
  }
  if (ctx.audit) ctx.audit->add_unpack(static_cast<long long>(l) * m);

  TensorT<S> concat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return linear(concat, proj.o.weight, proj.o.bias);
}

/// Pack step: a small learned sequence P attends the whole input X with no
/// distance bias, compressing it into pack rows.
template <class S>
TensorT<S> pack_attention(const MultiHeadProjT<S>& proj, const TensorT<S>& p, const TensorT<S>& x,
                          const std::vector<uint8_t>* key_valid, const AttnContextT<S>& ctx = {}) {
  if (p.rows() < 1) throw InputError("pack_attention: pack must have at least one row");
  ScoreAudit local;
  AttnContextT<S> sub_ctx = ctx;
  sub_ctx.audit = &local;
  TensorT<S> out = full_attention(proj, p, x, nullptr, key_valid, sub_ctx);
  if (ctx.audit) ctx.audit->add_pack(local.unpack_scores);
  return out;
}

namespace detail {

/// Bias over the X-key columns for one head: the cache applies only under
/// no-grad, training paths always rebuild (slopes move between steps).
template <class S>
TensorT<S> usw_head_bias(const PositionIds& pos, const BiasSlopesT<S>& slopes, Index head,
                         const AttnContextT<S>& ctx) {
  if (ctx.bias_cache && !grad_enabled())
    return ctx.bias_cache->head_bias(ctx.layer, head, pos, slopes);
  return bialibi_span<S>(pos.ids, pos.ids, slopes, head);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Unpack & sliding-window attention, reference form: the full l x (s + l)
// score matrix is materialized, biased by [pack bias ; distance matrix],
// masked by the block rule, and softmaxed jointly over pack and X keys.
// ---------------------------------------------------------------------------
template <class S>
TensorT<S> usw_attention_dense(const MultiHeadProjT<S>& proj, const TensorT<S>& x, const TensorT<S>& c_p,
                               const PositionIds& pos, const BiasSlopesT<S>& slopes,
                               const AttentionSpec& spec, const AttnContextT<S>& ctx = {}) {
  spec.validate();
  const Index l = x.rows(), d = x.cols();
  const Index s = spec.pack;
  const Index heads = spec.heads, dh = spec.head_dim;
  if (heads * dh != d) throw ShapeError("usw_attention_dense: spec dims do not match input");
  if (pos.size() != l) throw ShapeError("usw_attention_dense: position ids do not match input length");
  if (s > 0 && (c_p.rows() != s || c_p.cols() != d))
    throw ShapeError("usw_attention_dense: packed context must be pack x dim");

  TensorT<S> qm = linear(x, proj.q.weight, proj.q.bias);
  TensorT<S> km = linear(x, proj.k.weight, proj.k.bias);
  TensorT<S> vm = linear(x, proj.v.weight, proj.v.bias);
  TensorT<S> kp, vp;
  if (s > 0) {
    kp = linear(c_p, proj.k.weight, proj.k.bias);
    vp = linear(c_p, proj.v.weight, proj.v.bias);
  }

  const SparsityMask sparsity(pos, spec);
  const KeyMask mask = sparsity.usw_key_mask(pos, s);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  std::vector<TensorT<S>> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    TensorT<S> qh = slice_cols(qm, h * dh, dh);
    TensorT<S> kh = slice_cols(km, h * dh, dh);
    TensorT<S> vh = slice_cols(vm, h * dh, dh);

    TensorT<S> scores;
    TensorT<S> values;
    if (s > 0) {
      TensorT<S> kph = slice_cols(kp, h * dh, dh);
      scores = concat_cols<S>({matmul_nt(qh, kph), matmul_nt(qh, kh)});
      values = concat_rows<S>({slice_cols(vp, h * dh, dh), vh});
    } else {
      scores = matmul_nt(qh, kh);
      values = vh;
    }
    scores = scale(scores, inv_sqrt);

    TensorT<S> dist = detail::usw_head_bias(pos, slopes, h, ctx);
    TensorT<S> bias = s > 0 ? concat_cols<S>({pack_bias_block(slopes, h, l, s, spec.block), dist}) : dist;
    scores = sub(scores, bias);

    TensorT<S> probs = masked_softmax(scores, mask);
    if (ctx.capture) ctx.capture->probs.push_back(probs);
    head_outs.push_back(matmul(probs, values));
  }
  if (ctx.audit) ctx.audit->add_unpack(static_cast<long long>(l) * (s + l));

  TensorT<S> concat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return linear(concat, proj.o.weight, proj.o.bias);
}

namespace detail {

/// Per-block view used by the rolled kernel. Array blocks must coincide with
/// id-blocks (block-aligned ids); the caller validates.
struct BlockLayout {
  Index nblocks = 0;
  std::vector<long> block_id;  // id-block index per array block

  static BlockLayout build(const PositionIds& pos, Index block) {
    const Index l = pos.size();
    if (l % block != 0)
      throw InputError("blocked attention requires length divisible by block size, have l=" +
                       std::to_string(l) + ", b=" + std::to_string(block));
    BlockLayout lay;
    lay.nblocks = l / block;
    lay.block_id.reserve(static_cast<size_t>(lay.nblocks));
    long prev = -1;
    for (Index b = 0; b < lay.nblocks; ++b) {
      const long first = pos.ids[static_cast<size_t>(b * block)] / block;
      const long last = pos.ids[static_cast<size_t>((b + 1) * block - 1)] / block;
      if (first != last)
        throw InputError("blocked attention requires block-aligned position ids (array block " +
                         std::to_string(b) + " spans id-blocks " + std::to_string(first) + ".." +
                         std::to_string(last) + ")");
      if (first <= prev) throw InputError("blocked attention: id-blocks must strictly increase");
      lay.block_id.push_back(first);
      prev = first;
    }
    return lay;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Unpack & sliding-window attention, rolled form: per query block, keys and
// values of [pack ; global ; left ; self ; right] are gathered and attended
// in one batch. Numerically equal to the dense reference; score work is
// l*(4b+s) instead of l*(s+l). Missing neighbor slots at the sequence edges
// gather the self block under a fully-invalid mask, and the global slot is
// masked wherever it duplicates a window slot so no key is counted twice.
// ---------------------------------------------------------------------------
template <class S>
TensorT<S> usw_attention_blocked(const MultiHeadProjT<S>& proj, const TensorT<S>& x, const TensorT<S>& c_p,
                                 const PositionIds& pos, const BiasSlopesT<S>& slopes,
                                 const AttentionSpec& spec, const AttnContextT<S>& ctx = {}) {
  spec.validate();
  const Index l = x.rows(), d = x.cols();
  const Index s = spec.pack, b = spec.block;
  const Index heads = spec.heads, dh = spec.head_dim;
  if (heads * dh != d) throw ShapeError("usw_attention_blocked: spec dims do not match input");
  if (pos.size() != l) throw ShapeError("usw_attention_blocked: position ids do not match input length");
  if (s > 0 && (c_p.rows() != s || c_p.cols() != d))
    throw ShapeError("usw_attention_blocked: packed context must be pack x dim");

  const detail::BlockLayout layout = detail::BlockLayout::build(pos, b);
  const Index nb = layout.nblocks;
  const bool has_global = layout.block_id[0] == 0;

  TensorT<S> qm = linear(x, proj.q.weight, proj.q.bias);
  TensorT<S> km = linear(x, proj.k.weight, proj.k.bias);
  TensorT<S> vm = linear(x, proj.v.weight, proj.v.bias);
  TensorT<S> kp, vp;
  if (s > 0) {
    kp = linear(c_p, proj.k.weight, proj.k.bias);
    vp = linear(c_p, proj.v.weight, proj.v.bias);
  }

  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  const Index gathered = s + 4 * b;  // pack + global + left + self + right

  std::vector<TensorT<S>> block_outs;
  block_outs.reserve(static_cast<size_t>(nb));
  for (Index qb = 0; qb < nb; ++qb) {
    const long nq = layout.block_id[static_cast<size_t>(qb)];

    // Window slots: array block index, or -1 when absent at this edge.
    const Index slot_global = has_global ? 0 : -1;
    const Index slot_left =
        (qb > 0 && layout.block_id[static_cast<size_t>(qb - 1)] == nq - 1) ? qb - 1 : -1;
    const Index slot_self = qb;
    const Index slot_right =
        (qb + 1 < nb && layout.block_id[static_cast<size_t>(qb + 1)] == nq + 1) ? qb + 1 : -1;
    const Index slots[4] = {slot_global, slot_left, slot_self, slot_right};

    // Deduplicate: mask the global slot when its block already appears as a
    // window slot for this query block.
    const bool global_dup =
        slot_global >= 0 && (slot_global == slot_left || slot_global == slot_self || slot_global == slot_right);

    std::vector<uint8_t> mask_bits(static_cast<size_t>(b * gathered), 0);
    for (Index r = 0; r < b; ++r) {
      const size_t base = static_cast<size_t>(r * gathered);
      for (Index c = 0; c < s; ++c) mask_bits[base + static_cast<size_t>(c)] = 1;
      for (int slot = 0; slot < 4; ++slot) {
        const Index blk = slots[slot];
        const bool slot_live = blk >= 0 && !(slot == 0 && global_dup);
        for (Index c = 0; c < b; ++c) {
          const bool real = slot_live && pos.real[static_cast<size_t>(blk * b + c)];
          mask_bits[base + static_cast<size_t>(s + slot * b + c)] = real ? 1 : 0;
        }
      }
    }
    const KeyMask mask = KeyMask::dense(b, gathered, std::move(mask_bits));

    // Gather keys/values once per block; absent slots reuse the self block
    // rows (fully masked, so they contribute nothing and get no gradient).
    std::vector<TensorT<S>> kparts, vparts;
    if (s > 0) {
      kparts.push_back(kp);
      vparts.push_back(vp);
    }
    for (int slot = 0; slot < 4; ++slot) {
      const Index blk = slots[slot] >= 0 ? slots[slot] : slot_self;
      kparts.push_back(slice_rows(km, blk * b, b));
      vparts.push_back(slice_rows(vm, blk * b, b));
    }
    TensorT<S> kg = concat_rows(kparts);
    TensorT<S> vg = concat_rows(vparts);

    // Bias columns: constant pack bias, then a distance span per window slot.
    std::vector<long> qids(pos.ids.begin() + qb * b, pos.ids.begin() + (qb + 1) * b);

    std::vector<TensorT<S>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    TensorT<S> qblk = slice_rows(qm, qb * b, b);
    for (Index h = 0; h < heads; ++h) {
      TensorT<S> qh = slice_cols(qblk, h * dh, dh);
      TensorT<S> kh = slice_cols(kg, h * dh, dh);
      TensorT<S> vh = slice_cols(vg, h * dh, dh);
      TensorT<S> scores = scale(matmul_nt(qh, kh), inv_sqrt);

      std::vector<TensorT<S>> bias_parts;
      if (s > 0) bias_parts.push_back(pack_bias_block(slopes, h, b, s, b));
      for (int slot = 0; slot < 4; ++slot) {
        const Index blk = slots[slot];
        if (blk < 0 || (slot == 0 && global_dup)) {
          bias_parts.push_back(TensorT<S>::zeros({b, b}));
          continue;
        }
        std::vector<long> kids(pos.ids.begin() + blk * b, pos.ids.begin() + (blk + 1) * b);
        bias_parts.push_back(bialibi_span<S>(qids, kids, slopes, h));
      }
      scores = sub(scores, concat_cols(bias_parts));

      TensorT<S> probs = masked_softmax(scores, mask);
      head_outs.push_back(matmul(probs, vh));
    }
    if (ctx.audit) ctx.audit->add_unpack(static_cast<long long>(b) * gathered);
    block_outs.push_back(heads == 1 ? head_outs[0] : concat_cols(head_outs));
  }

  TensorT<S> concat = nb == 1 ? block_outs[0] : concat_rows(block_outs);
  return linear(concat, proj.o.weight, proj.o.bias);
}

}  // namespace littlebird
