#include "doctest.h"

#include <cmath>
#include <vector>

#include "littlebird/attention.hpp"
#include "littlebird/gradcheck.hpp"

using namespace littlebird;

namespace {

MultiHeadProj identity_proj(Index d) {
  MultiHeadProj proj;
  proj.heads = 1;
  Tensor eye = Tensor::zeros({d, d});
  for (Index i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  proj.q.weight = eye.clone_values();
  proj.k.weight = eye.clone_values();
  proj.v.weight = eye.clone_values();
  proj.o.weight = eye.clone_values();
  proj.q.bias = Tensor::zeros({d});
  proj.k.bias = Tensor::zeros({d});
  proj.v.bias = Tensor::zeros({d});
  proj.o.bias = Tensor::zeros({d});
  return proj;
}

MultiHeadProj random_proj(Index d, Index heads, SplitMix64& rng) {
  MultiHeadProj proj;
  proj.heads = heads;
  proj.q.weight = Tensor::randn({d, d}, rng, 0.3);
  proj.k.weight = Tensor::randn({d, d}, rng, 0.3);
  proj.v.weight = Tensor::randn({d, d}, rng, 0.3);
  proj.o.weight = Tensor::randn({d, d}, rng, 0.3);
  proj.q.bias = Tensor::randn({d}, rng, 0.05);
  proj.k.bias = Tensor::randn({d}, rng, 0.05);
  proj.v.bias = Tensor::randn({d}, rng, 0.05);
  proj.o.bias = Tensor::randn({d}, rng, 0.05);
  return proj;
}

BiasSlopes random_slopes(Index heads, SplitMix64& rng) {
  BiasSlopes s;
  s.alpha = Tensor::randn({heads}, rng, 0.3);
  s.beta = Tensor::randn({heads}, rng, 0.1);
  s.gamma = Tensor::randn({heads}, rng, 0.1);
  return s;
}

BiasSlopes zero_slopes(Index heads) {
  BiasSlopes s;
  s.alpha = Tensor::zeros({heads});
  s.beta = Tensor::zeros({heads});
  s.gamma = Tensor::zeros({heads});
  return s;
}

/// Scalar triple-loop attention over one head group, used as the oracle.
Tensor attention_oracle(const MultiHeadProj& proj, const Tensor& x, const Tensor& c,
                        const Tensor* bias3, const std::vector<uint8_t>* key_valid) {
  const Index l = x.rows(), m = c.rows(), d = x.cols();
  const Index heads = proj.heads, dh = d / heads;
  auto project = [&](const Tensor& inp, const LinearMap& map) {
    Tensor out = Tensor::zeros({inp.rows(), d});
    for (Index i = 0; i < inp.rows(); ++i)
      for (Index j = 0; j < d; ++j) {
        double v = map.bias.at(j);
        for (Index k = 0; k < d; ++k) v += inp.at(i, k) * map.weight.at(k, j);
        out.at(i, j) = v;
      }
    return out;
  };
  Tensor q = project(x, proj.q), k = project(c, proj.k), v = project(c, proj.v);
  Tensor mixed = Tensor::zeros({l, d});
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < l; ++i) {
      std::vector<double> scores(m, 0.0);
      double mx = -1e300;
      bool any = false;
      for (Index j = 0; j < m; ++j) {
        if (key_valid && !(*key_valid)[j]) continue;
        double s = 0;
        for (Index e = 0; e < dh; ++e) s += q.at(i, h * dh + e) * k.at(j, h * dh + e);
        s /= std::sqrt(double(dh));
        if (bias3) s -= bias3->at(h, i, j);
        scores[j] = s;
        mx = std::max(mx, s);
        any = true;
      }
      double denom = 0;
      for (Index j = 0; j < m; ++j)
        if (!key_valid || (*key_valid)[j]) denom += std::exp(scores[j] - mx);
      for (Index e = 0; e < dh; ++e) {
        double acc = 0;
        if (any)
          for (Index j = 0; j < m; ++j)
            if (!key_valid || (*key_valid)[j])
              acc += std::exp(scores[j] - mx) / denom * v.at(j, h * dh + e);
        mixed.at(i, h * dh + e) = acc;
      }
    }
  }
  Tensor out = Tensor::zeros({l, d});
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j < d; ++j) {
      double acc = proj.o.bias.at(j);
      for (Index e = 0; e < d; ++e) acc += mixed.at(i, e) * proj.o.weight.at(e, j);
      out.at(i, j) = acc;
    }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.array()[i] - b.array()[i]));
  return m;
}

}  // namespace

TEST_CASE("full_attention identity maps with a single context row") {
  MultiHeadProj proj = identity_proj(3);
  Tensor x = Tensor::from_values({1, 3}, {0.1, 0.2, 0.3});
  Tensor c = Tensor::from_values({1, 3}, {5.0, -2.0, 7.0});
  Tensor out = full_attention(proj, x, c, nullptr, nullptr);
  for (Index j = 0; j < 3; ++j) CHECK(out.at(0, j) == doctest::Approx(c.at(0, j)).epsilon(1e-12));
}

TEST_CASE("full_attention with uniform keys averages the values") {
  SplitMix64 rng(1);
  MultiHeadProj proj = identity_proj(2);
  Tensor x = Tensor::randn({3, 2}, rng, 1.0);
  Tensor c = Tensor::zeros({4, 2});
  for (Index i = 0; i < 4; ++i) {
    c.at(i, 0) = double(i);   // distinct values...
    c.at(i, 1) = -double(i);
  }
  // ...but identical keys: zero out the key projection so all keys coincide.
  proj.k.weight = Tensor::zeros({2, 2});
  Tensor out = full_attention(proj, x, c, nullptr, nullptr);
  const double mean0 = (0 + 1 + 2 + 3) / 4.0;
  for (Index i = 0; i < 3; ++i) {
    CHECK(out.at(i, 0) == doctest::Approx(mean0).epsilon(1e-12));
    CHECK(out.at(i, 1) == doctest::Approx(-mean0).epsilon(1e-12));
  }
}

TEST_CASE("full_attention matches the scalar oracle") {
  SplitMix64 rng(42);
  const Index l = 6, m = 5, d = 8, heads = 2;
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  Tensor c = Tensor::randn({m, d}, rng, 1.0);
  BiasSlopes slopes = random_slopes(heads, rng);
  PositionIds pos = PositionIds::sequential(std::max(l, m));

  SUBCASE("no bias, no mask") {
    Tensor got = full_attention(proj, x, c, nullptr, nullptr);
    Tensor want = attention_oracle(proj, x, c, nullptr, nullptr);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
  SUBCASE("with bias and a masked key") {
    // bias over l x m built from id spans
    Tensor bias = Tensor::zeros({heads, l, m});
    for (Index h = 0; h < heads; ++h) {
      NoGradGuard ng;
      std::vector<long> qids(pos.ids.begin(), pos.ids.begin() + l);
      std::vector<long> kids(pos.ids.begin(), pos.ids.begin() + m);
      Tensor span = bialibi_span<double>(qids, kids, slopes, h);
      bias.plane(h) = span.mat();
    }
    std::vector<uint8_t> valid(m, 1);
    valid[2] = 0;
    Tensor got = full_attention(proj, x, c, &bias, &valid);
    Tensor want = attention_oracle(proj, x, c, &bias, &valid);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("full_attention zero row convention when every key is masked") {
  MultiHeadProj proj = identity_proj(2);
  proj.o.bias = Tensor::from_values({2}, {0.0, 0.0});
  Tensor x = Tensor::from_values({1, 2}, {1.0, 1.0});
  Tensor c = Tensor::from_values({2, 2}, {3.0, 4.0, 5.0, 6.0});
  std::vector<uint8_t> valid = {0, 0};
  Tensor out = full_attention(proj, x, c, nullptr, &valid);
  CHECK(out.at(0, 0) == 0.0);
  CHECK(out.at(0, 1) == 0.0);
}

TEST_CASE("pack_attention") {
  SUBCASE("uniform input rows collapse to that row's projection") {
    SplitMix64 rng(3);
    MultiHeadProj proj = random_proj(4, 2, rng);
    Tensor p = Tensor::randn({1, 4}, rng, 1.0);
    Tensor x = Tensor::zeros({6, 4});
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 4; ++j) x.at(i, j) = 0.3 * double(j) - 0.1;
    Tensor out = pack_attention(proj, p, x, nullptr);
    // every key/value row identical -> attended row equals V of that row,
    // then the output projection
    Tensor want = attention_oracle(proj, p, x, nullptr, nullptr);
    CHECK(max_abs_diff(out, want) < 1e-12);
    // and all probability mass sums to a single shared value row: any query
    // yields the same output row
    Tensor p2 = Tensor::randn({1, 4}, rng, 1.0);
    Tensor out2 = pack_attention(proj, p2, x, nullptr);
    CHECK(max_abs_diff(out, out2) < 1e-10);
  }
  SUBCASE("masked suffix of X contributes zero probability") {
    SplitMix64 rng(5);
    MultiHeadProj proj = random_proj(4, 1, rng);
    Tensor p = Tensor::randn({2, 4}, rng, 1.0);
    Tensor x = Tensor::randn({8, 4}, rng, 1.0);
    std::vector<uint8_t> valid(8, 1);
    valid[6] = valid[7] = 0;
    AttnCapture cap;
    AttnContext ctx;
    ctx.capture = &cap;
    pack_attention(proj, p, x, &valid, ctx);
    REQUIRE(cap.probs.size() == 1);
    for (Index r = 0; r < 2; ++r) {
      CHECK(cap.probs[0].at(r, 6) == 0.0);
      CHECK(cap.probs[0].at(r, 7) == 0.0);
    }
  }
  SUBCASE("random pack matches the scalar oracle") {
    SplitMix64 rng(7);
    MultiHeadProj proj = random_proj(8, 2, rng);
    Tensor p = Tensor::randn({4, 8}, rng, 1.0);
    Tensor x = Tensor::randn({32, 8}, rng, 1.0);
    Tensor got = pack_attention(proj, p, x, nullptr);
    Tensor want = attention_oracle(proj, p, x, nullptr, nullptr);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("usw dense degenerates to full attention when the mask covers everything") {
  SplitMix64 rng(11);
  const Index l = 12, d = 8, heads = 2;
  AttentionSpec spec;
  spec.heads = heads;
  spec.head_dim = d / heads;
  spec.block = l;  // one block: self covers all
  spec.pack = 0;
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  PositionIds pos = PositionIds::sequential(l);

  SUBCASE("with distance bias") {
    BiasSlopes slopes = random_slopes(heads, rng);
    Tensor c_p;
    Tensor got = usw_attention_dense(proj, x, c_p, pos, slopes, spec);
    Tensor bias = bialibi_distance(pos, slopes);
    Tensor want = full_attention(proj, x, x, &bias, nullptr);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
  SUBCASE("zero slopes reduce to unbiased self attention") {
    BiasSlopes slopes = zero_slopes(heads);
    Tensor c_p;
    Tensor got = usw_attention_dense(proj, x, c_p, pos, slopes, spec);
    Tensor want = full_attention(proj, x, x, nullptr, nullptr);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("usw dense joint probabilities over pack and allowed keys sum to one") {
  SplitMix64 rng(13);
  const Index l = 128, d = 8, heads = 2, b = 16, s = 8;
  AttentionSpec spec;
  spec.heads = heads;
  spec.head_dim = d / heads;
  spec.block = b;
  spec.pack = s;
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  Tensor c_p = Tensor::randn({s, d}, rng, 1.0);
  BiasSlopes slopes = random_slopes(heads, rng);
  PositionIds pos = PositionIds::sequential(l);
  AttnCapture cap;
  AttnContext ctx;
  ctx.capture = &cap;
  usw_attention_dense(proj, x, c_p, pos, slopes, spec, ctx);
  REQUIRE(cap.probs.size() == size_t(heads));
  for (const Tensor& probs : cap.probs)
    for (Index q = 0; q < l; ++q) {
      double sum = 0;
      for (Index c = 0; c < s + l; ++c) sum += probs.at(q, c);
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("edge block zero has no left neighbor and those keys get zero probability") {
  SplitMix64 rng(17);
  const Index l = 256, d = 8, heads = 1, b = 32, s = 16;
  AttentionSpec spec{heads, d / heads, b, s, 0};
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  Tensor c_p = Tensor::randn({s, d}, rng, 1.0);
  BiasSlopes slopes = random_slopes(heads, rng);
  PositionIds pos = PositionIds::sequential(l);
  AttnCapture cap;
  AttnContext ctx;
  ctx.capture = &cap;
  usw_attention_dense(proj, x, c_p, pos, slopes, spec, ctx);
  // queries in block 0 may reach only blocks 0 and 1 among the X keys
  for (Index q = 0; q < b; ++q)
    for (Index k = 2 * b; k < l; ++k) CHECK(cap.probs[0].at(q, s + k) == 0.0);
}

TEST_CASE("sparsity mask allows at most 4b real keys per query") {
  SplitMix64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const Index b = 8 + 8 * (trial % 3);
    const Index l = b * (3 + trial % 5);
    AttentionSpec spec{1, 1, b, 0, 0};
    PositionIds pos = PositionIds::sequential(l);
    // random pad suffix
    for (Index i = l - rng.uniform_int(0, l / 4); i < l; ++i) pos.real[i] = 0;
    SparsityMask mask(pos, spec);
    for (Index q = 0; q < l; ++q) CHECK(mask.allowed_real_count(pos, q) <= 4 * b);
  }
}

TEST_CASE("blocked equals dense over randomized configurations") {
  SplitMix64 rng(23);
  const Index ls[] = {64, 128, 192};
  const Index bs[] = {16, 32, 64};
  const Index ss[] = {0, 16, 64};
  int cases = 0;
  for (Index l : ls)
    for (Index b : bs)
      for (Index s : ss) {
        if (l % b != 0) continue;
        const Index heads = (cases % 2 == 0) ? 1 : 4;
        const Index d = heads * 4;
        AttentionSpec spec{heads, 4, b, s, 0};
        MultiHeadProj proj = random_proj(d, heads, rng);
        Tensor x = Tensor::randn({l, d}, rng, 1.0);
        Tensor c_p = s > 0 ? Tensor::randn({s, d}, rng, 1.0) : Tensor();
        BiasSlopes slopes = random_slopes(heads, rng);
        PositionIds pos = PositionIds::sequential(l);
        // random pad suffix shorter than one block
        for (Index i = l - rng.uniform_int(0, b - 1); i < l; ++i) pos.real[i] = 0;

        Tensor dense = usw_attention_dense(proj, x, c_p, pos, slopes, spec);
        ScoreAudit audit;
        AttnContext ctx;
        ctx.audit = &audit;
        Tensor blocked = usw_attention_blocked(proj, x, c_p, pos, slopes, spec, ctx);
        CHECK(max_abs_diff(dense, blocked) < 1e-8);
        CHECK(audit.unpack_scores <= l * (4 * b + s));
        ++cases;
      }
  CHECK(cases >= 15);
}

TEST_CASE("blocked path locality is bit-exact outside the allowed key set") {
  SplitMix64 rng(29);
  const Index l = 128, d = 8, heads = 2, b = 16, s = 8;
  AttentionSpec spec{heads, d / heads, b, s, 0};
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  Tensor c_p = Tensor::randn({s, d}, rng, 1.0);  // pack frozen across both runs
  BiasSlopes slopes = random_slopes(heads, rng);
  PositionIds pos = PositionIds::sequential(l);

  Tensor out1 = usw_attention_blocked(proj, x, c_p, pos, slopes, spec);
  // query block 3 may reach blocks {0, 2, 3, 4}; perturb a token in block 6
  Tensor x2 = x.clone_values();
  x2.at(6 * b + 3, 2) += 17.0;
  Tensor out2 = usw_attention_blocked(proj, x2, c_p, pos, slopes, spec);
  for (Index q = 3 * b; q < 4 * b; ++q)
    for (Index j = 0; j < d; ++j) CHECK(out1.at(q, j) == out2.at(q, j));
}

TEST_CASE("complexity bound arithmetic") {
  AttentionSpec spec{1, 1, 64, 64, 0};
  CHECK(complexity_bound(spec, 4096) == 1572864);
  AttentionSpec no_pack{1, 1, 64, 0, 0};
  CHECK(complexity_bound(no_pack, 1024) == 1024 * 4 * 64);
}

TEST_CASE("measured blocked score count stays within the bound") {
  SplitMix64 rng(31);
  const Index l = 512, b = 64, s = 64, heads = 2, d = 8;
  AttentionSpec spec{heads, d / heads, b, s, 0};
  MultiHeadProj proj = random_proj(d, heads, rng);
  Tensor x = Tensor::randn({l, d}, rng, 1.0);
  Tensor p0 = Tensor::randn({s, d}, rng, 1.0);
  BiasSlopes slopes = random_slopes(heads, rng);
  PositionIds pos = PositionIds::sequential(l);

  ScoreAudit audit;
  AttnContext ctx;
  ctx.audit = &audit;
  Tensor c_p = pack_attention(proj, p0, x, nullptr, ctx);
  usw_attention_blocked(proj, x, c_p, pos, slopes, spec, ctx);
  CHECK(audit.unpack_scores <= l * (4 * b + s));
  CHECK(audit.total() <= complexity_bound(spec, l));
  CHECK(audit.pack_scores == l * s);
}

TEST_CASE("usw gradients match finite differences through both paths") {
  SplitMix64 rng(37);
  const Index l = 24, d = 6, heads = 2, b = 8, s = 4;
  AttentionSpec spec{heads, d / heads, b, s, 0};
  PositionIds pos = PositionIds::sequential(l);

  for (AttnPathChoice : {0, 1}) {
    (void)AttnPathChoice;
  }
  for (int path = 0; path < 2; ++path) {
    ParamStore store;
    MultiHeadProj pack_proj(store, "pack", d, heads, rng, 0.3);
    MultiHeadProj unpack_proj(store, "unpack", d, heads, rng, 0.3);
    BiasSlopes slopes(store, "slopes", heads);
    Tensor p0 = store.add("p0", Tensor::randn({s, d}, rng, 0.5));
    Tensor x = store.add("x", Tensor::randn({l, d}, rng, 0.5));
    SplitMix64 wrng(101);
    Tensor w = Tensor::randn({l, d}, wrng, 1.0);

    auto f = [&] {
      Tensor c_p = pack_attention(pack_proj, p0, x, nullptr);
      Tensor out = path == 0 ? usw_attention_dense(unpack_proj, x, c_p, pos, slopes, spec)
                             : usw_attention_blocked(unpack_proj, x, c_p, pos, slopes, spec);
      return sum(mul(out, w));
    };
    GradCheckReport rep = grad_check<double>(store, f, 1e-5);
    CAPTURE(path);
    CAPTURE(rep.worst_param);
    CHECK(rep.max_rel_err < 1e-4);
  }
}
