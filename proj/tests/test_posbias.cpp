#include "doctest.h"

#include <cmath>
#include <limits>

#include "littlebird/gradcheck.hpp"
#include "littlebird/posbias.hpp"

using namespace littlebird;

namespace {

BiasSlopes make_slopes(double a, double b, double g) {
  BiasSlopes s;
  s.alpha = Tensor::from_values({1}, {a});
  s.beta = Tensor::from_values({1}, {b});
  s.gamma = Tensor::from_values({1}, {g});
  return s;
}

}  // namespace

TEST_CASE("alibi_distance direct formula") {
  SUBCASE("l=1") {
    Tensor d = alibi_distance<double>(1, 1.0);
    CHECK(d.at(0, 0) == 0.0);
  }
  SUBCASE("l=3, m=1") {
    Tensor d = alibi_distance<double>(3, 1.0);
    const double inf = std::numeric_limits<double>::infinity();
    const double expected[3][3] = {{0, inf, inf}, {1, 0, inf}, {2, 1, 0}};
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) CHECK(d.at(i, j) == expected[i][j]);
  }
  SUBCASE("l=4, m=0.5 entry (3,0)") {
    Tensor d = alibi_distance<double>(4, 0.5);
    CHECK(d.at(3, 0) == 1.5);
  }
}

TEST_CASE("bialibi_distance four-case formula") {
  SUBCASE("ids 0..2 with alpha=0.5, beta=1, gamma=2") {
    PositionIds pos = PositionIds::sequential(3);
    BiasSlopes s = make_slopes(0.5, 1.0, 2.0);
    Tensor d = bialibi_distance(pos, s);
    const double expected[3][3] = {{0, 0.5, 0.5}, {0.5, 0, 2}, {0.5, 1, 0}};
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) CHECK(d.at(0, i, j) == expected[i][j]);
  }
  SUBCASE("all-zero slopes give the zero matrix") {
    PositionIds pos = PositionIds::sequential(4);
    BiasSlopes s = make_slopes(0.0, 0.0, 0.0);
    Tensor d = bialibi_distance(pos, s);
    for (Index i = 0; i < d.size(); ++i) CHECK(d.array()[i] == 0.0);
  }
  SUBCASE("distances come from ids, not array indices") {
    PositionIds pos;
    pos.ids = {0, 1, 5, 6};
    pos.real.assign(4, 1);
    BiasSlopes s = make_slopes(0.25, 1.0, 2.0);
    Tensor d = bialibi_distance(pos, s);
    // scalar re-evaluation over the id vector
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j) {
        const long qi = pos.ids[i], kj = pos.ids[j];
        double want;
        if (qi == kj) want = 0.0;
        else if (qi == 0 || kj == 0) want = 0.25;
        else if (qi > kj) want = 1.0 * double(qi - kj);
        else want = 2.0 * double(kj - qi);
        CHECK(d.at(0, i, j) == want);
      }
    CHECK(d.at(0, 3, 1) == 5.0);
  }
  SUBCASE("non-increasing ids are rejected") {
    PositionIds pos;
    pos.ids = {0, 2, 2};
    pos.real.assign(3, 1);
    BiasSlopes s = make_slopes(0, 1, 1);
    CHECK_THROWS_AS(bialibi_distance(pos, s), InputError);
  }
}

TEST_CASE("bialibi translation invariance off position 0") {
  BiasSlopes s = make_slopes(0.7, 0.3, 1.1);
  PositionIds a;
  a.ids = {1, 2, 4, 9};
  a.real.assign(4, 1);
  PositionIds b;
  b.ids = {4, 5, 7, 12};  // +3 everywhere, min id still >= 1
  b.real.assign(4, 1);
  Tensor da = bialibi_distance(a, s);
  Tensor db = bialibi_distance(b, s);
  for (Index i = 0; i < da.size(); ++i) CHECK(da.array()[i] == db.array()[i]);
}

TEST_CASE("bialibi antisymmetric structure under beta/gamma swap") {
  BiasSlopes bg = make_slopes(0.9, 0.4, 1.7);
  BiasSlopes gb = make_slopes(0.9, 1.7, 0.4);
  PositionIds pos;
  pos.ids = {1, 3, 4, 8};  // all ids > 0 so the alpha rule never fires
  pos.real.assign(4, 1);
  Tensor d1 = bialibi_distance(pos, bg);
  Tensor d2 = bialibi_distance(pos, gb);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(d1.at(0, i, j) == d2.at(0, j, i));
}

TEST_CASE("bialibi with beta=m recovers the causal matrix on the strict lower triangle") {
  const double m = 0.625;
  const Index l = 6;
  Tensor causal = alibi_distance<double>(l, m);
  BiasSlopes s = make_slopes(123.0, m, 55.0);  // alpha/gamma arbitrary; they cover masked/upper cases
  Tensor d = bialibi_distance(PositionIds::sequential(l), s);
  for (Index i = 1; i < l; ++i)
    for (Index j = 1; j < i; ++j) CHECK(d.at(0, i, j) == causal.at(i, j));
  // the transposed relation: gamma=m matches the same entries mirrored
  BiasSlopes sg = make_slopes(123.0, 55.0, m);
  Tensor dg = bialibi_distance(PositionIds::sequential(l), sg);
  for (Index i = 1; i < l; ++i)
    for (Index j = 1; j < i; ++j) CHECK(dg.at(0, j, i) == causal.at(i, j));
}

TEST_CASE("pack_distance constant blocks") {
  SUBCASE("beta=1, gamma=2, b=64 gives 96 everywhere") {
    BiasSlopes s = make_slopes(0.0, 1.0, 2.0);
    Tensor d = pack_distance<double>(2, 3, s, 64);
    CHECK(d.shape() == Shape{1, 2, 3});
    for (Index i = 0; i < d.size(); ++i) CHECK(d.array()[i] == 96.0);
  }
  SUBCASE("s=0 yields an empty matrix") {
    BiasSlopes s = make_slopes(0.0, 1.0, 2.0);
    Tensor d = pack_distance<double>(0, 3, s, 64);
    CHECK(d.size() == 0);
  }
  SUBCASE("zero slopes give zero bias") {
    BiasSlopes s = make_slopes(0.0, 0.0, 0.0);
    Tensor d = pack_distance<double>(2, 3, s, 64);
    for (Index i = 0; i < d.size(); ++i) CHECK(d.array()[i] == 0.0);
  }
}

TEST_CASE("insert_virtual_padding") {
  SUBCASE("prob=0 leaves ids unchanged") {
    PositionIds pos = PositionIds::sequential(5);
    SplitMix64 rng(1);
    PositionIds out = insert_virtual_padding(pos, {1, 3}, 0.0, 100, rng);
    CHECK(out.ids == pos.ids);
  }
  SUBCASE("a fired boundary after index 1 with gap 3 maps [0,1,2,3] to [0,1,5,6]") {
    PositionIds pos = PositionIds::sequential(4);
    bool found = false;
    for (uint64_t seed = 0; seed < 512 && !found; ++seed) {
      SplitMix64 rng(seed);
      PositionIds out = insert_virtual_padding(pos, {1}, 1.0, 8, rng);
      if (out.ids[2] == 5) {
        CHECK(out.ids == std::vector<long>{0, 1, 5, 6});
        CHECK(out.real == pos.real);
        found = true;
      }
    }
    CHECK(found);
  }
  SUBCASE("insertion frequency is close to prob over many trials") {
    const int trials = 10000;
    int fired = 0;
    SplitMix64 rng(42);
    PositionIds pos = PositionIds::sequential(4);
    for (int t = 0; t < trials; ++t) {
      PositionIds out = insert_virtual_padding(pos, {1}, 0.2, 1000000, rng);
      if (out.ids[2] != pos.ids[2]) ++fired;  // gap 0 is ~1e-6 of draws
    }
    const double freq = double(fired) / trials;
    CHECK(freq > 0.18);
    CHECK(freq < 0.22);
  }
  SUBCASE("ids never decrease and order is preserved") {
    SplitMix64 rng(7);
    PositionIds pos = PositionIds::sequential(32);
    for (int t = 0; t < 50; ++t) {
      PositionIds out = insert_virtual_padding(pos, {3, 8, 15, 25}, 0.5, 64, rng);
      out.validate();
      for (Index i = 0; i < pos.size(); ++i) CHECK(out.ids[i] >= pos.ids[i]);
    }
  }
}

TEST_CASE("bialibi and pack bias gradients match finite differences") {
  ParamStore store;
  SplitMix64 rng(5);
  BiasSlopes slopes(store, "slopes", 2);
  // meaningful starting values off the init point
  slopes.alpha.array() << 0.3, -0.2;
  slopes.beta.array() << 0.5, 0.1;
  slopes.gamma.array() << -0.4, 0.8;

  PositionIds pos;
  pos.ids = {0, 1, 4, 5, 9};
  pos.real.assign(5, 1);
  Tensor w = Tensor::randn({5, 5}, rng, 1.0);
  Tensor wp = Tensor::randn({3, 5}, rng, 1.0);

  auto f = [&] {
    Tensor d = bialibi_distance(pos, slopes);
    Tensor acc = Tensor::zeros({1});
    for (Index h = 0; h < 2; ++h) {
      Tensor span = bialibi_span<double>(pos.ids, pos.ids, slopes, h);
      acc = add(acc, sum(mul(span, w)));
    }
    Tensor pd = pack_bias_block(slopes, 1, 3, 5, 16);
    acc = add(acc, sum(mul(pd, wp)));
    // route the rank-3 tensor in as well
    Tensor flat = Tensor::zeros({1});
    flat = add(flat, scale(sum(d), 0.25));
    return add(acc, flat);
  };
  GradCheckReport rep = grad_check<double>(store, f, 1e-5);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("bias cache returns identical values and tracks slope changes") {
  ParamStore store;
  BiasSlopes slopes(store, "s", 2);
  PositionIds pos = PositionIds::sequential(6);
  BiasCache cache;

  Tensor b1 = cache.head_bias(0, 1, pos, slopes);
  Tensor b2 = cache.head_bias(0, 1, pos, slopes);
  CHECK(b1.id() == b2.id());  // cache hit returns the same storage

  slopes.beta.array()[1] += 0.5;
  Tensor b3 = cache.head_bias(0, 1, pos, slopes);
  CHECK(b3.id() != b1.id());
  NoGradGuard ng;
  Tensor fresh = bialibi_span<double>(pos.ids, pos.ids, slopes, 1);
  for (Index i = 0; i < fresh.size(); ++i) CHECK(b3.array()[i] == fresh.array()[i]);
}
