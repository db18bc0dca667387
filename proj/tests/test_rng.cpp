#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "dgsc/rng.hpp"

using dgsc::RngStream;
using dgsc::philox4x32;

TEST_CASE("philox4x32-10 known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(philox4x32({0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and keyed") {
  RngStream a(7, "train-batch", 3), b(7, "train-batch", 3);
  RngStream c(7, "train-batch", 4), d(7, "eval", 3), e(8, "train-batch", 3);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
    CHECK(x != d.next_u64());
    CHECK(x != e.next_u64());
  }
}

TEST_CASE("seek reconstructs any position") {
  RngStream a(1, "x");
  std::vector<std::uint32_t> words;
  for (int i = 0; i < 23; ++i) words.push_back(a.next_u32());
  CHECK(a.position() == 23);
  for (std::uint64_t p : {0u, 1u, 4u, 5u, 17u, 22u}) {
    RngStream b(1, "x");
    b.seek(p);
    CHECK(b.position() == p);
    CHECK(b.next_u32() == words[p]);
  }
  RngStream n(1, "x");
  n.normal();
  CHECK(n.position() == 4);
  n.uniform();
  CHECK(n.position() == 6);
}

TEST_CASE("substreams do not depend on parent position") {
  RngStream a(3, "sgld-noise", 2);
  const auto s1 = a.substream(9).next_u64();
  a.next_u64();
  a.normal();
  CHECK(a.substream(9).next_u64() == s1);
  CHECK(a.substream(10).next_u64() != s1);
}

TEST_CASE("uniform, normal, below, rademacher moments") {
  RngStream r(11, "moments");
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, sr = 0;
  double umin = 1, umax = 0;
  std::vector<int> counts(7, 0);
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    umin = std::min(umin, u);
    umax = std::max(umax, u);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
    sr += r.rademacher();
    counts[r.below(7)]++;
  }
  CHECK(umin > 0.0);
  CHECK(umax < 1.0);
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
  CHECK(std::abs(sr / n) < 0.01);
  for (int c : counts) CHECK(std::abs(c - n / 7.0) < 5 * std::sqrt(n / 7.0));
}

TEST_CASE("purpose tags are distinct") {
  std::set<std::uint64_t> tags;
  for (const char* p : {"train-batch", "eval", "sgld-noise", "sgld-batch", "init", "task-pool"}) {
    tags.insert(dgsc::purpose_tag(p));
  }
  CHECK(tags.size() == 6);
}
