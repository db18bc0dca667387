#include "dgsc/rng.hpp"

#include <cmath>
#include <numbers>

namespace dgsc {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

std::uint64_t purpose_tag(std::string_view purpose) {
  // FNV-1a followed by a splitmix finalizer.
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return splitmix64(h);
}

RngStream::RngStream(std::uint64_t seed, std::string_view purpose, std::uint64_t index)
    : RngStream(seed, purpose_tag(purpose), index) {}

RngStream::RngStream(std::uint64_t seed, std::uint64_t purpose_hash, std::uint64_t index)
    : seed_(seed), stream_(splitmix64(purpose_hash ^ splitmix64(index))) {}

RngStream RngStream::substream(std::uint64_t sub) const {
  RngStream s = *this;
  s.stream_ = splitmix64(stream_ ^ splitmix64(sub + 0x632BE59BD9B4E019ull));
  s.block_ = 0;
  s.lane_ = 4;
  return s;
}

void RngStream::refill() {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                            static_cast<std::uint32_t>(seed_ >> 32)};
  buf_ = philox4x32(ctr, key);
  lane_ = 0;
}

std::uint32_t RngStream::next_u32() {
  if (lane_ == 4) refill();
  const std::uint32_t v = buf_[lane_++];
  if (lane_ == 4) ++block_;
  return v;
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t lo = next_u32();
  const std::uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double RngStream::uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  // Lemire's multiply-shift with rejection.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  std::uint64_t low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

void RngStream::seek(std::uint64_t position) {
  block_ = position / 4;
  const unsigned lane = static_cast<unsigned>(position % 4);
  if (lane == 0) {
    lane_ = 4;
  } else {
    refill();
    lane_ = lane;
  }
}

}  // namespace dgsc
