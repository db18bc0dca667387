#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace dgsc {

/// Philox4x32-10 block function (Salmon et al., Random123). Pure function of
/// (counter, key); used as the root of every random stream in the project.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// Stable 64-bit hash of a purpose tag. Used to separate streams that share a
/// seed ("train", "sgld-noise", "eval", ...).
std::uint64_t purpose_tag(std::string_view purpose);

/// Counter-based random stream keyed by (seed, purpose, index).
///
/// Two streams with different keys never share output blocks; a stream's
/// output depends only on its key and on how many values have been drawn from
/// it, so it can be reconstructed at any position without replaying history.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);
  RngStream(std::uint64_t seed, std::uint64_t purpose_hash, std::uint64_t index);

  /// Derived stream for a sub-index, e.g. (chain, step). Independent of the
  /// parent's position.
  RngStream substream(std::uint64_t sub) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller on two 53-bit uniforms. Consumes exactly
  /// four words, so positions stay a pure function of the draw count.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// +1 or -1 with equal probability.
  double rademacher() { return (next_u32() & 1u) ? 1.0 : -1.0; }

  std::uint64_t position() const { return block_ * 4 + (lane_ == 4 ? 0 : lane_); }
  /// Jump to an absolute position (number of 32-bit words consumed).
  void seek(std::uint64_t position);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  unsigned lane_ = 4;
  std::array<std::uint32_t, 4> buf_{};
};

}  // namespace dgsc
