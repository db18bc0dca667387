#include "dgsc/checkpoint_io.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[4] = {'D', 'G', 'S', 'C'};

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_doubles(const std::vector<double>& v) {
    const auto* p = reinterpret_cast<const char*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size() * sizeof(double));
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::vector<char>& bytes() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t end, std::string path)
      : buf_(buf), end_(end), path_(std::move(path)) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<double> get_doubles(std::uint64_t n) {
    if (n > (end_ - pos_) / sizeof(double)) fail("truncated parameter block");
    std::vector<double> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw IntegrityError("checkpoint " + path_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) fail("truncated payload");
  }
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

const char* const kKnownStreams[] = {"train-batch", "eval", "sgld-batch", "sgld-noise"};

}  // namespace

std::string checkpoint_filename(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%09llu.dgsc", static_cast<unsigned long long>(step));
  return buf;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, 4);
  w.put(kCheckpointVersion);
  w.put(c.model_digest);
  w.put(c.run_digest);
  w.put(c.step);
  w.put(static_cast<std::uint32_t>(c.has_optimizer ? 1u : 0u));
  w.put(static_cast<std::uint64_t>(c.params.size()));
  w.put(static_cast<std::uint64_t>(c.rng_positions.size()));
  for (const auto& [name, pos] : c.rng_positions) {
    w.put(purpose_tag(name));
    w.put(pos);
  }
  w.put_doubles(c.params);
  if (c.has_optimizer) {
    if (c.adam.m.size() != c.params.size() || c.adam.v.size() != c.params.size()) {
      throw ShapeError("optimizer state length does not match parameters");
    }
    w.put_doubles(c.adam.m);
    w.put_doubles(c.adam.v);
    w.put(c.adam.t);
  }
  const std::uint64_t crc = crc64(w.bytes().data(), w.bytes().size());
  w.put(crc);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_model_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (buf.size() < 4 + 4 + 8) throw IntegrityError("checkpoint " + name + ": file too short");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw IntegrityError("checkpoint " + name + ": bad magic");
  const std::size_t payload = buf.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + payload, 8);
  if (crc64(buf.data(), payload) != stored) {
    throw IntegrityError("checkpoint " + name + ": checksum mismatch");
  }
  Reader r(buf, payload, name);
  r.get<std::array<char, 4>>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IntegrityError("checkpoint " + name + ": unsupported format version " + std::to_string(version));
  }
  Checkpoint c;
  c.model_digest = r.get<std::uint64_t>();
  c.run_digest = r.get<std::uint64_t>();
  c.step = r.get<std::uint64_t>();
  const auto flags = r.get<std::uint32_t>();
  c.has_optimizer = flags & 1u;
  const auto n = r.get<std::uint64_t>();
  const auto n_rng = r.get<std::uint64_t>();
  if (n_rng > 1024) r.fail("implausible stream count");
  for (std::uint64_t i = 0; i < n_rng; ++i) {
    const auto tag = r.get<std::uint64_t>();
    const auto pos = r.get<std::uint64_t>();
    std::string stream = "stream-" + digest_hex(tag);
    for (const char* known : kKnownStreams)
      if (purpose_tag(known) == tag) stream = known;
    c.rng_positions.emplace_back(stream, pos);
  }
  c.params = r.get_doubles(n);
  if (c.has_optimizer) {
    c.adam.m = r.get_doubles(n);
    c.adam.v = r.get_doubles(n);
    c.adam.t = r.get<std::uint64_t>();
  }
  if (r.pos() != payload) r.fail("trailing bytes after payload");
  if (expected_model_digest && *expected_model_digest != c.model_digest) {
    throw CompatibilityError("checkpoint " + name + " has model digest " + digest_hex(c.model_digest) +
                             " but the configuration expects " + digest_hex(*expected_model_digest));
  }
  return c;
}

}  // namespace dgsc
