#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dgsc {

/// One named, contiguous block of a flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const;
};

/// Ordered map from segment names to (offset, shape) within a flat vector.
class Layout {
 public:
  Layout() = default;

  /// Appends a segment directly after the last one.
  Layout& add(std::string name, std::vector<std::size_t> shape);

  std::size_t size() const { return total_; }
  std::span<const Segment> segments() const { return segments_; }
  const Segment& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  /// Segment holding flat coordinate `index`.
  const Segment& segment_of(std::size_t index) const;

  /// Throws ShapeError unless segments are contiguous, non-overlapping, and
  /// sum to size().
  void validate() const;

  bool operator==(const Layout& other) const;

 private:
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

/// Flat parameter values plus their layout.
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(Layout layout);
  ParameterVector(Layout layout, std::vector<double> values);

  const Layout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;

  /// Throws NumericError naming the first segment holding a non-finite value.
  void check_finite() const;

 private:
  Layout layout_;
  std::vector<double> values_;
};

/// Name of the segment holding the first non-finite entry, or empty.
std::string first_nonfinite_segment(const Layout& layout, std::span<const double> values);

}  // namespace dgsc
