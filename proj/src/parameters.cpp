#include "dgsc/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "dgsc/errors.hpp"

namespace dgsc {

std::size_t Segment::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Layout& Layout::add(std::string name, std::vector<std::size_t> shape) {
  if (contains(name)) throw ShapeError("duplicate segment name '" + name + "'");
  Segment seg{std::move(name), total_, std::move(shape)};
  total_ += seg.size();
  segments_.push_back(std::move(seg));
  return *this;
}

const Segment& Layout::at(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw ShapeError("no parameter segment named '" + std::string(name) + "'");
}

bool Layout::contains(std::string_view name) const {
  return std::any_of(segments_.begin(), segments_.end(),
                     [&](const Segment& s) { return s.name == name; });
}

const Segment& Layout::segment_of(std::size_t index) const {
  auto it = std::upper_bound(segments_.begin(), segments_.end(), index,
                             [](std::size_t i, const Segment& s) { return i < s.offset; });
  if (it == segments_.begin() || index >= total_) {
    throw ShapeError("parameter index " + std::to_string(index) + " out of range");
  }
  return *std::prev(it);
}

void Layout::validate() const {
  std::size_t expected = 0;
  for (const auto& s : segments_) {
    if (s.offset != expected) {
      throw ShapeError("segment '" + s.name + "' is not contiguous with its predecessor");
    }
    expected += s.size();
  }
  if (expected != total_) throw ShapeError("layout size does not match its segments");
}

bool Layout::operator==(const Layout& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.offset != b.offset || a.shape != b.shape) return false;
  }
  return true;
}

ParameterVector::ParameterVector(Layout layout)
    : layout_(std::move(layout)), values_(layout_.size(), 0.0) {}

ParameterVector::ParameterVector(Layout layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_.size()) {
    throw ShapeError("parameter count " + std::to_string(values_.size()) +
                     " does not match layout size " + std::to_string(layout_.size()));
  }
}

std::span<double> ParameterVector::segment(std::string_view name) {
  const auto& s = layout_.at(name);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParameterVector::segment(std::string_view name) const {
  const auto& s = layout_.at(name);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

void ParameterVector::check_finite() const {
  const std::string bad = first_nonfinite_segment(layout_, values_);
  if (!bad.empty()) throw NumericError(bad, "non-finite parameter value");
}

std::string first_nonfinite_segment(const Layout& layout, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      return i < layout.size() ? layout.segment_of(i).name : std::string("index ") + std::to_string(i);
    }
  }
  return {};
}

}  // namespace dgsc
