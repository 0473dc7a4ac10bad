#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace protolab {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Log floor used by every loss.
inline constexpr double kLogEps = 1e-12;

// Error taxonomy. Each carries a short kind tag for machine-parsable CLI output.
struct Error : std::runtime_error {
  Error(std::string kind, const std::string& what) : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};
struct InfeasibleMatchError : Error {
  explicit InfeasibleMatchError(const std::string& what) : Error("infeasible-match", what) {}
};
struct InvariantViolation : Error {
  explicit InvariantViolation(const std::string& what) : Error("invariant", what) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error("numerical", what) {}
};
struct ProjectionError : Error {
  explicit ProjectionError(const std::string& what) : Error("projection", what) {}
};
struct DataError : Error {
  explicit DataError(const std::string& what) : Error("data", what) {}
};

enum class Variant { protovit, pipnet, cbm };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::protovit: return "protovit";
    case Variant::pipnet: return "pipnet";
    case Variant::cbm: return "cbm";
  }
  return "unknown";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "protovit") return Variant::protovit;
  if (s == "pipnet") return Variant::pipnet;
  if (s == "cbm") return Variant::cbm;
  throw ConfigError("unknown variant '" + s + "'");
}

// One image: channels stacked vertically, each channel a height x width block.
// pixels(c * height + r, col) addresses channel c, row r.
struct ImageSample {
  int channels = 3;
  int height = 0;
  int width = 0;
  Matrix<float> pixels;  // [channels*height x width], values in [0,1]
  int label = 0;
  std::string id;

  float& at(int c, int r, int col) { return pixels(c * height + r, col); }
  float at(int c, int r, int col) const { return pixels(c * height + r, col); }

  static ImageSample zeros(int channels, int height, int width, int label = 0) {
    ImageSample x;
    x.channels = channels;
    x.height = height;
    x.width = width;
    x.pixels = Matrix<float>::Zero(channels * height, width);
    x.label = label;
    return x;
  }
};

// Pixel rectangle, half-open: [x0, x1) x [y0, y1).
struct Rect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool overlaps(const Rect& o) const {
    return !empty() && !o.empty() && x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

}  // namespace protolab
