#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace volsplat {

// 64-bit math everywhere by default. Renderers can be rebuilt in 32-bit
// with -DVOLSPLAT_REAL_FLOAT for throughput experiments; the test suites
// assume the 64-bit build.
#if defined(VOLSPLAT_REAL_FLOAT)
using Real = float;
#else
using Real = double;
#endif

using Vec2 = Eigen::Matrix<Real, 2, 1>;
using Vec3 = Eigen::Matrix<Real, 3, 1>;
using Vec4 = Eigen::Matrix<Real, 4, 1>;
using Mat2 = Eigen::Matrix<Real, 2, 2>;
using Mat3 = Eigen::Matrix<Real, 3, 3>;
using Quat = Eigen::Quaternion<Real>;

/// Row-major H x W x C buffer of Real, the exchange type for all renderers
/// and metrics. Values are nominal [0,1] but not clamped in storage.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<Real> data;

    Image() = default;
    Image(int h, int w, int c, Real fill = Real(0))
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, fill) {}

    Real& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    Real at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

/// Ray through the scene, direction kept unit length by construction.
struct Ray {
    Vec3 origin;
    Vec3 direction;
};

}  // namespace volsplat
