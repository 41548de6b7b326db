#pragma once

#include "volsplat/activation.hpp"
#include "volsplat/gaussian.hpp"

#include <vector>

namespace volsplat {

/// Ordered collection of Gaussians plus the background color and the
/// activation that resolves theta_raw into the data term.
struct Scene {
    std::vector<Gaussian3D> gaussians;
    Vec3 background = Vec3::Zero();
    ThetaActivation theta_activation = ThetaActivation::Sigmoid;

    size_t size() const { return gaussians.size(); }
    Real theta(size_t i) const {
        return activate_theta(gaussians[i].theta_raw, theta_activation);
    }
};

}  // namespace volsplat
