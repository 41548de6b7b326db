#pragma once

#include "volsplat/types.hpp"

#include <cmath>
#include <stdexcept>

namespace volsplat {

/// Activation mapping the stored raw data term to the positive weight theta.
/// Sigmoid is the 3DGS convention (theta in (0,1)); SoftplusBeta2 is used by
/// the self-attenuation variant, where theta must be unbounded above.
enum class ThetaActivation { Sigmoid, SoftplusBeta2 };

inline Real activate_theta(Real raw, ThetaActivation kind) {
    switch (kind) {
        case ThetaActivation::Sigmoid:
            return Real(1) / (Real(1) + std::exp(-raw));
        case ThetaActivation::SoftplusBeta2:
            // ln(1 + e^(2x)) / 2, evaluated without overflow for large x.
            if (raw > Real(15)) return raw + std::log1p(std::exp(-2 * raw)) / 2;
            return std::log1p(std::exp(2 * raw)) / 2;
    }
    return Real(0);
}

inline Real activate_theta_grad(Real raw, ThetaActivation kind) {
    switch (kind) {
        case ThetaActivation::Sigmoid: {
            const Real s = activate_theta(raw, ThetaActivation::Sigmoid);
            return s * (Real(1) - s);
        }
        case ThetaActivation::SoftplusBeta2:
            return Real(1) / (Real(1) + std::exp(-2 * raw));
    }
    return Real(0);
}

/// Inverse activation; throws when the target value is outside the codomain
/// (e.g. a sigmoid target >= 1).
inline Real activate_theta_inverse(Real value, ThetaActivation kind) {
    switch (kind) {
        case ThetaActivation::Sigmoid:
            if (!(value > Real(0) && value < Real(1)))
                throw std::invalid_argument("sigmoid inverse needs value in (0,1)");
            return std::log(value / (Real(1) - value));
        case ThetaActivation::SoftplusBeta2:
            if (!(value > Real(0)))
                throw std::invalid_argument("softplus inverse needs value > 0");
            // x = ln(e^(2y) - 1) / 2
            if (value > Real(15)) return value + std::log1p(-std::exp(-2 * value)) / 2;
            return std::log(std::expm1(2 * value)) / 2;
    }
    return Real(0);
}

}  // namespace volsplat
