#include "volsplat/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace volsplat {
namespace {

Image pattern_image(int h, int w, uint64_t seed, Real base = 0.5, Real amp = 0.3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Real> u(-amp, amp);
    Image img(h, w, 3);
    for (auto& v : img.data) v = base + u(rng);
    return img;
}

TEST(Psnr, KnownValuesAndCap) {
    Image a(8, 8, 3, 0.5), b(8, 8, 3, 0.5);
    EXPECT_EQ(psnr(a, b), 99.0);

    for (auto& v : b.data) v = 0.6;  // uniform error 0.1 -> 20 dB
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
    for (auto& v : b.data) v = 0.51;  // uniform error 0.01 -> 40 dB
    EXPECT_NEAR(psnr(a, b), 40.0, 1e-9);

    Image c(4, 4, 3);
    EXPECT_THROW(psnr(a, c), std::invalid_argument);
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
    const Image ref = pattern_image(16, 16, 3);
    std::mt19937_64 rng(4);
    std::normal_distribution<Real> n(0, 1);
    std::vector<Real> noise(ref.data.size());
    for (auto& v : noise) v = n(rng);
    Real prev = 1e9;
    for (Real amp : {0.001, 0.004, 0.016, 0.064}) {
        Image noisy = ref;
        for (size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += amp * noise[i];
        const Real p = psnr(ref, noisy);
        EXPECT_LT(p, prev);
        prev = p;
    }
}

TEST(Ssim, IdenticalSymmetricAndBounded) {
    const Image a = pattern_image(24, 24, 7);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);

    const Image b = pattern_image(24, 24, 8);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
    EXPECT_GE(ssim(a, b), -1.0);
    EXPECT_LE(ssim(a, b), 1.0);

    Image tiny(8, 8, 3);
    EXPECT_THROW(ssim(tiny, tiny), std::invalid_argument);
}

TEST(Ssim, NegativeAgainstInvertedPattern) {
    // The structure term flips sign against the negated image.
    Image a(24, 24, 3);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            for (int c = 0; c < 3; ++c)
                a.at(y, x, c) = 0.5 + 0.3 * std::sin(0.9 * x) * std::cos(1.1 * y);
    Image inv = a;
    for (auto& v : inv.data) v = 1 - v;
    EXPECT_LT(ssim(a, inv), 0.0);
}

TEST(Ssim, JointTranslationInvariance) {
    Image a = pattern_image(26, 26, 9);
    Image b = pattern_image(26, 26, 10);
    const Real base = ssim(a, b);
    // Crop both by the same offset: local statistics travel with the pair.
    Image a2(24, 24, 3), b2(24, 24, 3);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            for (int c = 0; c < 3; ++c) {
                a2.at(y, x, c) = a.at(y + 1, x + 1, c);
                b2.at(y, x, c) = b.at(y + 1, x + 1, c);
            }
    // Means over slightly different window sets differ a little; the check is
    // that the value is stable, not bit-equal.
    EXPECT_NEAR(ssim(a2, b2), base, 0.02);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
    const Image a = pattern_image(16, 16, 21);
    const Image b = pattern_image(16, 16, 22);
    Image grad;
    ssim(a, b, &grad);

    std::mt19937_64 rng(5);
    std::uniform_int_distribution<size_t> pick(0, a.data.size() - 1);
    const Real h = 1e-6;
    for (int trial = 0; trial < 40; ++trial) {
        const size_t idx = pick(rng);
        Image ap = a;
        ap.data[idx] += h;
        Image am = a;
        am.data[idx] -= h;
        const Real fd = (ssim(ap, b) - ssim(am, b)) / (2 * h);
        EXPECT_NEAR(grad.data[idx], fd, 1e-5 * std::max<Real>(1, std::abs(fd)));
    }
}

}  // namespace
}  // namespace volsplat
