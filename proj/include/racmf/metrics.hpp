#pragma once

// Image-quality metrics, concordance, radiomic texture features and the
// noise power spectrum.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "racmf/grid.hpp"

namespace racmf {

/// PSNR assigned to an exact match (MSE == 0).
constexpr double kPsnrCapDb = 60.0;
/// Dynamic range of normalized [-1, 1] images.
constexpr double kNormalizedRange = 2.0;

struct PsnrResult {
    double db = 0.0;
    bool exact_match = false;
};

PsnrResult psnr(const Image& x, const Image& y, double max_value);
/// PSNR over pixels where `mask` is nonzero.
PsnrResult psnr_masked(const Image& x, const Image& y, const Mask& mask, double max_value);

/// Local SSIM map (11x11 Gaussian window, sigma 1.5, window renormalized at
/// borders). Inputs are expected in [0, L].
Image ssim_map(const Image& x, const Image& y, double dynamic_range);
double ssim(const Image& x, const Image& y, double dynamic_range);
/// Mean of the SSIM map over `mask`.
double ssim_masked(const Image& x, const Image& y, const Mask& mask, double dynamic_range);
/// Shifts normalized [-1, 1] images to [0, 2] and evaluates SSIM with L = 2.
double ssim_normalized(const Image& x, const Image& y);
double ssim_normalized_masked(const Image& x, const Image& y, const Mask& mask);

/// Concordance correlation coefficient, population moments.
double ccc(const std::vector<double>& s, const std::vector<double>& t);

// ---- radiomics -----------------------------------------------------------------

struct QuantizedROI {
    Grid<int> levels;  // 1..n_levels inside the ROI, 0 outside
    int n_levels = 0;
    std::vector<double> edges;  // n_levels + 1 bin edges over [min, max]

    bool in_roi(int r, int c) const { return levels(r, c) > 0; }
    int pixel_count() const;
};

QuantizedROI quantize_roi(const Image& image, const Mask& roi, int n_levels);

/// Convenience for tests: wraps an explicit level grid (0 = outside ROI).
QuantizedROI levels_roi(const Grid<int>& levels, int n_levels);

struct FirstOrderFeatures {
    double mean, variance, skewness, kurtosis, energy, entropy;
};
FirstOrderFeatures first_order_features(const Image& image, const Mask& roi);

struct GlcmFeatures {
    double contrast, correlation, energy, homogeneity;
};
GlcmFeatures glcm_features(const QuantizedROI& q);

struct GlrlmFeatures {
    double sre, lre, gln, rln, rp;
};
/// Directions: 0 = 0 deg (0,1), 1 = 45 deg (-1,1), 2 = 90 deg (1,0), 3 = 135 deg (1,1).
constexpr std::array<std::array<int, 2>, 4> kRunDirections{{{0, 1}, {-1, 1}, {1, 0}, {1, 1}}};
GlrlmFeatures glrlm_direction_features(const QuantizedROI& q, int direction);
GlrlmFeatures glrlm_features(const QuantizedROI& q);

struct GlszmFeatures {
    double sze, lze, zp;
};
GlszmFeatures glszm_features(const QuantizedROI& q);

struct GldmFeatures {
    double sde, lde, dn;
};
GldmFeatures gldm_features(const QuantizedROI& q);

constexpr double kNgtdmEpsilon = 1e-8;
struct NgtdmFeatures {
    double coarseness, contrast, busyness;
};
NgtdmFeatures ngtdm_features(const QuantizedROI& q);

/// The fixed ordered catalog of 24 feature ids ("family.name").
const std::vector<std::string>& feature_catalog();
const std::vector<std::string>& feature_families();
std::string family_of(const std::string& feature_id);

struct RadiomicFeatureVector {
    std::vector<std::string> ids;
    std::vector<double> values;

    double at(const std::string& id) const;
};

RadiomicFeatureVector feature_vector(const Image& image, const Mask& roi, int n_levels = 32);

struct FamilyStat {
    double mean = 0.0;
    double std = 0.0;
};

struct CCCReport {
    std::vector<std::string> feature_ids;
    std::vector<double> per_feature;
    std::map<std::string, FamilyStat> per_family;
    double overall = 0.0;
};

CCCReport ccc_report(const std::vector<RadiomicFeatureVector>& reference,
                     const std::vector<RadiomicFeatureVector>& test);

// ---- noise power spectrum ----------------------------------------------------------

struct NPSProfile {
    Image spectrum;  // side x side, DC at (0, 0)
    std::vector<double> bin_centers;  // cycles per pixel
    std::vector<double> profile;
    int n_patches = 0;
};

NPSProfile nps(const std::vector<Image>& patches);

/// L2 distance between two radial profiles of equal length.
double profile_distance(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace racmf
