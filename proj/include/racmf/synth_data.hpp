#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "racmf/grid.hpp"

namespace racmf {

/// Intensities are normalized to [-1, 1]. For display only, they map affinely
/// onto a pseudo-HU window of [-1024, 1024].
constexpr float kBackgroundLevel = -0.9f;
constexpr float kBodyLevel = 0.0f;

inline float to_pseudo_hu(float v) { return v * 1024.0f; }
inline float from_pseudo_hu(float hu) { return hu / 1024.0f; }

struct PhantomSpec {
    std::uint64_t seed = 0;
    int height = 32;
    int width = 32;
    int n_lesions = 2;
    double lesion_radius_min = 1.5;
    double lesion_radius_max = 3.5;
    /// Gaussian sigma (pixels) of the band-limited body texture.
    double background_texture_scale = 1.5;
    double texture_amplitude = 0.06;
    /// Lesion contrast above the body level, in normalized units within [0, 1].
    double lesion_contrast_min = 0.4;
    double lesion_contrast_max = 0.8;

    void validate() const;
};

struct Phantom {
    Image target;
    Mask lesion_mask;
    Mask body_mask;
};

Phantom generate_phantom(const PhantomSpec& spec);

struct DegradationField {
    Image blur_sigma;
    Image noise_sigma;
    Image contrast_gain;
    std::uint64_t seed = 0;

    static DegradationField identity(int rows, int cols, std::uint64_t seed = 0);
    void validate() const;
};

/// source = clip(gain * varying_blur(target, blur_sigma) + noise_sigma * N(0,1), -1, 1).
/// The varying blur interpolates per pixel between at most four fixed-sigma copies.
Image degrade(const Image& target, const DegradationField& field);

/// Separable Gaussian blur with mirrored borders. sigma == 0 returns the input.
Image gaussian_blur(const Image& img, double sigma);

/// Recipe for sampling a DegradationField per pair.
struct DegradationTemplate {
    /// "identity", "uniform", "quadrant" (elevated in one quadrant) or "smooth"
    /// (elevated inside a random smooth blob).
    std::string mode = "quadrant";
    double base_blur = 0.4;
    double base_noise = 0.03;
    double high_blur = 1.4;
    double high_noise = 0.18;
    double gain_jitter = 0.05;
    /// Fixed quadrant 0..3 (row-major: TL, TR, BL, BR) or -1 to draw one per pair.
    int quadrant = -1;

    void validate() const;
};

struct FieldInfo {
    int quadrant = -1;
};

DegradationField make_degradation_field(const DegradationTemplate& tmpl, int rows, int cols,
                                        std::uint64_t seed, FieldInfo* info = nullptr);

struct ImagePair {
    Image source;  // x_A
    Image target;  // x_B
    Mask body_mask;
    Mask lesion_mask;
    std::string pair_id;

    void validate() const;
    bool operator==(const ImagePair&) const = default;
};

void write_pair(const ImagePair& pair, const std::filesystem::path& path);
ImagePair read_pair(const std::filesystem::path& path);

/// Phantom + degradation for one pair; a pure function of `pair_seed`.
ImagePair make_pair(const PhantomSpec& spec_template, const DegradationTemplate& degradation,
                    std::uint64_t pair_seed, FieldInfo* info = nullptr);

std::string pair_id_for_seed(std::uint64_t pair_seed);

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct ManifestEntry {
    std::string pair_id;
    std::string path;  // relative to the manifest's directory
    std::string split;
    std::uint64_t seed = 0;
    int quadrant = -1;
};

struct Manifest {
    int version = 1;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> pairs;
    std::filesystem::path root;  // directory the manifest lives in; not serialized

    std::vector<ManifestEntry> split(const std::string& name) const;
    std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }

    nlohmann::ordered_json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// Assigns split names to n items (deterministic shuffle under `seed`).
std::vector<std::string> assign_splits(int n, const SplitFractions& f, std::uint64_t seed);

/// Generates pairs in memory (same pairs that build_dataset would write).
struct InMemoryDataset {
    std::vector<ImagePair> pairs;
    std::vector<std::string> splits;
    std::vector<FieldInfo> info;

    std::vector<const ImagePair*> split(const std::string& name) const;
};

InMemoryDataset generate_dataset(int n_pairs, const PhantomSpec& spec_template,
                                 const DegradationTemplate& degradation, std::uint64_t seed,
                                 const SplitFractions& fractions = {});

Manifest build_dataset(int n_pairs, const PhantomSpec& spec_template, const DegradationTemplate& degradation,
                       const std::filesystem::path& out_dir, std::uint64_t seed,
                       const SplitFractions& fractions = {});

}  // namespace racmf
