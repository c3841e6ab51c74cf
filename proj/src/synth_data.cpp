#include "racmf/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "racmf/container.hpp"
#include "racmf/random.hpp"

namespace racmf {

namespace fs = std::filesystem;

void PhantomSpec::validate() const {
    if (height < 16) throw SpecError("size.height", "must be >= 16, got " + std::to_string(height));
    if (width < 16) throw SpecError("size.width", "must be >= 16, got " + std::to_string(width));
    if (n_lesions < 0) throw SpecError("n_lesions", "must be >= 0");
    if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min) {
        throw SpecError("lesion_radius_range", "need 0 < min <= max");
    }
    if (2.0 * lesion_radius_max + 2.0 > std::min(height, width) * 0.5) {
        throw SpecError("lesion_radius_range", "max radius does not fit inside the body region");
    }
    if (!(background_texture_scale >= 0.0)) throw SpecError("background_texture_scale", "must be >= 0");
    if (!(texture_amplitude >= 0.0)) throw SpecError("texture_amplitude", "must be >= 0");
    if (lesion_contrast_min < 0.0 || lesion_contrast_max > 1.0 || lesion_contrast_max < lesion_contrast_min) {
        throw SpecError("intensity_range", "need 0 <= min <= max <= 1");
    }
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) v /= sum;

    auto mirror = [](int i, int n) {
        if (n == 1) return 0;
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return i;
    };
    Image tmp(img.rows, img.cols), out(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img(r, mirror(c + i, img.cols));
            tmp(r, c) = static_cast<float>(acc);
        }
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(mirror(r + i, img.rows), c);
            out(r, c) = static_cast<float>(acc);
        }
    return out;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int H = spec.height, W = spec.width;
    Rng rng(derive_seed(spec.seed, 1));

    Phantom p;
    p.target = Image(H, W, kBackgroundLevel);
    p.body_mask = Mask(H, W, 0);
    p.lesion_mask = Mask(H, W, 0);

    const double cy = (H - 1) / 2.0 + uniform(rng, -0.03, 0.03) * H;
    const double cx = (W - 1) / 2.0 + uniform(rng, -0.03, 0.03) * W;
    const double ay = uniform(rng, 0.38, 0.45) * H;
    const double ax = uniform(rng, 0.38, 0.45) * W;
    auto ellipse = [&](double y, double x, double shrink) {
        const double dy = (y - cy) / (ay - shrink), dx = (x - cx) / (ax - shrink);
        return dy * dy + dx * dx;
    };

    // Band-limited texture: smoothed white noise rescaled to unit std.
    Image noise(H, W);
    for (auto& v : noise.data) v = standard_normal(rng);
    Image texture = gaussian_blur(noise, spec.background_texture_scale);
    {
        double m = 0.0, s = 0.0;
        for (float v : texture.data) m += v;
        m /= texture.size();
        for (float v : texture.data) s += (v - m) * (v - m);
        s = std::sqrt(s / texture.size());
        const double scale = s > 0.0 ? spec.texture_amplitude / s : 0.0;
        for (auto& v : texture.data) v = static_cast<float>((v - m) * scale);
    }

    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (ellipse(r, c, 0.0) <= 1.0) {
                p.body_mask(r, c) = 1;
                p.target(r, c) = kBodyLevel + texture(r, c);
            }

    struct Blob {
        double y, x, radius;
    };
    std::vector<Blob> blobs;
    for (int i = 0; i < spec.n_lesions; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
            const double rad = uniform(rng, spec.lesion_radius_min, spec.lesion_radius_max);
            const double y = uniform(rng, cy - ay, cy + ay);
            const double x = uniform(rng, cx - ax, cx + ax);
            if (ellipse(y, x, rad + 1.5) > 1.0) continue;
            if (y - rad < 0.5 || x - rad < 0.5 || y + rad > H - 1.5 || x + rad > W - 1.5) continue;
            bool clear = true;
            for (const auto& b : blobs)
                if (std::hypot(b.y - y, b.x - x) < b.radius + rad + 2.5) clear = false;
            if (!clear) continue;
            blobs.push_back({y, x, rad});
            placed = true;
        }
        if (!placed) {
            throw SpecError("n_lesions", "cannot place " + std::to_string(spec.n_lesions) +
                                             " non-overlapping lesions in a " + shape_str(H, W) + " body");
        }
    }
    for (const auto& b : blobs) {
        const double contrast = uniform(rng, spec.lesion_contrast_min, spec.lesion_contrast_max);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const double d = std::hypot(r - b.y, c - b.x);
                if (d <= b.radius) {
                    p.lesion_mask(r, c) = 1;
                    // Slight dome profile so lesions carry internal texture.
                    const double prof = 1.0 - 0.3 * (d / b.radius) * (d / b.radius);
                    p.target(r, c) = static_cast<float>(kBodyLevel + contrast * prof + 0.5 * texture(r, c));
                }
            }
    }
    for (auto& v : p.target.data) v = std::clamp(v, -1.0f, 1.0f);
    return p;
}

DegradationField DegradationField::identity(int rows, int cols, std::uint64_t seed) {
    DegradationField f;
    f.blur_sigma = Image(rows, cols, 0.0f);
    f.noise_sigma = Image(rows, cols, 0.0f);
    f.contrast_gain = Image(rows, cols, 1.0f);
    f.seed = seed;
    return f;
}

void DegradationField::validate() const {
    require_same_shape(blur_sigma, noise_sigma, "degradation field");
    require_same_shape(blur_sigma, contrast_gain, "degradation field");
    for (size_t i = 0; i < blur_sigma.size(); ++i) {
        if (!std::isfinite(blur_sigma[i]) || blur_sigma[i] < 0.0f)
            throw SpecError("blur_sigma_map", "values must be finite and >= 0");
        if (!std::isfinite(noise_sigma[i]) || noise_sigma[i] < 0.0f)
            throw SpecError("noise_sigma_map", "values must be finite and >= 0");
        if (!std::isfinite(contrast_gain[i]) || contrast_gain[i] <= 0.0f)
            throw SpecError("contrast_gain_map", "values must be finite and > 0");
    }
}

Image degrade(const Image& target, const DegradationField& field) {
    require_same_shape(target, field.blur_sigma, "degrade");
    field.validate();

    const float max_sigma = *std::max_element(field.blur_sigma.data.begin(), field.blur_sigma.data.end());
    std::vector<float> levels{0.0f};
    if (max_sigma > 0.0f) levels = {0.0f, max_sigma / 3.0f, 2.0f * max_sigma / 3.0f, max_sigma};
    std::vector<Image> bank;
    bank.reserve(levels.size());
    for (float s : levels) bank.push_back(gaussian_blur(target, s));

    Rng rng(derive_seed(field.seed, 2));
    Image out(target.rows, target.cols);
    for (size_t i = 0; i < target.size(); ++i) {
        float blurred = bank[0][i];
        const float s = field.blur_sigma[i];
        if (levels.size() > 1 && s > 0.0f) {
            const float step = levels[1];
            const auto lo = std::min<size_t>(static_cast<size_t>(s / step), levels.size() - 2);
            const float w = std::clamp((s - levels[lo]) / step, 0.0f, 1.0f);
            blurred = (1.0f - w) * bank[lo][i] + w * bank[lo + 1][i];
        }
        const float n = standard_normal(rng);
        const float v = field.contrast_gain[i] * blurred + field.noise_sigma[i] * n;
        out[i] = std::clamp(v, -1.0f, 1.0f);
    }
    return out;
}

void DegradationTemplate::validate() const {
    if (mode != "identity" && mode != "uniform" && mode != "quadrant" && mode != "smooth")
        throw SpecError("degradation.mode", "unknown mode '" + mode + "'");
    if (base_blur < 0 || high_blur < 0) throw SpecError("degradation.blur", "must be >= 0");
    if (base_noise < 0 || high_noise < 0) throw SpecError("degradation.noise", "must be >= 0");
    if (gain_jitter < 0 || gain_jitter >= 0.5) throw SpecError("degradation.gain_jitter", "must be in [0, 0.5)");
    if (quadrant < -1 || quadrant > 3) throw SpecError("degradation.quadrant", "must be -1 or 0..3");
}

DegradationField make_degradation_field(const DegradationTemplate& tmpl, int rows, int cols, std::uint64_t seed,
                                        FieldInfo* info) {
    tmpl.validate();
    Rng rng(derive_seed(seed, 3));
    DegradationField f = DegradationField::identity(rows, cols, derive_seed(seed, 4));
    if (info) *info = FieldInfo{};
    if (tmpl.mode == "identity") return f;

    Image weight(rows, cols, 0.0f);  // 0 -> base level, 1 -> elevated level
    if (tmpl.mode == "quadrant") {
        const int q = tmpl.quadrant >= 0 ? tmpl.quadrant : static_cast<int>(rng() % 4);
        if (info) info->quadrant = q;
        const int r0 = (q / 2) * (rows / 2), c0 = (q % 2) * (cols / 2);
        const int r1 = q / 2 ? rows : rows / 2, c1 = q % 2 ? cols : cols / 2;
        for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c) weight(r, c) = 1.0f;
    } else if (tmpl.mode == "smooth") {
        const double cy = uniform(rng, 0.2, 0.8) * rows, cx = uniform(rng, 0.2, 0.8) * cols;
        const double rad = uniform(rng, 0.2, 0.35) * std::min(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const double d = std::hypot(r - cy, c - cx) / rad;
                weight(r, c) = static_cast<float>(std::exp(-0.5 * d * d * 2.0));
            }
    }

    const double gain = 1.0 + uniform(rng, -tmpl.gain_jitter, tmpl.gain_jitter);
    for (size_t i = 0; i < weight.size(); ++i) {
        const double w = weight[i];
        f.blur_sigma[i] = static_cast<float>(tmpl.base_blur + w * (tmpl.high_blur - tmpl.base_blur));
        f.noise_sigma[i] = static_cast<float>(tmpl.base_noise + w * (tmpl.high_noise - tmpl.base_noise));
        f.contrast_gain[i] = static_cast<float>(gain);
    }
    return f;
}

void ImagePair::validate() const {
    require_same_shape(source, target, "image pair");
    require_same_shape(source, body_mask, "image pair body_mask");
    require_same_shape(source, lesion_mask, "image pair lesion_mask");
    for (const auto* img : {&source, &target})
        for (float v : img->data)
            if (!std::isfinite(v) || v < -1.0f || v > 1.0f)
                throw FormatError("image pair '" + pair_id + "': intensity outside [-1, 1]");
    for (const auto* m : {&body_mask, &lesion_mask})
        for (auto v : m->data)
            if (v > 1) throw FormatError("image pair '" + pair_id + "': mask is not binary");
}

void write_pair(const ImagePair& pair, const fs::path& path) {
    pair.validate();
    Container c;
    c.meta = {{"kind", "image_pair"}, {"pair_id", pair.pair_id}};
    c.arrays.push_back(NamedArray::from_image("x_A", pair.source));
    c.arrays.push_back(NamedArray::from_image("x_B", pair.target));
    c.arrays.push_back(NamedArray::from_mask("body_mask", pair.body_mask));
    c.arrays.push_back(NamedArray::from_mask("lesion_mask", pair.lesion_mask));
    write_container(path, c);
}

ImagePair read_pair(const fs::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "image_pair") throw FormatError(path.string() + ": not an image pair file");
    ImagePair p;
    p.pair_id = c.meta.value("pair_id", "");
    p.source = c.get("x_A").to_image();
    p.target = c.get("x_B").to_image();
    p.body_mask = c.get("body_mask").to_mask();
    p.lesion_mask = c.get("lesion_mask").to_mask();
    try {
        p.validate();
    } catch (const DimensionError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return p;
}

std::string pair_id_for_seed(std::uint64_t pair_seed) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair-%012llx",
                  static_cast<unsigned long long>(mix_seed(pair_seed) & 0xFFFFFFFFFFFFull));
    return buf;
}

ImagePair make_pair(const PhantomSpec& spec_template, const DegradationTemplate& degradation, std::uint64_t pair_seed,
                    FieldInfo* info) {
    PhantomSpec spec = spec_template;
    spec.seed = derive_seed(pair_seed, 10);
    Phantom ph = generate_phantom(spec);
    const auto field = make_degradation_field(degradation, spec.height, spec.width, derive_seed(pair_seed, 11), info);
    ImagePair p;
    p.source = degrade(ph.target, field);
    p.target = std::move(ph.target);
    p.body_mask = std::move(ph.body_mask);
    p.lesion_mask = std::move(ph.lesion_mask);
    p.pair_id = pair_id_for_seed(pair_seed);
    return p;
}

std::vector<std::string> assign_splits(int n, const SplitFractions& f, std::uint64_t seed) {
    if (n < 1) throw SpecError("n_pairs", "must be >= 1");
    if (f.train < 0 || f.val < 0 || f.test < 0 || f.train + f.val + f.test <= 0)
        throw SpecError("split", "fractions must be >= 0 with a positive sum");
    const double total = f.train + f.val + f.test;
    int n_val = static_cast<int>(std::lround(n * f.val / total));
    int n_test = static_cast<int>(std::lround(n * f.test / total));
    // Keep every requested split nonempty when there are enough pairs.
    if (n >= 3) {
        if (f.val > 0 && n_val == 0) n_val = 1;
        if (f.test > 0 && n_test == 0) n_test = 1;
    }
    n_val = std::min(n_val, n);
    n_test = std::min(n_test, n - n_val);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 20));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::string> out(n, "train");
    for (int i = 0; i < n_val; ++i) out[order[i]] = "val";
    for (int i = n_val; i < n_val + n_test; ++i) out[order[i]] = "test";
    return out;
}

std::vector<const ImagePair*> InMemoryDataset::split(const std::string& name) const {
    std::vector<const ImagePair*> out;
    for (size_t i = 0; i < pairs.size(); ++i)
        if (splits[i] == name) out.push_back(&pairs[i]);
    return out;
}

InMemoryDataset generate_dataset(int n_pairs, const PhantomSpec& spec_template, const DegradationTemplate& degradation,
                                 std::uint64_t seed, const SplitFractions& fractions) {
    spec_template.validate();
    degradation.validate();
    InMemoryDataset ds;
    ds.splits = assign_splits(n_pairs, fractions, seed);
    for (int i = 0; i < n_pairs; ++i) {
        FieldInfo info;
        ds.pairs.push_back(make_pair(spec_template, degradation, derive_seed(seed, 1000 + i), &info));
        ds.info.push_back(info);
    }
    return ds;
}

std::vector<ManifestEntry> Manifest::split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : pairs)
        if (e.split == name) out.push_back(e);
    return out;
}

nlohmann::ordered_json Manifest::to_json() const {
    nlohmann::ordered_json j;
    j["version"] = version;
    j["seed"] = seed;
    j["pairs"] = nlohmann::ordered_json::array();
    for (const auto& e : pairs) {
        nlohmann::ordered_json p;
        p["pair_id"] = e.pair_id;
        p["path"] = e.path;
        p["split"] = e.split;
        p["seed"] = e.seed;
        p["quadrant"] = e.quadrant;
        j["pairs"].push_back(p);
    }
    return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
    Manifest m;
    try {
        m.version = j.at("version").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& p : j.at("pairs")) {
            ManifestEntry e;
            e.pair_id = p.at("pair_id").get<std::string>();
            e.path = p.at("path").get<std::string>();
            e.split = p.at("split").get<std::string>();
            e.seed = p.value("seed", std::uint64_t{0});
            e.quadrant = p.value("quadrant", -1);
            m.pairs.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
    if (m.version != 1) throw FormatError("unsupported manifest version " + std::to_string(m.version));
    return m;
}

Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    Manifest m = Manifest::from_json(j);
    m.root = path.parent_path();
    return m;
}

void save_manifest(const Manifest& m, const fs::path& path) { write_file_atomic(path, m.to_json().dump(2) + "\n"); }

Manifest build_dataset(int n_pairs, const PhantomSpec& spec_template, const DegradationTemplate& degradation,
                       const fs::path& out_dir, std::uint64_t seed, const SplitFractions& fractions) {
    if (n_pairs < 1) throw SpecError("n_pairs", "must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir / "pairs", ec);
    if (ec || !fs::is_directory(out_dir / "pairs")) throw IoError("cannot create dataset directory " + out_dir.string());

    const auto ds = generate_dataset(n_pairs, spec_template, degradation, seed, fractions);
    Manifest m;
    m.seed = seed;
    m.root = out_dir;
    for (int i = 0; i < n_pairs; ++i) {
        const auto& pair = ds.pairs[i];
        ManifestEntry e;
        e.pair_id = pair.pair_id;
        e.path = "pairs/" + pair.pair_id + ".racmf";
        e.split = ds.splits[i];
        e.seed = derive_seed(seed, 1000 + i);
        e.quadrant = ds.info[i].quadrant;
        write_pair(pair, out_dir / e.path);
        m.pairs.push_back(std::move(e));
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

}  // namespace racmf
