#include "racmf/metrics.hpp"

#include "racmf/errors.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

namespace racmf {

namespace {

std::vector<double> roi_values(const Image& image, const Mask& roi) {
    require_same_shape(image, roi, "roi");
    std::vector<double> v;
    for (size_t i = 0; i < image.size(); ++i)
        if (roi[i]) v.push_back(image[i]);
    if (v.empty()) throw PreconditionError("empty ROI");
    return v;
}

constexpr std::array<std::array<int, 2>, 8> kNeighbors8{
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

bool inside(const QuantizedROI& q, int r, int c) {
    return r >= 0 && c >= 0 && r < q.levels.rows && c < q.levels.cols && q.levels(r, c) > 0;
}

}  // namespace

// ---- PSNR / SSIM -------------------------------------------------------------------

namespace {

PsnrResult psnr_from_mse(double mse, double max_value) {
    if (mse <= 0.0) return {kPsnrCapDb, true};
    return {std::min(kPsnrCapDb, 10.0 * std::log10(max_value * max_value / mse)), false};
}

}  // namespace

PsnrResult psnr(const Image& x, const Image& y, double max_value) {
    require_same_shape(x, y, "psnr");
    if (!(max_value > 0.0)) throw PreconditionError("psnr: max_value must be > 0");
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - y[i];
        acc += d * d;
    }
    return psnr_from_mse(acc / static_cast<double>(x.size()), max_value);
}

PsnrResult psnr_masked(const Image& x, const Image& y, const Mask& mask, double max_value) {
    require_same_shape(x, y, "psnr");
    require_same_shape(x, mask, "psnr mask");
    if (!(max_value > 0.0)) throw PreconditionError("psnr: max_value must be > 0");
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < x.size(); ++i)
        if (mask[i]) {
            const double d = static_cast<double>(x[i]) - y[i];
            acc += d * d;
            ++n;
        }
    if (n == 0) throw PreconditionError("psnr: empty mask");
    return psnr_from_mse(acc / static_cast<double>(n), max_value);
}

Image ssim_map(const Image& x, const Image& y, double L) {
    require_same_shape(x, y, "ssim");
    constexpr int kWin = 11, kRad = 5;
    constexpr double kSigma = 1.5;
    if (x.rows < kWin || x.cols < kWin)
        throw PreconditionError("ssim: image " + shape_str(x.rows, x.cols) + " is smaller than the 11x11 window");
    std::array<double, kWin> g{};
    for (int i = 0; i < kWin; ++i) g[i] = std::exp(-0.5 * (i - kRad) * (i - kRad) / (kSigma * kSigma));
    const double C1 = (0.01 * L) * (0.01 * L), C2 = (0.03 * L) * (0.03 * L);

    Image out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) {
            double wsum = 0, mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int dr = -kRad; dr <= kRad; ++dr) {
                const int rr = r + dr;
                if (rr < 0 || rr >= x.rows) continue;
                for (int dc = -kRad; dc <= kRad; ++dc) {
                    const int cc = c + dc;
                    if (cc < 0 || cc >= x.cols) continue;
                    const double w = g[dr + kRad] * g[dc + kRad];
                    const double a = x(rr, cc), b = y(rr, cc);
                    wsum += w;
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            mx /= wsum;
            my /= wsum;
            const double vx = std::max(0.0, sxx / wsum - mx * mx);
            const double vy = std::max(0.0, syy / wsum - my * my);
            const double cxy = sxy / wsum - mx * my;
            const double num = (2 * mx * my + C1) * (2 * cxy + C2);
            const double den = (mx * mx + my * my + C1) * (vx + vy + C2);
            out(r, c) = static_cast<float>(num / den);
        }
    return out;
}

double ssim(const Image& x, const Image& y, double L) {
    const Image m = ssim_map(x, y, L);
    double acc = 0.0;
    for (float v : m.data) acc += v;
    return acc / static_cast<double>(m.size());
}

double ssim_masked(const Image& x, const Image& y, const Mask& mask, double L) {
    require_same_shape(x, mask, "ssim mask");
    const Image m = ssim_map(x, y, L);
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < m.size(); ++i)
        if (mask[i]) {
            acc += m[i];
            ++n;
        }
    if (n == 0) throw PreconditionError("ssim: empty mask");
    return acc / static_cast<double>(n);
}

namespace {

Image shift_unit(const Image& x) {
    Image o = x;
    for (auto& v : o.data) v += 1.0f;
    return o;
}

}  // namespace

double ssim_normalized(const Image& x, const Image& y) { return ssim(shift_unit(x), shift_unit(y), kNormalizedRange); }

double ssim_normalized_masked(const Image& x, const Image& y, const Mask& mask) {
    return ssim_masked(shift_unit(x), shift_unit(y), mask, kNormalizedRange);
}

// ---- CCC ---------------------------------------------------------------------------

double ccc(const std::vector<double>& s, const std::vector<double>& t) {
    if (s.size() != t.size()) throw DimensionError("ccc: series lengths differ");
    if (s.size() < 2) throw PreconditionError("ccc: need at least 2 values");
    const double n = static_cast<double>(s.size());
    const double ms = std::accumulate(s.begin(), s.end(), 0.0) / n;
    const double mt = std::accumulate(t.begin(), t.end(), 0.0) / n;
    double vs = 0, vt = 0, cov = 0;
    for (size_t i = 0; i < s.size(); ++i) {
        vs += (s[i] - ms) * (s[i] - ms);
        vt += (t[i] - mt) * (t[i] - mt);
        cov += (s[i] - ms) * (t[i] - mt);
    }
    vs /= n;
    vt /= n;
    cov /= n;
    const double den = vs + vt + (ms - mt) * (ms - mt);
    if (den <= 0.0) return 1.0;  // both constant and equal
    return std::clamp(2.0 * cov / den, -1.0, 1.0);
}

// ---- quantization + first order --------------------------------------------------

int QuantizedROI::pixel_count() const {
    return static_cast<int>(std::count_if(levels.data.begin(), levels.data.end(), [](int v) { return v > 0; }));
}

QuantizedROI quantize_roi(const Image& image, const Mask& roi, int n_levels) {
    if (n_levels < 2) throw PreconditionError("quantize_roi: need at least 2 levels");
    const auto vals = roi_values(image, roi);
    const auto [mn_it, mx_it] = std::minmax_element(vals.begin(), vals.end());
    const double lo = *mn_it, hi = *mx_it;
    QuantizedROI q;
    q.n_levels = n_levels;
    q.levels = Grid<int>(image.rows, image.cols, 0);
    for (int i = 0; i <= n_levels; ++i) q.edges.push_back(lo + (hi - lo) * i / n_levels);
    for (size_t i = 0; i < image.size(); ++i) {
        if (!roi[i]) continue;
        if (hi <= lo) {
            q.levels[i] = 1;
            continue;
        }
        const int b = static_cast<int>(std::floor((image[i] - lo) / (hi - lo) * n_levels));
        q.levels[i] = std::clamp(b, 0, n_levels - 1) + 1;
    }
    return q;
}

QuantizedROI levels_roi(const Grid<int>& levels, int n_levels) {
    QuantizedROI q;
    q.levels = levels;
    q.n_levels = n_levels;
    for (int v : levels.data)
        if (v < 0 || v > n_levels) throw PreconditionError("levels_roi: level outside 0..n_levels");
    for (int i = 0; i <= n_levels; ++i) q.edges.push_back(i);
    return q;
}

FirstOrderFeatures first_order_features(const Image& image, const Mask& roi) {
    const auto v = roi_values(image, roi);
    const double n = static_cast<double>(v.size());
    FirstOrderFeatures f{};
    f.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (double x : v) {
        const double d = x - f.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        f.energy += x * x;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    f.variance = m2;
    f.skewness = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
    f.kurtosis = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;
    const auto q = quantize_roi(image, roi, 32);
    std::vector<double> hist(33, 0.0);
    for (int l : q.levels.data)
        if (l > 0) hist[l] += 1.0;
    for (double h : hist)
        if (h > 0) {
            const double p = h / n;
            f.entropy -= p * std::log2(p);
        }
    return f;
}

// ---- GLCM -------------------------------------------------------------------------

GlcmFeatures glcm_features(const QuantizedROI& q) {
    const int N = q.n_levels;
    constexpr std::array<std::array<int, 2>, 4> offsets{{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};
    std::vector<double> avg(static_cast<size_t>(N) * N, 0.0);
    int used = 0;
    for (const auto& off : offsets) {
        std::vector<double> m(static_cast<size_t>(N) * N, 0.0);
        double total = 0.0;
        for (int r = 0; r < q.levels.rows; ++r)
            for (int c = 0; c < q.levels.cols; ++c) {
                if (!inside(q, r, c) || !inside(q, r + off[0], c + off[1])) continue;
                const int i = q.levels(r, c) - 1, j = q.levels(r + off[0], c + off[1]) - 1;
                m[i * N + j] += 1.0;
                m[j * N + i] += 1.0;
                total += 2.0;
            }
        if (total == 0.0) continue;
        for (size_t k = 0; k < m.size(); ++k) avg[k] += m[k] / total;
        ++used;
    }
    if (used == 0) throw FeatureUndefinedError("glcm: ROI has no neighboring pixel pairs");
    for (auto& v : avg) v /= used;

    GlcmFeatures f{};
    double mu = 0.0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) mu += (i + 1) * avg[i * N + j];
    double var = 0.0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) var += (i + 1 - mu) * (i + 1 - mu) * avg[i * N + j];
    double cov = 0.0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            const double p = avg[i * N + j];
            const double d = i - j;
            f.contrast += d * d * p;
            f.energy += p * p;
            f.homogeneity += p / (1.0 + d * d);
            cov += (i + 1 - mu) * (j + 1 - mu) * p;
        }
    // The averaged matrix is symmetric, so both marginals share mu and var.
    f.correlation = var < 1e-12 ? 1.0 : cov / var;
    return f;
}

// ---- GLRLM ------------------------------------------------------------------------

GlrlmFeatures glrlm_direction_features(const QuantizedROI& q, int direction) {
    const int n_px = q.pixel_count();
    if (n_px == 0) throw PreconditionError("glrlm: empty ROI");
    const auto [dr, dc] = kRunDirections.at(static_cast<size_t>(direction));
    const int N = q.n_levels;
    const int max_len = std::max(q.levels.rows, q.levels.cols);
    std::vector<double> R(static_cast<size_t>(N) * (max_len + 1), 0.0);
    for (int r = 0; r < q.levels.rows; ++r)
        for (int c = 0; c < q.levels.cols; ++c) {
            if (!inside(q, r, c)) continue;
            const int lv = q.levels(r, c);
            // Start of a run: the predecessor along the direction is outside or differs.
            if (inside(q, r - dr, c - dc) && q.levels(r - dr, c - dc) == lv) continue;
            int len = 0, rr = r, cc = c;
            while (inside(q, rr, cc) && q.levels(rr, cc) == lv) {
                ++len;
                rr += dr;
                cc += dc;
            }
            R[static_cast<size_t>(lv - 1) * (max_len + 1) + len] += 1.0;
        }
    GlrlmFeatures f{};
    double n_runs = 0.0;
    std::vector<double> by_level(N, 0.0), by_len(max_len + 1, 0.0);
    for (int i = 0; i < N; ++i)
        for (int l = 1; l <= max_len; ++l) {
            const double v = R[static_cast<size_t>(i) * (max_len + 1) + l];
            if (v == 0.0) continue;
            n_runs += v;
            f.sre += v / (static_cast<double>(l) * l);
            f.lre += v * l * l;
            by_level[i] += v;
            by_len[l] += v;
        }
    for (double v : by_level) f.gln += v * v;
    for (double v : by_len) f.rln += v * v;
    f.sre /= n_runs;
    f.lre /= n_runs;
    f.gln /= n_runs;
    f.rln /= n_runs;
    f.rp = n_runs / n_px;
    return f;
}

GlrlmFeatures glrlm_features(const QuantizedROI& q) {
    GlrlmFeatures acc{};
    for (int d = 0; d < 4; ++d) {
        const auto f = glrlm_direction_features(q, d);
        acc.sre += f.sre / 4;
        acc.lre += f.lre / 4;
        acc.gln += f.gln / 4;
        acc.rln += f.rln / 4;
        acc.rp += f.rp / 4;
    }
    return acc;
}

// ---- GLSZM ------------------------------------------------------------------------

GlszmFeatures glszm_features(const QuantizedROI& q) {
    const int n_px = q.pixel_count();
    if (n_px == 0) throw PreconditionError("glszm: empty ROI");
    Grid<std::uint8_t> seen(q.levels.rows, q.levels.cols, 0);
    std::vector<std::pair<int, int>> stack;
    double n_zones = 0, sze = 0, lze = 0;
    for (int r = 0; r < q.levels.rows; ++r)
        for (int c = 0; c < q.levels.cols; ++c) {
            if (!inside(q, r, c) || seen(r, c)) continue;
            const int lv = q.levels(r, c);
            int size = 0;
            stack.assign(1, {r, c});
            seen(r, c) = 1;
            while (!stack.empty()) {
                const auto [y, x] = stack.back();
                stack.pop_back();
                ++size;
                for (const auto& [ny, nx] : kNeighbors8) {
                    const int yy = y + ny, xx = x + nx;
                    if (inside(q, yy, xx) && !seen(yy, xx) && q.levels(yy, xx) == lv) {
                        seen(yy, xx) = 1;
                        stack.push_back({yy, xx});
                    }
                }
            }
            n_zones += 1;
            sze += 1.0 / (static_cast<double>(size) * size);
            lze += static_cast<double>(size) * size;
        }
    return {sze / n_zones, lze / n_zones, n_zones / n_px};
}

// ---- GLDM -------------------------------------------------------------------------

GldmFeatures gldm_features(const QuantizedROI& q) {
    const int n_px = q.pixel_count();
    if (n_px == 0) throw PreconditionError("gldm: empty ROI");
    std::array<double, 10> by_dep{};
    GldmFeatures f{};
    for (int r = 0; r < q.levels.rows; ++r)
        for (int c = 0; c < q.levels.cols; ++c) {
            if (!inside(q, r, c)) continue;
            int dep = 1;
            for (const auto& [ny, nx] : kNeighbors8)
                if (inside(q, r + ny, c + nx) && q.levels(r + ny, c + nx) == q.levels(r, c)) ++dep;
            by_dep[dep] += 1.0;
            f.sde += 1.0 / (static_cast<double>(dep) * dep);
            f.lde += static_cast<double>(dep) * dep;
        }
    for (double v : by_dep) f.dn += v * v;
    f.sde /= n_px;
    f.lde /= n_px;
    f.dn /= n_px;
    return f;
}

// ---- NGTDM ------------------------------------------------------------------------

NgtdmFeatures ngtdm_features(const QuantizedROI& q) {
    const int N = q.n_levels;
    std::vector<double> s(N + 1, 0.0), n(N + 1, 0.0);
    double n_valid = 0.0;
    for (int r = 0; r < q.levels.rows; ++r)
        for (int c = 0; c < q.levels.cols; ++c) {
            if (!inside(q, r, c)) continue;
            double sum = 0.0;
            int cnt = 0;
            for (const auto& [ny, nx] : kNeighbors8)
                if (inside(q, r + ny, c + nx)) {
                    sum += q.levels(r + ny, c + nx);
                    ++cnt;
                }
            if (cnt == 0) continue;
            const int lv = q.levels(r, c);
            s[lv] += std::abs(lv - sum / cnt);
            n[lv] += 1.0;
            n_valid += 1.0;
        }
    if (n_valid == 0.0) throw FeatureUndefinedError("ngtdm: no ROI pixel has an in-ROI neighbor");

    NgtdmFeatures f{};
    std::vector<double> p(N + 1, 0.0);
    int n_gp = 0;
    double ps = 0.0, s_total = 0.0;
    for (int i = 1; i <= N; ++i) {
        p[i] = n[i] / n_valid;
        if (p[i] > 0) ++n_gp;
        ps += p[i] * s[i];
        s_total += s[i];
    }
    f.coarseness = ps < kNgtdmEpsilon ? 1.0 / kNgtdmEpsilon : 1.0 / ps;
    if (n_gp > 1) {
        double pair = 0.0, busy_den = 0.0;
        for (int i = 1; i <= N; ++i)
            for (int j = 1; j <= N; ++j) {
                if (p[i] == 0 || p[j] == 0) continue;
                pair += p[i] * p[j] * (i - j) * (i - j);
                busy_den += std::abs(i * p[i] - j * p[j]);
            }
        f.contrast = pair / (n_gp * (n_gp - 1.0)) * (s_total / n_valid);
        f.busyness = busy_den > 0.0 ? ps / busy_den : 0.0;
    }
    return f;
}

// ---- catalog -----------------------------------------------------------------------

const std::vector<std::string>& feature_catalog() {
    static const std::vector<std::string> ids{
        "firstorder.mean",   "firstorder.variance", "firstorder.skewness", "firstorder.kurtosis",
        "firstorder.energy", "firstorder.entropy",  "glcm.contrast",       "glcm.correlation",
        "glcm.energy",       "glcm.homogeneity",    "glrlm.sre",           "glrlm.lre",
        "glrlm.gln",         "glrlm.rln",           "glrlm.rp",            "glszm.sze",
        "glszm.lze",         "glszm.zp",            "gldm.sde",            "gldm.lde",
        "gldm.dn",           "ngtdm.coarseness",    "ngtdm.contrast",      "ngtdm.busyness"};
    return ids;
}

const std::vector<std::string>& feature_families() {
    static const std::vector<std::string> fam{"firstorder", "glcm", "glrlm", "glszm", "gldm", "ngtdm"};
    return fam;
}

std::string family_of(const std::string& id) { return id.substr(0, id.find('.')); }

double RadiomicFeatureVector::at(const std::string& id) const {
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == id) return values[i];
    throw PreconditionError("unknown feature id '" + id + "'");
}

RadiomicFeatureVector feature_vector(const Image& image, const Mask& roi, int n_levels) {
    RadiomicFeatureVector fv;
    fv.ids = feature_catalog();
    auto annotate = [](const char* family, auto&& fn) {
        try {
            return fn();
        } catch (const FeatureUndefinedError& e) {
            throw FeatureUndefinedError(std::string(family) + ": " + e.what());
        } catch (const PreconditionError& e) {
            throw PreconditionError(std::string(family) + ": " + e.what());
        }
    };
    const auto fo = annotate("firstorder", [&] { return first_order_features(image, roi); });
    const auto q = annotate("quantize", [&] { return quantize_roi(image, roi, n_levels); });
    const auto cm = annotate("glcm", [&] { return glcm_features(q); });
    const auto rl = annotate("glrlm", [&] { return glrlm_features(q); });
    const auto sz = annotate("glszm", [&] { return glszm_features(q); });
    const auto dm = annotate("gldm", [&] { return gldm_features(q); });
    const auto nt = annotate("ngtdm", [&] { return ngtdm_features(q); });
    fv.values = {fo.mean,     fo.variance, fo.skewness, fo.kurtosis,       fo.energy,      fo.entropy,
                 cm.contrast, cm.correlation, cm.energy, cm.homogeneity,   rl.sre,         rl.lre,
                 rl.gln,      rl.rln,      rl.rp,       sz.sze,            sz.lze,         sz.zp,
                 dm.sde,      dm.lde,      dm.dn,       nt.coarseness,     nt.contrast,    nt.busyness};
    for (size_t i = 0; i < fv.values.size(); ++i)
        if (!std::isfinite(fv.values[i])) throw NumericalError("feature " + fv.ids[i] + " is not finite");
    return fv;
}

CCCReport ccc_report(const std::vector<RadiomicFeatureVector>& reference,
                     const std::vector<RadiomicFeatureVector>& test) {
    if (reference.size() != test.size()) throw PreconditionError("ccc_report: cohort sizes differ");
    if (reference.size() < 2) throw PreconditionError("ccc_report: need at least 2 cohort members");
    const auto& ids = feature_catalog();
    for (const auto* cohort : {&reference, &test})
        for (const auto& fv : *cohort)
            if (fv.ids != ids) throw ContractError("ccc_report: feature catalog mismatch");
    CCCReport rep;
    rep.feature_ids = ids;
    for (size_t k = 0; k < ids.size(); ++k) {
        std::vector<double> s, t;
        for (size_t i = 0; i < reference.size(); ++i) {
            s.push_back(reference[i].values[k]);
            t.push_back(test[i].values[k]);
        }
        rep.per_feature.push_back(ccc(s, t));
    }
    for (const auto& fam : feature_families()) {
        std::vector<double> v;
        for (size_t k = 0; k < ids.size(); ++k)
            if (family_of(ids[k]) == fam) v.push_back(rep.per_feature[k]);
        FamilyStat st;
        st.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        for (double x : v) st.std += (x - st.mean) * (x - st.mean);
        st.std = std::sqrt(st.std / static_cast<double>(v.size()));
        rep.per_family[fam] = st;
    }
    rep.overall = std::accumulate(rep.per_feature.begin(), rep.per_feature.end(), 0.0) /
                  static_cast<double>(rep.per_feature.size());
    return rep;
}

// ---- NPS --------------------------------------------------------------------------

NPSProfile nps(const std::vector<Image>& patches) {
    if (patches.empty()) throw PreconditionError("nps: need at least one patch");
    const int side = patches.front().rows;
    for (const auto& p : patches) {
        if (p.rows != p.cols) throw PreconditionError("nps: patches must be square");
        if (p.rows != side) throw PreconditionError("nps: patches have mixed sizes");
    }
    if (side < 8) throw PreconditionError("nps: patch side must be >= 8");

    Eigen::FFT<double> fft;
    const double n_px = static_cast<double>(side) * side;
    std::vector<double> acc(static_cast<size_t>(side) * side, 0.0);
    std::vector<std::complex<double>> buf(static_cast<size_t>(side) * side), tmp_in(side), tmp_out(side);
    for (const auto& p : patches) {
        double mean = 0.0;
        for (float v : p.data) mean += v;
        mean /= n_px;
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = {p[i] - mean, 0.0};
        for (int r = 0; r < side; ++r) {
            std::copy(buf.begin() + r * side, buf.begin() + (r + 1) * side, tmp_in.begin());
            fft.fwd(tmp_out, tmp_in);
            std::copy(tmp_out.begin(), tmp_out.end(), buf.begin() + r * side);
        }
        for (int c = 0; c < side; ++c) {
            for (int r = 0; r < side; ++r) tmp_in[r] = buf[static_cast<size_t>(r) * side + c];
            fft.fwd(tmp_out, tmp_in);
            for (int r = 0; r < side; ++r) buf[static_cast<size_t>(r) * side + c] = tmp_out[r];
        }
        for (size_t i = 0; i < buf.size(); ++i) acc[i] += std::norm(buf[i]) / n_px;
    }
    NPSProfile out;
    out.n_patches = static_cast<int>(patches.size());
    out.spectrum = Image(side, side);
    for (size_t i = 0; i < acc.size(); ++i) out.spectrum[i] = static_cast<float>(acc[i] / patches.size());

    const int n_bins = side / 2;
    std::vector<double> sum(n_bins, 0.0), cnt(n_bins, 0.0);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            const double fy = (r <= side / 2 ? r : r - side) / static_cast<double>(side);
            const double fx = (c <= side / 2 ? c : c - side) / static_cast<double>(side);
            const double f = std::hypot(fy, fx);
            const int b = static_cast<int>(f * side);  // bin width 1/side
            if (b >= n_bins) continue;
            sum[b] += acc[static_cast<size_t>(r) * side + c] / patches.size();
            cnt[b] += 1.0;
        }
    for (int b = 0; b < n_bins; ++b) {
        out.bin_centers.push_back((b + 0.5) / side);
        out.profile.push_back(cnt[b] > 0 ? sum[b] / cnt[b] : 0.0);
    }
    return out;
}

double profile_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("profile_distance: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

}  // namespace racmf
