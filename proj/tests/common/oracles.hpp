#pragma once

// Naive reference implementations used as test oracles. They enumerate pixel
// pairs, runs, zones and neighbourhoods directly and share no code with the
// library extractors.

#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "racmf/grid.hpp"

namespace oracle {

using Levels = racmf::Grid<int>;  // 0 = outside ROI

struct Px {
    int r, c, level;
};

inline std::vector<Px> roi_pixels(const Levels& q) {
    std::vector<Px> v;
    for (int r = 0; r < q.rows; ++r)
        for (int c = 0; c < q.cols; ++c)
            if (q(r, c) > 0) v.push_back({r, c, q(r, c)});
    return v;
}

inline bool chebyshev1(const Px& a, const Px& b) {
    return std::max(std::abs(a.r - b.r), std::abs(a.c - b.c)) == 1;
}

/// Fixed-bin-count quantization written out directly.
inline Levels quantize(const racmf::Image& img, const racmf::Mask& roi, int n) {
    double lo = 1e300, hi = -1e300;
    for (size_t i = 0; i < img.size(); ++i)
        if (roi[i]) {
            lo = std::min(lo, static_cast<double>(img[i]));
            hi = std::max(hi, static_cast<double>(img[i]));
        }
    Levels q(img.rows, img.cols, 0);
    for (size_t i = 0; i < img.size(); ++i) {
        if (!roi[i]) continue;
        if (hi == lo) {
            q[i] = 1;
            continue;
        }
        int b = static_cast<int>(std::floor((img[i] - lo) / (hi - lo) * n)) + 1;
        if (b > n) b = n;
        q[i] = b;
    }
    return q;
}

inline std::map<std::string, double> first_order(const racmf::Image& img, const racmf::Mask& roi) {
    std::vector<double> v;
    for (size_t i = 0; i < img.size(); ++i)
        if (roi[i]) v.push_back(img[i]);
    const double n = static_cast<double>(v.size());
    double mean = 0, energy = 0;
    for (double x : v) {
        mean += x / n;
        energy += x * x;
    }
    double var = 0, m3 = 0, m4 = 0;
    for (double x : v) {
        var += std::pow(x - mean, 2) / n;
        m3 += std::pow(x - mean, 3) / n;
        m4 += std::pow(x - mean, 4) / n;
    }
    const Levels q = quantize(img, roi, 32);
    double entropy = 0;
    for (int l = 1; l <= 32; ++l) {
        double cnt = 0;
        for (size_t i = 0; i < q.size(); ++i) cnt += q[i] == l;
        if (cnt > 0) entropy -= cnt / n * std::log2(cnt / n);
    }
    return {{"firstorder.mean", mean},
            {"firstorder.variance", var},
            {"firstorder.skewness", var > 0 ? m3 / std::pow(var, 1.5) : 0.0},
            {"firstorder.kurtosis", var > 0 ? m4 / (var * var) - 3.0 : 0.0},
            {"firstorder.energy", energy},
            {"firstorder.entropy", entropy}};
}

inline std::map<std::string, double> glcm(const Levels& q, int n) {
    const auto px = roi_pixels(q);
    const int offs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
    std::vector<std::vector<double>> P(n, std::vector<double>(n, 0.0));
    int used = 0;
    for (const auto& o : offs) {
        std::vector<std::vector<double>> M(n, std::vector<double>(n, 0.0));
        double total = 0;
        // every ordered pair whose displacement is +offset or -offset
        for (const auto& a : px)
            for (const auto& b : px) {
                const int dr = b.r - a.r, dc = b.c - a.c;
                if ((dr == o[0] && dc == o[1]) || (dr == -o[0] && dc == -o[1])) {
                    M[a.level - 1][b.level - 1] += 1;
                    total += 1;
                }
            }
        if (total == 0) continue;
        ++used;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) P[i][j] += M[i][j] / total;
    }
    for (auto& row : P)
        for (auto& x : row) x /= used;
    double mu_i = 0, mu_j = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            mu_i += (i + 1) * P[i][j];
            mu_j += (j + 1) * P[i][j];
        }
    double si = 0, sj = 0, cov = 0, contrast = 0, energy = 0, homog = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            si += std::pow(i + 1 - mu_i, 2) * P[i][j];
            sj += std::pow(j + 1 - mu_j, 2) * P[i][j];
            cov += (i + 1 - mu_i) * (j + 1 - mu_j) * P[i][j];
            contrast += (i - j) * (i - j) * P[i][j];
            energy += P[i][j] * P[i][j];
            homog += P[i][j] / (1.0 + (i - j) * (i - j));
        }
    const double sd = std::sqrt(si) * std::sqrt(sj);
    return {{"glcm.contrast", contrast},
            {"glcm.correlation", sd < 1e-12 ? 1.0 : cov / sd},
            {"glcm.energy", energy},
            {"glcm.homogeneity", homog}};
}

inline int level_at(const Levels& q, int r, int c) {
    if (r < 0 || c < 0 || r >= q.rows || c >= q.cols) return 0;
    return q(r, c);
}

inline std::map<std::string, double> glrlm(const Levels& q) {
    const int dirs[4][2] = {{0, 1}, {-1, 1}, {1, 0}, {1, 1}};
    const auto px = roi_pixels(q);
    const double np = static_cast<double>(px.size());
    std::map<std::string, double> out{
        {"glrlm.sre", 0}, {"glrlm.lre", 0}, {"glrlm.gln", 0}, {"glrlm.rln", 0}, {"glrlm.rp", 0}};
    const int maxlen = std::max(q.rows, q.cols);
    for (const auto& d : dirs) {
        // maximal segments: same level for L pixels, different (or outside) just before and after
        std::map<std::pair<int, int>, double> runs;  // (level, length) -> count
        for (const auto& p : px)
            for (int L = 1; L <= maxlen; ++L) {
                bool ok = true;
                for (int s = 0; s < L && ok; ++s) ok = level_at(q, p.r + s * d[0], p.c + s * d[1]) == p.level;
                if (!ok) break;
                if (level_at(q, p.r - d[0], p.c - d[1]) == p.level) continue;
                if (level_at(q, p.r + L * d[0], p.c + L * d[1]) == p.level) continue;
                runs[{p.level, L}] += 1;
            }
        double nr = 0, sre = 0, lre = 0;
        std::map<int, double> by_g, by_l;
        for (const auto& [k, v] : runs) {
            nr += v;
            sre += v / (k.second * k.second);
            lre += v * k.second * k.second;
            by_g[k.first] += v;
            by_l[k.second] += v;
        }
        double gln = 0, rln = 0;
        for (const auto& [k, v] : by_g) gln += v * v;
        for (const auto& [k, v] : by_l) rln += v * v;
        out["glrlm.sre"] += sre / nr / 4;
        out["glrlm.lre"] += lre / nr / 4;
        out["glrlm.gln"] += gln / nr / 4;
        out["glrlm.rln"] += rln / nr / 4;
        out["glrlm.rp"] += nr / np / 4;
    }
    return out;
}

inline std::map<std::string, double> glszm(const Levels& q) {
    auto px = roi_pixels(q);
    // label propagation until fixpoint
    std::vector<int> label(px.size());
    for (size_t i = 0; i < px.size(); ++i) label[i] = static_cast<int>(i);
    for (bool changed = true; changed;) {
        changed = false;
        for (size_t i = 0; i < px.size(); ++i)
            for (size_t j = 0; j < px.size(); ++j)
                if (px[i].level == px[j].level && chebyshev1(px[i], px[j]) && label[j] < label[i]) {
                    label[i] = label[j];
                    changed = true;
                }
    }
    std::map<int, double> size;
    for (int l : label) size[l] += 1;
    double nz = 0, sze = 0, lze = 0;
    for (const auto& [l, s] : size) {
        nz += 1;
        sze += 1.0 / (s * s);
        lze += s * s;
    }
    return {{"glszm.sze", sze / nz}, {"glszm.lze", lze / nz}, {"glszm.zp", nz / static_cast<double>(px.size())}};
}

inline std::map<std::string, double> gldm(const Levels& q) {
    const auto px = roi_pixels(q);
    std::map<std::pair<int, int>, double> M;  // (level, dependence)
    for (const auto& a : px) {
        int dep = 1;
        for (const auto& b : px)
            if (chebyshev1(a, b) && a.level == b.level) ++dep;
        M[{a.level, dep}] += 1;
    }
    const double n = static_cast<double>(px.size());
    double sde = 0, lde = 0;
    std::map<int, double> by_dep;
    for (const auto& [k, v] : M) {
        sde += v / (k.second * k.second);
        lde += v * k.second * k.second;
        by_dep[k.second] += v;
    }
    double dn = 0;
    for (const auto& [k, v] : by_dep) dn += v * v;
    return {{"gldm.sde", sde / n}, {"gldm.lde", lde / n}, {"gldm.dn", dn / n}};
}

inline std::map<std::string, double> ngtdm(const Levels& q, int n) {
    const auto px = roi_pixels(q);
    std::vector<double> s(n + 1, 0), cnt(n + 1, 0);
    double nv = 0;
    for (const auto& a : px) {
        double sum = 0, k = 0;
        for (const auto& b : px)
            if (chebyshev1(a, b)) {
                sum += b.level;
                k += 1;
            }
        if (k == 0) continue;
        s[a.level] += std::abs(a.level - sum / k);
        cnt[a.level] += 1;
        nv += 1;
    }
    std::vector<double> p(n + 1, 0);
    double ngp = 0, ps = 0, stot = 0;
    for (int i = 1; i <= n; ++i) {
        p[i] = cnt[i] / nv;
        if (p[i] > 0) ngp += 1;
        ps += p[i] * s[i];
        stot += s[i];
    }
    double contrast = 0, busy_den = 0, pair = 0;
    for (int i = 1; i <= n; ++i)
        for (int j = 1; j <= n; ++j)
            if (p[i] > 0 && p[j] > 0) {
                pair += p[i] * p[j] * (i - j) * (i - j);
                busy_den += std::abs(i * p[i] - j * p[j]);
            }
    if (ngp > 1) contrast = pair / (ngp * (ngp - 1)) * stot / nv;
    return {{"ngtdm.coarseness", ps < 1e-8 ? 1e8 : 1.0 / ps},
            {"ngtdm.contrast", contrast},
            {"ngtdm.busyness", (ngp > 1 && busy_den > 0) ? ps / busy_den : 0.0}};
}

/// All 24 features of an image/ROI through the naive path.
inline std::map<std::string, double> all_features(const racmf::Image& img, const racmf::Mask& roi, int n) {
    auto out = first_order(img, roi);
    const Levels q = quantize(img, roi, n);
    for (const auto& part : {glcm(q, n), glrlm(q), glszm(q), gldm(q), ngtdm(q, n)})
        out.insert(part.begin(), part.end());
    return out;
}

/// 8-connected component count of a binary mask by label propagation.
inline int count_components(const racmf::Mask& m) {
    Levels q(m.rows, m.cols, 0);
    for (size_t i = 0; i < m.size(); ++i) q[i] = m[i] ? 1 : 0;
    const auto z = glszm(q);
    return static_cast<int>(std::lround(z.at("glszm.zp") * static_cast<double>(roi_pixels(q).size())));
}

}  // namespace oracle
