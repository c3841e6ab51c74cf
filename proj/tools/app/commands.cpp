#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include "app.hpp"
#include "racmf/container.hpp"

namespace fs = std::filesystem;

namespace racmf::app {

namespace {

std::ostream& log_of(const CommandContext& ctx) {
    static std::ostringstream sink;
    if (ctx.log) return *ctx.log;
    sink.str("");
    return sink;
}

struct SplitData {
    Manifest manifest;
    std::vector<ManifestEntry> entries;
    std::vector<ImagePair> pairs;

    std::vector<const ImagePair*> pointers() const {
        std::vector<const ImagePair*> p;
        for (const auto& x : pairs) p.push_back(&x);
        return p;
    }
};

SplitData load_split(const fs::path& manifest_path, const std::string& split) {
    if (!fs::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path.string());
    SplitData d;
    d.manifest = load_manifest(manifest_path);
    d.entries = d.manifest.split(split);
    for (const auto& e : d.entries) d.pairs.push_back(read_pair(d.manifest.resolve(e)));
    return d;
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

double round6(double v) { return std::round(v * 1e6) / 1e6; }

/// Accepts either an enhance run directory or the enhanced/ directory inside it.
fs::path resolve_images_dir(const fs::path& dir) {
    if (fs::is_directory(dir / "enhanced")) return dir / "enhanced";
    if (!fs::is_directory(dir)) throw IoError("image directory not found: " + dir.string());
    return dir;
}

std::vector<Image> load_enhanced_for(const fs::path& dir, const std::vector<ManifestEntry>& entries) {
    std::vector<std::string> missing;
    for (const auto& e : entries)
        if (!fs::is_regular_file(dir / (e.pair_id + ".racmf"))) missing.push_back(e.pair_id);
    if (!missing.empty()) {
        std::string list;
        for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
        throw PreconditionError("missing enhanced images for " + std::to_string(missing.size()) + " pair(s): " + list);
    }
    std::vector<Image> out;
    for (const auto& e : entries) out.push_back(read_enhanced(dir / (e.pair_id + ".racmf")));
    return out;
}

struct NpsSet {
    std::vector<Image> input, enhanced, target;
};

NpsSet collect_patches(const std::vector<ImagePair>& pairs, const std::vector<Image>& enhanced, const EvalConfig& ev) {
    NpsSet s;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        for (const auto& at : homogeneous_patches(p.target, p.body_mask, ev.nps_patch, ev.nps_fraction)) {
            s.input.push_back(crop(p.source, at, ev.nps_patch));
            s.enhanced.push_back(crop(enhanced[i], at, ev.nps_patch));
            s.target.push_back(crop(p.target, at, ev.nps_patch));
        }
    }
    return s;
}

std::string svg_plot(const std::vector<double>& x, const std::vector<std::pair<std::string, std::vector<double>>>& ys) {
    const double W = 480, H = 320, L = 60, R = 20, T = 20, B = 40;
    double ymax = 0.0;
    for (const auto& [name, y] : ys)
        for (double v : y) ymax = std::max(ymax, v);
    if (ymax <= 0.0) ymax = 1.0;
    const double xmax = x.empty() ? 0.5 : std::max(x.back(), 1e-12);
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8
       << "\" font-size=\"12\" text-anchor=\"middle\">spatial frequency (cycles/pixel)</text>\n";
    os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
       << (T + H - B) / 2 << ")\" text-anchor=\"middle\">NPS</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << ymax
       << "</text>\n";
    for (size_t k = 0; k < ys.size(); ++k) {
        os << "<polyline fill=\"none\" stroke=\"" << colors[k % 4] << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < x.size(); ++i) {
            const double px = L + (W - L - R) * x[i] / xmax;
            const double py = H - B - (H - T - B) * ys[k].second[i] / ymax;
            os << px << ',' << py << ' ';
        }
        os << "\"/>\n";
        os << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (k + 1) << "\" font-size=\"12\" fill=\""
           << colors[k % 4] << "\" text-anchor=\"end\">" << ys[k].first << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

nlohmann::ordered_json json_array(const std::vector<double>& v) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (double x : v) a.push_back(x);
    return a;
}

}  // namespace

// ---- files and patches --------------------------------------------------------------

void write_enhanced(const fs::path& path, const std::string& pair_id, const Image& image) {
    Container c;
    c.meta = {{"kind", "enhanced"}, {"format_version", 1}, {"pair_id", pair_id}};
    c.arrays.push_back(NamedArray::from_image("x_enh", image));
    write_container(path, c);
}

Image read_enhanced(const fs::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "enhanced") throw FormatError(path.string() + " is not an enhanced-image file");
    return c.get("x_enh").to_image();
}

std::vector<PatchLocation> homogeneous_patches(const Image& target, const Mask& body, int side, double fraction) {
    struct Candidate {
        double var;
        PatchLocation at;
    };
    std::vector<Candidate> cands;
    for (int r = 0; r + side <= target.rows; r += side)
        for (int c = 0; c + side <= target.cols; c += side) {
            bool inside = true;
            double s = 0.0, s2 = 0.0;
            for (int y = r; y < r + side && inside; ++y)
                for (int x = c; x < c + side; ++x) {
                    if (!body(y, x)) {
                        inside = false;
                        break;
                    }
                    s += target(y, x);
                    s2 += static_cast<double>(target(y, x)) * target(y, x);
                }
            if (!inside) continue;
            const double n = static_cast<double>(side) * side;
            cands.push_back({s2 / n - (s / n) * (s / n), {r, c}});
        }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.var < b.var; });
    const size_t keep =
        cands.empty() ? 0 : std::max<size_t>(1, static_cast<size_t>(std::floor(fraction * cands.size())));
    std::vector<PatchLocation> out;
    for (size_t i = 0; i < keep; ++i) out.push_back(cands[i].at);
    return out;
}

Image crop(const Image& img, const PatchLocation& at, int side) {
    if (at.row < 0 || at.col < 0 || at.row + side > img.rows || at.col + side > img.cols)
        throw DimensionError("crop: patch outside the image");
    Image p(side, side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) p(r, c) = img(at.row + r, at.col + c);
    return p;
}

// ---- commands ---------------------------------------------------------------------------

GenDataResult cmd_gen_data(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    GenDataResult res;
    res.run_dir = create_run_dir(ctx.out_base, "gen-data");
    const Manifest m = build_dataset(cfg.data.n_pairs, cfg.data.phantom, cfg.data.degradation, res.run_dir,
                                     cfg.data.seed, cfg.data.splits);
    res.manifest = res.run_dir / "manifest.json";
    res.n_train = static_cast<int>(m.split("train").size());
    res.n_val = static_cast<int>(m.split("val").size());
    res.n_test = static_cast<int>(m.split("test").size());
    write_run_record(res.run_dir, "gen-data", cfg, {}, {res.manifest}, started);
    log_of(ctx) << "manifest: " << res.manifest.string() << "\n"
                << "pairs: train=" << res.n_train << " val=" << res.n_val << " test=" << res.n_test << "\n";
    return res;
}

TrainBackboneOutput cmd_train_backbone(const CommandContext& ctx, const fs::path& manifest) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    const SplitData train = load_split(manifest, "train");
    if (train.pairs.empty()) throw PreconditionError("the manifest has no training pairs");
    SplitData val = load_split(manifest, "val");
    auto& log = log_of(ctx);
    const bool val_fallback = val.pairs.empty();
    if (val_fallback) log << "val split is empty; validation L_img uses the training split\n";
    const auto train_ptrs = train.pointers();
    const auto val_ptrs = val_fallback ? train_ptrs : val.pointers();
    const std::uint64_t eval_seed = derive_seed(cfg.backbone.seed, 77);

    TrainBackboneOutput out;
    out.run_dir = create_run_dir(ctx.out_base, "train-backbone");
    ConditionalUNet net(cfg.backbone);
    std::ostringstream csv;
    csv << "step,total,mf,img,val_img\n";
    double last_val = evaluate_image_loss(net, val_ptrs, eval_seed);
    const int steps = cfg.backbone.steps;
    train_backbone(net, train_ptrs, cfg.backbone, [&](const LossRecord& r) {
        const bool eval_now = (r.step + 1) % cfg.eval.val_every == 0 || r.step + 1 == steps;
        csv << r.step << ',' << fmt(r.total) << ',' << fmt(r.mf) << ',' << fmt(r.img) << ',';
        if (eval_now) {
            last_val = evaluate_image_loss(net, val_ptrs, eval_seed);
            csv << fmt(last_val);
            log << "step " << r.step << " loss " << fmt(r.total) << " val_img " << fmt(last_val) << "\n";
        }
        csv << '\n';
    });
    out.val_img = last_val;
    out.train_img = evaluate_image_loss(net, train_ptrs, eval_seed);
    out.checkpoint = out.run_dir / "backbone.racmf";
    out.loss_csv = out.run_dir / "loss.csv";
    save_backbone(net, out.checkpoint, steps);
    write_file_atomic(out.loss_csv, csv.str());
    write_run_record(out.run_dir, "train-backbone", cfg, {manifest}, {out.checkpoint, out.loss_csv}, started);
    log << "checkpoint: " << out.checkpoint.string() << "\n"
        << "final L_img: train=" << fmt(out.train_img) << " val=" << fmt(out.val_img) << "\n";
    return out;
}

TrainControllerOutput cmd_train_controller(const CommandContext& ctx, const fs::path& manifest,
                                           const fs::path& backbone) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    require_file(backbone, "backbone checkpoint");
    const std::string bytes_before = read_file(backbone);
    const ConditionalUNet net = load_backbone(backbone);
    const SplitData train = load_split(manifest, "train");
    if (train.pairs.empty()) throw PreconditionError("the manifest has no training pairs");
    auto& log = log_of(ctx);

    TrainControllerOutput out;
    out.run_dir = create_run_dir(ctx.out_base, "train-controller");
    const auto res = train_controller(net, train.pointers(), cfg.rollout, cfg.controller, cfg.ppo, cfg.reward,
                                      [&](const RewardRecord& r) {
                                          log << "episode " << r.episode << " mean_reward " << fmt(r.mean_reward)
                                              << " micro_steps " << fmt(r.mean_micro_steps) << "\n";
                                      });
    if (read_file(backbone) != bytes_before)
        throw ContractError("backbone checkpoint file changed during controller training");
    out.checkpoint = out.run_dir / "controller.racmf";
    out.reward_csv = out.run_dir / "reward.csv";
    save_controller(res.controller, out.checkpoint, cfg.ppo.n_episodes);
    write_file_atomic(out.reward_csv, reward_history_csv(res.history));
    out.final_mean_reward = res.history.empty() ? 0.0 : res.history.back().mean_reward;
    write_run_record(out.run_dir, "train-controller", cfg, {manifest, backbone}, {out.checkpoint, out.reward_csv},
                     started);
    log << "checkpoint: " << out.checkpoint.string() << "\n";
    return out;
}

EnhanceOutput cmd_enhance(const CommandContext& ctx, const EnhanceOptions& opt) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    require_file(opt.backbone, "backbone checkpoint");
    std::string policy = opt.policy.empty() ? (opt.controller ? "controller" : "cmf") : opt.policy;
    std::optional<Controller> ctrl;
    if (policy == "controller") {
        if (!opt.controller) throw SpecError("--policy", "controller decoding needs --controller PATH");
        require_file(*opt.controller, "controller checkpoint");
        ctrl.emplace(load_controller(*opt.controller));
        if (ctrl->config().m_max != cfg.rollout.m_max)
            throw SpecError("controller.m_max", "checkpoint m_max differs from rollout.m_max");
    } else if (policy != "cmf" && policy != "zero" && policy != "uniform" && policy != "random") {
        throw SpecError("--policy", "unknown policy '" + policy + "' (cmf, zero, uniform, random, controller)");
    }
    const ConditionalUNet net = load_backbone(opt.backbone);
    const std::string split = opt.split.empty() ? cfg.eval.split : opt.split;
    const SplitData data = load_split(opt.manifest, split);
    if (data.pairs.empty()) throw PreconditionError("split '" + split + "' has no pairs");

    EnhanceOutput out;
    out.run_dir = create_run_dir(ctx.out_base, "enhance");
    out.enhanced_dir = out.run_dir / "enhanced";
    fs::create_directories(out.enhanced_dir);
    fs::create_directories(out.run_dir / "traces");
    std::ostringstream csv;
    csv << "pair_id,total_evals,coarse_steps,executed_micro_steps,tile_micro_steps,stopped_early\n";
    std::vector<fs::path> artifacts;
    for (size_t i = 0; i < data.pairs.size(); ++i) {
        const auto& pair = data.pairs[i];
        std::unique_ptr<RefinementPolicy> pol;
        if (policy == "zero") pol = std::make_unique<ZeroBudgetPolicy>();
        if (policy == "uniform") pol = std::make_unique<UniformBudgetPolicy>(cfg.rollout.m_max);
        if (policy == "random") pol = std::make_unique<RandomPolicy>(cfg.rollout.m_max, cfg.controller.b_max);
        if (policy == "controller") pol = std::make_unique<ControllerPolicy>(*ctrl, DecodeMode::Greedy);
        Rng rng(derive_seed(cfg.rollout.init_seed, data.entries[i].seed));
        const EnhanceResult r = enhance(net, pol.get(), pair.source, cfg.rollout, rng, &pair.body_mask);
        const int coarse = static_cast<int>(r.trace.steps.size());
        int tile_steps = 0;
        for (const auto& s : r.trace.steps) tile_steps += s.tile_micro_steps;
        if (r.trace.total_evals != coarse + r.trace.executed_micro_steps())
            throw ContractError("evaluation accounting mismatch for " + pair.pair_id);
        const fs::path img = out.enhanced_dir / (pair.pair_id + ".racmf");
        const fs::path trace = out.run_dir / "traces" / (pair.pair_id + ".json");
        write_enhanced(img, pair.pair_id, r.image);
        write_file_atomic(trace, r.trace.to_json().dump(2) + "\n");
        artifacts.push_back(img);
        artifacts.push_back(trace);
        csv << pair.pair_id << ',' << r.trace.total_evals << ',' << coarse << ',' << r.trace.executed_micro_steps()
            << ',' << tile_steps << ',' << (r.trace.stopped_early ? 1 : 0) << '\n';
        out.mean_evals += static_cast<double>(r.trace.total_evals) / static_cast<double>(data.pairs.size());
    }
    out.n_images = static_cast<int>(data.pairs.size());
    out.summary_csv = out.run_dir / "summary.csv";
    write_file_atomic(out.summary_csv, csv.str());
    artifacts.push_back(out.summary_csv);
    std::vector<fs::path> inputs{opt.manifest, opt.backbone};
    if (opt.controller && policy == "controller") inputs.push_back(*opt.controller);
    write_run_record(out.run_dir, "enhance", cfg, inputs, artifacts, started);
    log_of(ctx) << "enhanced " << out.n_images << " images (" << policy << ") into " << out.enhanced_dir.string()
                << "; mean network evaluations " << fmt(out.mean_evals) << "\n";
    return out;
}

EvalOutput cmd_eval(const CommandContext& ctx, const fs::path& manifest, const fs::path& enhanced_dir,
                    const std::string& split_arg) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    const std::string split = split_arg.empty() ? cfg.eval.split : split_arg;
    const SplitData data = load_split(manifest, split);
    if (data.pairs.empty()) throw PreconditionError("split '" + split + "' has no pairs");
    const fs::path dir = resolve_images_dir(enhanced_dir);
    const std::vector<Image> enhanced = load_enhanced_for(dir, data.entries);

    nlohmann::ordered_json per_image = nlohmann::ordered_json::array();
    std::ostringstream csv;
    csv << "pair_id,psnr,ssim,roi_psnr,roi_ssim\n";
    std::vector<RadiomicFeatureVector> ref, test;
    double m_psnr = 0, m_ssim = 0, m_rpsnr = 0, m_rssim = 0, i_psnr = 0, i_ssim = 0, i_rpsnr = 0, i_rssim = 0;
    const double n = static_cast<double>(data.pairs.size());
    int skipped = 0;
    for (size_t i = 0; i < data.pairs.size(); ++i) {
        const auto& p = data.pairs[i];
        const Image& x = enhanced[i];
        if (x.rows != p.target.rows || x.cols != p.target.cols)
            throw DimensionError("enhanced image for " + p.pair_id + " has the wrong size");
        bool has_lesion = false;
        for (auto v : p.lesion_mask.data) has_lesion = has_lesion || v;
        const Mask& roi = has_lesion ? p.lesion_mask : p.body_mask;
        const double ps = psnr(x, p.target, kNormalizedRange).db, ss = ssim_normalized(x, p.target);
        const double rps = psnr_masked(x, p.target, roi, kNormalizedRange).db;
        const double rss = ssim_normalized_masked(x, p.target, roi);
        per_image.push_back({{"pair_id", p.pair_id}, {"psnr", ps}, {"ssim", ss}, {"roi_psnr", rps}, {"roi_ssim", rss}});
        csv << p.pair_id << ',' << fmt(ps) << ',' << fmt(ss) << ',' << fmt(rps) << ',' << fmt(rss) << '\n';
        m_psnr += ps / n;
        m_ssim += ss / n;
        m_rpsnr += rps / n;
        m_rssim += rss / n;
        i_psnr += psnr(p.source, p.target, kNormalizedRange).db / n;
        i_ssim += ssim_normalized(p.source, p.target) / n;
        i_rpsnr += psnr_masked(p.source, p.target, roi, kNormalizedRange).db / n;
        i_rssim += ssim_normalized_masked(p.source, p.target, roi) / n;
        if (!has_lesion) {
            ++skipped;
            continue;
        }
        try {
            RadiomicFeatureVector r = feature_vector(p.target, p.lesion_mask, cfg.eval.n_levels);
            RadiomicFeatureVector t = feature_vector(x, p.lesion_mask, cfg.eval.n_levels);
            ref.push_back(std::move(r));
            test.push_back(std::move(t));
        } catch (const FeatureUndefinedError&) {
            ++skipped;
        }
    }

    nlohmann::ordered_json report;
    report["version"] = 1;
    report["split"] = split;
    report["n_images"] = data.pairs.size();
    report["per_image"] = per_image;
    report["summary"] = {{"psnr", m_psnr},         {"ssim", m_ssim},         {"roi_psnr", m_rpsnr},
                         {"roi_ssim", m_rssim},    {"input_psnr", i_psnr},   {"input_ssim", i_ssim},
                         {"input_roi_psnr", i_rpsnr}, {"input_roi_ssim", i_rssim}};
    std::ostringstream ccc_csv;
    ccc_csv << "feature_id,family,ccc\n";
    if (ref.size() >= 2) {
        const CCCReport c = ccc_report(ref, test);
        nlohmann::ordered_json pf, fam;
        for (size_t k = 0; k < c.feature_ids.size(); ++k) {
            pf[c.feature_ids[k]] = c.per_feature[k];
            ccc_csv << c.feature_ids[k] << ',' << family_of(c.feature_ids[k]) << ',' << fmt(c.per_feature[k]) << '\n';
        }
        for (const auto& [f, st] : c.per_family) fam[f] = {{"mean", st.mean}, {"std", st.std}};
        report["ccc"] = {{"per_feature", pf}, {"per_family", fam}, {"overall", c.overall}, {"n_pairs", ref.size()},
                         {"n_skipped", skipped}};
    } else {
        // concordance needs a cohort of at least two images with valid lesion ROIs
        report["ccc"] = nullptr;
    }
    const NpsSet patches = collect_patches(data.pairs, enhanced, cfg.eval);
    if (!patches.target.empty()) {
        const NPSProfile pt = nps(patches.target), pe = nps(patches.enhanced), pi = nps(patches.input);
        report["nps"] = {{"bin_centers", json_array(pt.bin_centers)},
                         {"reference_profile", json_array(pt.profile)},
                         {"test_profile", json_array(pe.profile)},
                         {"input_profile", json_array(pi.profile)},
                         {"n_patches", pt.n_patches},
                         {"distance_test_reference", round6(profile_distance(pe.profile, pt.profile))},
                         {"distance_input_reference", round6(profile_distance(pi.profile, pt.profile))}};
    } else {
        report["nps"] = nullptr;
    }

    EvalOutput out;
    out.run_dir = create_run_dir(ctx.out_base, "eval");
    out.report_json = out.run_dir / "report.json";
    out.per_image_csv = out.run_dir / "per_image.csv";
    write_file_atomic(out.report_json, report.dump(2) + "\n");
    write_file_atomic(out.per_image_csv, csv.str());
    write_file_atomic(out.run_dir / "ccc.csv", ccc_csv.str());
    write_run_record(out.run_dir, "eval", cfg, {manifest}, {out.report_json, out.per_image_csv, out.run_dir / "ccc.csv"},
                     started);
    out.report = std::move(report);
    log_of(ctx) << "evaluated " << data.pairs.size() << " images: PSNR " << fmt(m_psnr) << " dB (input "
                << fmt(i_psnr) << "), SSIM " << fmt(m_ssim) << ", ROI PSNR " << fmt(m_rpsnr) << ", ROI SSIM "
                << fmt(m_rssim) << "\nreport: " << out.report_json.string() << "\n";
    return out;
}

NpsOutput cmd_nps(const CommandContext& ctx, const fs::path& manifest, const fs::path& images_dir,
                  const std::string& split_arg) {
    const auto& cfg = ctx.cfg;
    const std::string started = utc_timestamp();
    const std::string split = split_arg.empty() ? cfg.eval.split : split_arg;
    const SplitData data = load_split(manifest, split);
    if (data.pairs.empty()) throw PreconditionError("split '" + split + "' has no pairs");
    const std::vector<Image> enhanced = load_enhanced_for(resolve_images_dir(images_dir), data.entries);
    const NpsSet patches = collect_patches(data.pairs, enhanced, cfg.eval);
    if (patches.target.empty()) throw PreconditionError("no homogeneous patch fits inside any body region");
    const NPSProfile pt = nps(patches.target), pe = nps(patches.enhanced), pi = nps(patches.input);

    NpsOutput out;
    out.d_input_target = round6(profile_distance(pi.profile, pt.profile));
    out.d_enhanced_target = round6(profile_distance(pe.profile, pt.profile));
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["split"] = split;
    j["n_patches"] = pt.n_patches;
    j["patch_side"] = cfg.eval.nps_patch;
    j["bin_centers"] = json_array(pt.bin_centers);
    j["input_profile"] = json_array(pi.profile);
    j["enhanced_profile"] = json_array(pe.profile);
    j["target_profile"] = json_array(pt.profile);
    j["distance"] = {{"input_target", out.d_input_target},
                     {"enhanced_target", out.d_enhanced_target},
                     {"input_enhanced", round6(profile_distance(pi.profile, pe.profile))}};
    std::ostringstream csv;
    csv << "bin_center,input,enhanced,target\n";
    for (size_t k = 0; k < pt.bin_centers.size(); ++k)
        csv << fmt(pt.bin_centers[k]) << ',' << fmt(pi.profile[k]) << ',' << fmt(pe.profile[k]) << ','
            << fmt(pt.profile[k]) << '\n';

    out.run_dir = create_run_dir(ctx.out_base, "nps");
    out.json = out.run_dir / "nps.json";
    out.csv = out.run_dir / "nps.csv";
    out.plot = out.run_dir / "nps.svg";
    write_file_atomic(out.json, j.dump(2) + "\n");
    write_file_atomic(out.csv, csv.str());
    write_file_atomic(out.plot, svg_plot(pt.bin_centers, {{"input", pi.profile},
                                                          {"enhanced", pe.profile},
                                                          {"target", pt.profile}}));
    write_run_record(out.run_dir, "nps", cfg, {manifest}, {out.json, out.csv, out.plot}, started);
    std::ostringstream d;
    d << std::fixed << std::setprecision(6) << "NPS distance to target: input " << out.d_input_target << ", enhanced "
      << out.d_enhanced_target << " (" << pt.n_patches << " patches)\n";
    log_of(ctx) << d.str();
    return out;
}

}  // namespace racmf::app
