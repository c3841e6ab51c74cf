#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

#include <toml.hpp>

#include "app.hpp"
#include "racmf/container.hpp"
#include "racmf/json_util.hpp"

namespace fs = std::filesystem;

namespace racmf::app {

namespace {

nlohmann::ordered_json phantom_json(const PhantomSpec& p) {
    nlohmann::ordered_json j;
    j["height"] = p.height;
    j["width"] = p.width;
    j["n_lesions"] = p.n_lesions;
    j["lesion_radius_min"] = p.lesion_radius_min;
    j["lesion_radius_max"] = p.lesion_radius_max;
    j["background_texture_scale"] = p.background_texture_scale;
    j["texture_amplitude"] = p.texture_amplitude;
    j["lesion_contrast_min"] = p.lesion_contrast_min;
    j["lesion_contrast_max"] = p.lesion_contrast_max;
    return j;
}

PhantomSpec phantom_from(const nlohmann::json& j) {
    PhantomSpec p;
    StrictObject o(j, "data.phantom");
    o.get("height", p.height)
        .get("width", p.width)
        .get("n_lesions", p.n_lesions)
        .get("lesion_radius_min", p.lesion_radius_min)
        .get("lesion_radius_max", p.lesion_radius_max)
        .get("background_texture_scale", p.background_texture_scale)
        .get("texture_amplitude", p.texture_amplitude)
        .get("lesion_contrast_min", p.lesion_contrast_min)
        .get("lesion_contrast_max", p.lesion_contrast_max);
    o.finish();
    return p;
}

nlohmann::ordered_json degradation_json(const DegradationTemplate& d) {
    nlohmann::ordered_json j;
    j["mode"] = d.mode;
    j["base_blur"] = d.base_blur;
    j["base_noise"] = d.base_noise;
    j["high_blur"] = d.high_blur;
    j["high_noise"] = d.high_noise;
    j["gain_jitter"] = d.gain_jitter;
    j["quadrant"] = d.quadrant;
    return j;
}

DegradationTemplate degradation_from(const nlohmann::json& j) {
    DegradationTemplate d;
    StrictObject o(j, "data.degradation");
    o.get("mode", d.mode)
        .get("base_blur", d.base_blur)
        .get("base_noise", d.base_noise)
        .get("high_blur", d.high_blur)
        .get("high_noise", d.high_noise)
        .get("gain_jitter", d.gain_jitter)
        .get("quadrant", d.quadrant);
    o.finish();
    return d;
}

DataConfig data_from(const nlohmann::json& j, bool& seed_given) {
    DataConfig d;
    StrictObject o(j, "data");
    o.get("n_pairs", d.n_pairs);
    seed_given = o.has("seed");
    o.get("seed", d.seed);
    if (o.has("phantom")) d.phantom = phantom_from(o.raw("phantom"));
    if (o.has("degradation")) d.degradation = degradation_from(o.raw("degradation"));
    if (o.has("splits")) {
        StrictObject s(o.raw("splits"), "data.splits");
        s.get("train", d.splits.train).get("val", d.splits.val).get("test", d.splits.test);
        s.finish();
    }
    o.finish();
    return d;
}

EvalConfig eval_from(const nlohmann::json& j) {
    EvalConfig e;
    StrictObject o(j, "eval");
    o.get("split", e.split)
        .get("n_levels", e.n_levels)
        .get("nps_patch", e.nps_patch)
        .get("nps_fraction", e.nps_fraction)
        .get("val_every", e.val_every);
    o.finish();
    return e;
}

/// Parses a section with its own from_json, validating after seeds are filled in.
template <class T>
T section(const nlohmann::json& j, const char* key, bool& seed_given) {
    if (!j.contains(key)) {
        seed_given = false;
        return T{};
    }
    const nlohmann::json& s = j.at(key);
    if (!s.is_object()) throw SpecError(key, "expected a table/object");
    seed_given = s.contains("seed") || s.contains("init_seed");
    return T::from_json(s);
}

std::string hex(const unsigned char* p, unsigned n) {
    std::ostringstream os;
    for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(p[i]);
    return os.str();
}

}  // namespace

void ExperimentConfig::validate() const {
    data.phantom.validate();
    data.degradation.validate();
    if (data.n_pairs < 1) throw SpecError("data.n_pairs", "must be >= 1");
    const auto& s = data.splits;
    if (s.train < 0 || s.val < 0 || s.test < 0 || std::abs(s.train + s.val + s.test - 1.0) > 1e-9)
        throw SpecError("data.splits", "fractions must be >= 0 and sum to 1");
    backbone.validate();
    rollout.validate();
    controller.validate();
    ppo.validate();
    reward.validate();
    const int factor = 1 << (backbone.depth - 1);
    if (data.phantom.height % factor || data.phantom.width % factor)
        throw SpecError("data.phantom.size", "height and width must be divisible by 2^(backbone.depth - 1) = " +
                                                 std::to_string(factor));
    if (controller.m_max != rollout.m_max) throw SpecError("controller.m_max", "must equal rollout.m_max");
    if (eval.split != "train" && eval.split != "val" && eval.split != "test")
        throw SpecError("eval.split", "must be train, val or test");
    if (eval.n_levels < 2) throw SpecError("eval.n_levels", "must be >= 2");
    if (eval.nps_patch < 8) throw SpecError("eval.nps_patch", "must be >= 8");
    if (!(eval.nps_fraction > 0.0 && eval.nps_fraction <= 1.0)) throw SpecError("eval.nps_fraction", "must be in (0, 1]");
    if (eval.val_every < 1) throw SpecError("eval.val_every", "must be >= 1");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    nlohmann::ordered_json d;
    d["n_pairs"] = data.n_pairs;
    d["seed"] = data.seed;
    d["phantom"] = phantom_json(data.phantom);
    d["degradation"] = degradation_json(data.degradation);
    d["splits"] = {{"train", data.splits.train}, {"val", data.splits.val}, {"test", data.splits.test}};
    j["data"] = d;
    j["backbone"] = backbone.to_json();
    j["rollout"] = rollout.to_json();
    j["controller"] = controller.to_json();
    j["ppo"] = ppo.to_json();
    j["reward"] = reward.to_json();
    nlohmann::ordered_json e;
    e["split"] = eval.split;
    e["n_levels"] = eval.n_levels;
    e["nps_patch"] = eval.nps_patch;
    e["nps_fraction"] = eval.nps_fraction;
    e["val_every"] = eval.val_every;
    j["eval"] = e;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    StrictObject o(j, "");
    o.get("seed", c.seed).get("out_dir", c.out_dir);
    bool data_seed = false, bb_seed = false, ro_seed = false, ct_seed = false, ppo_seed = false, unused = false;
    if (o.has("data")) c.data = data_from(o.raw("data"), data_seed);
    c.backbone = section<BackboneConfig>(j, "backbone", bb_seed);
    c.rollout = section<RolloutConfig>(j, "rollout", ro_seed);
    c.controller = section<ControllerConfig>(j, "controller", ct_seed);
    c.ppo = section<PPOConfig>(j, "ppo", ppo_seed);
    c.reward = section<RewardConfig>(j, "reward", unused);
    for (const char* k : {"backbone", "rollout", "controller", "ppo", "reward"})
        if (o.has(k)) o.raw(k);
    if (o.has("eval")) c.eval = eval_from(o.raw("eval"));
    o.finish();
    if (!data_seed) c.data.seed = c.seed;
    if (!bb_seed) c.backbone.seed = c.seed;
    if (!ro_seed) c.rollout.init_seed = c.seed;
    if (!ct_seed) c.controller.seed = c.seed;
    if (!ppo_seed) c.ppo.seed = c.seed;
    c.validate();
    return c;
}

nlohmann::json read_config_file(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    const std::string text = read_file(path);
    if (path.extension() == ".toml") {
        toml::table tbl;
        try {
            tbl = toml::parse(text, path.string());
        } catch (const toml::parse_error& e) {
            std::ostringstream os;
            os << "TOML parse error in " << path.string() << ": " << e.description() << " at " << e.source().begin;
            throw FormatError(os.str());
        }
        std::ostringstream os;
        os << toml::json_formatter{tbl};
        return nlohmann::json::parse(os.str());
    }
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("JSON parse error in " + path.string() + ": " + e.what());
    }
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw SpecError("--set", "expected key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;
    }
    nlohmann::json* node = &doc;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) {
        if (part.empty()) throw SpecError("--set", "empty path component in '" + key + "'");
        path.push_back(part);
    }
    for (size_t i = 0; i + 1 < path.size(); ++i) {
        if (!node->is_object()) throw SpecError(key, "cannot descend into a non-object value");
        node = &(*node)[path[i]];
        if (node->is_null()) *node = nlohmann::json::object();
    }
    if (!node->is_object()) throw SpecError(key, "cannot descend into a non-object value");
    (*node)[path.back()] = value;
}

ExperimentConfig load_experiment(const std::optional<fs::path>& config_path, const std::vector<std::string>& overrides,
                                 const std::optional<std::string>& env_seed) {
    nlohmann::json doc = config_path ? read_config_file(*config_path) : nlohmann::json::object();
    if (!doc.is_object()) throw SpecError("config", "top level must be an object/table");
    for (const auto& a : overrides) apply_override(doc, a);
    if (env_seed) {
        std::uint64_t s = 0;
        size_t used = 0;
        try {
            s = std::stoull(*env_seed, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != env_seed->size()) throw SpecError("RACMF_SEED", "not an unsigned integer: " + *env_seed);
        doc["seed"] = s;
    }
    return ExperimentConfig::from_json(doc);
}

std::string git_blob_hash(const std::string& contents) {
    const std::string header = "blob " + std::to_string(contents.size()) + std::string(1, '\0');
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                    EVP_DigestUpdate(ctx, contents.data(), contents.size()) && EVP_DigestFinal_ex(ctx, md, &n);
    EVP_MD_CTX_free(ctx);
    if (!ok) throw Error("SHA-1 digest failed");
    return hex(md, n);
}

fs::path create_run_dir(const fs::path& base, const std::string& name) {
    std::error_code ec;
    fs::create_directories(base, ec);
    if (!fs::is_directory(base)) throw IoError("cannot create output directory " + base.string());
    for (int i = 0;; ++i) {
        const fs::path dir = base / (i == 0 ? name : name + "." + std::to_string(i));
        // create_directory reports false when the directory already exists
        if (fs::create_directory(dir, ec)) return dir;
        if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
    }
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

void write_run_record(const fs::path& run_dir, const std::string& command, const ExperimentConfig& cfg,
                      const std::vector<fs::path>& inputs, const std::vector<fs::path>& artifacts,
                      const std::string& started_at) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["command"] = command;
    j["config"] = cfg.to_json();
    nlohmann::ordered_json in = nlohmann::ordered_json::array();
    for (const auto& p : inputs) in.push_back({{"path", p.string()}, {"hash", git_blob_hash(read_file(p))}});
    j["inputs"] = in;
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& p : artifacts) out.push_back(fs::relative(p, run_dir).generic_string());
    j["artifacts"] = out;
    j["started_at"] = started_at;
    j["finished_at"] = utc_timestamp();
    write_file_atomic(run_dir / "run.json", j.dump(2) + "\n");
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ContractError*>(&e)) return 3;
    if (dynamic_cast<const NumericalError*>(&e)) return 3;
    if (dynamic_cast<const Error*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return 2;
    return 3;
}

}  // namespace racmf::app
