#pragma once

// Pipeline orchestration behind the racmf command-line tool: experiment
// configuration, run directories and one function per subcommand.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "racmf/cmf.hpp"
#include "racmf/controller.hpp"
#include "racmf/metrics.hpp"
#include "racmf/rl_trainer.hpp"
#include "racmf/rollout.hpp"
#include "racmf/synth_data.hpp"

namespace racmf::app {

struct DataConfig {
    int n_pairs = 64;
    PhantomSpec phantom;
    DegradationTemplate degradation;
    SplitFractions splits;
    std::uint64_t seed = 0;
};

struct EvalConfig {
    std::string split = "test";
    int n_levels = 32;
    /// Side of the square homogeneous patches used for the noise power spectrum.
    int nps_patch = 8;
    /// Fraction of candidate body tiles (lowest target variance first) kept as NPS patches.
    double nps_fraction = 0.1;
    /// Validation L_img is logged every this many backbone steps (and at the last step).
    int val_every = 100;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs";
    DataConfig data;
    BackboneConfig backbone;
    RolloutConfig rollout;
    ControllerConfig controller;
    PPOConfig ppo;
    RewardConfig reward;
    EvalConfig eval;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    /// Unknown keys are rejected. Section seeds that are not given explicitly
    /// take the global seed.
    static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Reads a JSON file, or a TOML file when the extension is .toml.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies "dotted.key=value" to a JSON document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// File (optional) + overrides + RACMF_SEED (when `env_seed` is set) -> validated config.
ExperimentConfig load_experiment(const std::optional<std::filesystem::path>& config_path,
                                 const std::vector<std::string>& overrides,
                                 const std::optional<std::string>& env_seed);

/// Git blob hash (SHA-1 of "blob <size>\0" + contents) as lowercase hex.
std::string git_blob_hash(const std::string& contents);

/// Creates base/name, or base/name.1, base/name.2, ... if taken; never reuses a directory.
std::filesystem::path create_run_dir(const std::filesystem::path& base, const std::string& name);

/// Writes run.json into the run directory.
void write_run_record(const std::filesystem::path& run_dir, const std::string& command,
                      const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& inputs,
                      const std::vector<std::filesystem::path>& artifacts, const std::string& started_at);

std::string utc_timestamp();

// ---- enhanced image files ---------------------------------------------------------

void write_enhanced(const std::filesystem::path& path, const std::string& pair_id, const Image& image);
Image read_enhanced(const std::filesystem::path& path);

// ---- homogeneous patches ---------------------------------------------------------

struct PatchLocation {
    int row = 0, col = 0;
};

/// Non-overlapping side x side tiles fully inside the body, keeping the
/// lowest-variance `fraction` of them (at least one when any exists).
std::vector<PatchLocation> homogeneous_patches(const Image& target, const Mask& body, int side, double fraction);
Image crop(const Image& img, const PatchLocation& at, int side);

// ---- commands -----------------------------------------------------------------------

struct CommandContext {
    ExperimentConfig cfg;
    std::filesystem::path out_base;
    std::ostream* log = nullptr;  // progress and summaries
};

struct GenDataResult {
    std::filesystem::path run_dir, manifest;
    int n_train = 0, n_val = 0, n_test = 0;
};
GenDataResult cmd_gen_data(const CommandContext& ctx);

struct TrainBackboneOutput {
    std::filesystem::path run_dir, checkpoint, loss_csv;
    double train_img = 0.0, val_img = 0.0;
};
TrainBackboneOutput cmd_train_backbone(const CommandContext& ctx, const std::filesystem::path& manifest);

struct TrainControllerOutput {
    std::filesystem::path run_dir, checkpoint, reward_csv;
    double final_mean_reward = 0.0;
};
TrainControllerOutput cmd_train_controller(const CommandContext& ctx, const std::filesystem::path& manifest,
                                           const std::filesystem::path& backbone);

/// "cmf" (no controller), "zero", "uniform" (budget m_max), "random" or
/// "controller" (greedy decoding of the given checkpoint).
struct EnhanceOptions {
    std::filesystem::path manifest, backbone;
    std::optional<std::filesystem::path> controller;
    std::string policy;  // empty: "controller" when a checkpoint is given, else "cmf"
    std::string split;   // empty: eval.split
};
struct EnhanceOutput {
    std::filesystem::path run_dir, enhanced_dir, summary_csv;
    int n_images = 0;
    double mean_evals = 0.0;
};
EnhanceOutput cmd_enhance(const CommandContext& ctx, const EnhanceOptions& opt);

struct EvalOutput {
    std::filesystem::path run_dir, report_json, per_image_csv;
    nlohmann::ordered_json report;
};
EvalOutput cmd_eval(const CommandContext& ctx, const std::filesystem::path& manifest,
                    const std::filesystem::path& enhanced_dir, const std::string& split = "");

struct NpsOutput {
    std::filesystem::path run_dir, json, csv, plot;
    double d_input_target = 0.0, d_enhanced_target = 0.0;
};
NpsOutput cmd_nps(const CommandContext& ctx, const std::filesystem::path& manifest,
                  const std::filesystem::path& images_dir, const std::string& split = "");

/// Maps an exception to the documented exit code (2 user/input, 3 contract).
int exit_code_for(const std::exception& e);

}  // namespace racmf::app
