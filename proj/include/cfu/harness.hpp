#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfu/autoencoder.hpp"
#include "cfu/counterfactual.hpp"
#include "cfu/dataset.hpp"
#include "cfu/lof.hpp"
#include "cfu/network.hpp"
#include "cfu/optim.hpp"
#include "cfu/trust_score.hpp"
#include "cfu/uncertainty.hpp"

namespace cfu {

/// Bad config or command line. Maps to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitUsage = 2;

struct DatasetSpec {
    enum class Kind { Synth, Idx, Csv };
    Kind kind = Kind::Synth;
    SynthConfig synth;
    // idx: images/labels pairs; csv: one file per split. ood is optional for train/score.
    std::filesystem::path train, train_labels, test, test_labels, ood, ood_labels;
    std::optional<std::string> label_column;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    std::vector<std::size_t> hidden{64, 64};  // used when `layers` is empty
    double dropout = 0.2;
    std::vector<LayerSpec> layers;
    TrainConfig train;
    TrustScoreConfig trust;
    MCDropoutConfig mc;
    LofConfig lof;
    std::vector<CfMethod> methods{CfMethod::Nun, CfMethod::Wachter, CfMethod::Proto};
    std::size_t max_queries = 50;
    WachterConfig wachter;
    ProtoCfConfig proto;
    AutoencoderConfig autoencoder;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> instances;
    bool emit_instances = false;  // write x' into cf_records.jsonl
    std::filesystem::path output_dir = "out";
    nlohmann::json expect = nlohmann::json::object();
};

/// Parses a JSON config. Relative paths resolve against `base_dir`. Errors carry the
/// line of the offending key.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully resolved config, defaults filled in.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Loaded and normalized splits. `test` and `ood` are empty when the config names none.
struct Splits {
    Dataset train;
    std::optional<Dataset> test;
    std::optional<Dataset> ood;
};

Splits load_splits(const ExperimentConfig& cfg);

/// Desk-scale classifier described by the config, before training.
Network build_network(const ExperimentConfig& cfg, const Dataset& train);

/// Runs fn(i) for i in [0, n) on up to CFU_THREADS workers (hardware concurrency by
/// default). Results must be written to per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
std::size_t worker_count();

/// Row of a score dump.
struct InstanceScores {
    std::size_t id = 0;
    std::size_t predicted = 0;
    double softmax = 0.0;
    double mc_mean = 0.0;
    double mc_std = 0.0;
    double epistemic = 0.0;
    double aleatoric = 0.0;
    double trust = 0.0;
    double lof = 0.0;
    bool lof_flag = false;
};

/// Scores every row with the four instruments; MC passes for row i use a stream
/// derived from (mc.seed, stream_tag, i).
std::vector<InstanceScores> score_instances(const Network& net, const TrustScoreModel& trust, const LofModel& lof,
                                            MatrixView rows, const MCDropoutConfig& mc, std::uint64_t stream_tag);

void write_scores_csv(const std::filesystem::path& path, const std::vector<InstanceScores>& rows);

/// Command entry points. Each writes its reports under cfg.output_dir and returns an
/// exit code; `log` receives progress lines.
int run_train(const ExperimentConfig& cfg, std::ostream& log);
int run_exp1(const ExperimentConfig& cfg, std::ostream& log);
int run_exp2(const ExperimentConfig& cfg, std::ostream& log);
int run_score(const ExperimentConfig& cfg, std::ostream& log);

/// Dispatches on the command name, mapping exceptions onto exit codes.
int run_command(const std::string& command, const ExperimentConfig& cfg, std::ostream& log);

}  // namespace cfu
