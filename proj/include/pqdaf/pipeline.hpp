#pragma once

#include "pqdaf/diffusion.hpp"
#include "pqdaf/filter.hpp"
#include "pqdaf/toy_data.hpp"
#include "pqdaf/train_eval.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace pqdaf {

// Merged configuration for every pipeline stage. Loaded from a JSON file
// with per-flag overrides applied by the CLI; the post-merge state is echoed
// into each directory a stage writes.
struct PipelineConfig {
    std::string out_dir = "out";
    std::uint64_t seed = 0;

    int per_class_train = 40;
    int per_class_test = 20;
    int resolution = 32;

    DenoiserConfig denoiser;
    int diffusion_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int generator_steps = 800;
    int generator_batch = 4;
    double generator_lr = 1e-3;
    double drop_prob = 0.1;

    double guidance_w = 0.5;
    int sampler_steps = 30;
    bool deterministic = true;
    int per_class_generate = 15;

    double tau = 0.8;
    std::string scorer = "mock";
    std::string scorer_endpoint;
    double scorer_timeout_s = 10.0;
    int retry_limit = 0;
    int max_concurrent_requests = 1;

    int k_shot = 10;
    double ratio = 1.0;
    std::vector<double> sweep_ratios{0.5, 1.0, 2.0, 3.0};
    std::vector<std::uint64_t> eval_seeds{1, 2, 3, 4, 5};
    TrainConfig classifier;

    void validate() const;
};

// Reads a JSON config, overlaying the defaults; unknown keys are rejected.
PipelineConfig load_pipeline_config(const std::string& path);

// Writes the full post-merge configuration as config_echo.json in dir.
void echo_pipeline_config(const PipelineConfig& config, const std::string& dir);

// Alignment value mapped to a consistency score of 1.0 by the built-in mock
// scorer; lower alignments scale linearly toward 0.
inline constexpr double kFullScoreAlignment = 0.45;

// Deterministic stand-in for a remote vision-language scorer: answers with
// the pose_alignment between the image and its registered target pose,
// rescaled so alignment >= kFullScoreAlignment reads as a perfect 1.0.
// Images are recognized by their encoded bytes; scoring an unregistered
// image is an error. Read-only after registration, so concurrent scoring
// is safe.
class PoseConsistencyScorer : public Scorer {
public:
    explicit PoseConsistencyScorer(double full_score_alignment = kFullScoreAlignment);

    void register_target(const ImageBuffer& image, const Skeleton& target);
    std::string score(const ImageBuffer& image, const std::string& query) override;

private:
    double full_score_alignment_;
    std::map<std::uint64_t, Skeleton> targets_;
};

// Builds the configured scorer. The mock variant is registered over every
// pool sample's image and target pose; the remote variant resolves its
// endpoint from the config or the PQDAF_SCORER_ENDPOINT environment
// variable (flag wins).
std::unique_ptr<Scorer> make_scorer(const PipelineConfig& config,
                                    const DatasetManifest& pool,
                                    const std::map<std::string, Skeleton>& target_poses);

struct GeneratorTrainReport {
    int steps = 0;
    double initial_ma = 0.0;
    double final_ma = 0.0;
    std::string checkpoint_path;
};

struct FilterStageReport {
    std::size_t scored = 0;
    std::size_t kept = 0;
    std::array<std::size_t, kNumCategories> class_total{};
    std::array<std::size_t, kNumCategories> class_kept{};
};

struct PipelineReport {
    std::size_t generated = 0;
    FilterStageReport filter;
    std::size_t mixed_total = 0;
    std::size_t mixed_synthetic = 0;
    EvalResult eval;
    bool provenance_ok = false;
};

struct TrendCell {
    std::uint64_t seed = 0;
    double real_top1 = 0.0;
    double augmented_top1 = 0.0;
};

struct TrendReport {
    std::vector<TrendCell> cells;
    int wins = 0;
};

// Stage entry points. Each reads its inputs from and writes its artifacts
// under config.out_dir:
//   toy/        images, train/test manifests, pose index
//   checkpoints/generator.ckpt
//   gen/        generated images, pool/kept manifests, pose index, audit
//   mix/        k-shot and mixed manifests
//   results/    loss curves, metrics, sweep tables, plot data
ToyDataset stage_make_toy(const PipelineConfig& config);
GeneratorTrainReport stage_train_generator(const PipelineConfig& config);
DatasetManifest stage_generate(const PipelineConfig& config);
FilterStageReport stage_filter(const PipelineConfig& config);
DatasetManifest stage_mix(const PipelineConfig& config);
TrainOutcome stage_train(const PipelineConfig& config);
EvalResult stage_eval(const PipelineConfig& config, const std::string& train_manifest_path,
                      const std::string& eval_manifest_path);
SweepTable stage_sweep(const PipelineConfig& config);

// generate -> filter -> mix -> train -> eval for config.seed, then verifies
// the provenance chain: every synthetic sample in the mixed training set
// appears in the audit log as kept with s >= tau.
PipelineReport run_pipeline(const PipelineConfig& config);

// Same chain with the mix/train/eval stages repeated per seed in
// config.eval_seeds, comparing augmented against real-only accuracy on the
// test split. Writes results/trend.tsv.
TrendReport run_trend(const PipelineConfig& config);

} // namespace pqdaf
