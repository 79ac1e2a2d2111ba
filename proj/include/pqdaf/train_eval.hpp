#pragma once

#include "pqdaf/nn.hpp"
#include "pqdaf/pose.hpp"
#include "pqdaf/sample.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace pqdaf {

// One-vs-rest counts and scores for a single category.
struct ClassStats {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Classification metrics over one evaluation set. Accounting identities:
// per class tp + fn equals the class's ground-truth count, and the tp values
// sum to the number of correct predictions.
struct EvalResult {
    double top1 = 0.0;
    double f1_macro = 0.0;
    std::array<ClassStats, kNumCategories> per_class{};
    std::size_t n = 0;
};

// Fraction of positions where prediction equals label. Inputs are category
// ids; equal nonzero lengths required.
double top1(const std::vector<int>& predictions, const std::vector<int>& labels);

// Per-class one-vs-rest precision/recall/F1 with the 0/0 -> 0 convention,
// macro-averaged (unweighted) over all ten categories. Also fills top1.
EvalResult f1_macro(const std::vector<int>& predictions, const std::vector<int>& labels);

// Binarization thresholds for pose_alignment, applied to [0, 1] luminance.
inline constexpr float kPoseForegroundThreshold = 0.05f;
inline constexpr float kEdgeThreshold = 0.15f;

// Structural agreement between a generated image and a target pose map in
// [0, 1]: the overlap coefficient |A intersect B| / min(|A|, |B|) between
// the image's bright edge pixels (3x3 morphological gradient of luminance
// above kEdgeThreshold, restricted to foreground) and the pose map's
// non-background pixels. Either set empty -> 0.
double pose_alignment(const ImageBuffer& image, const PoseMap& target);

// Classifier training hyperparameters.
struct TrainConfig {
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    std::string backbone = "toy-cnn";

    void validate() const;
};

// Desk-scale convolutional classifier: four stride-reducing conv/norm/SiLU
// stages, global average pooling, and a linear head over the ten categories.
// Roughly 0.1M parameters at 32x32 input. Non-copyable: the parameter
// registry holds pointers into the layer storage.
class ToyCnn {
public:
    explicit ToyCnn(std::uint64_t init_seed);

    ToyCnn(const ToyCnn&) = delete;
    ToyCnn& operator=(const ToyCnn&) = delete;

    ParamRegistry<float>& params() { return registry_; }
    const ParamRegistry<float>& params() const { return registry_; }

    // Raw class scores for one image (any pixel convention; 3 channels,
    // both sides divisible by 8).
    std::vector<float> logits(const ImageBuffer& image) const;
    std::vector<float> logits(const Tensor<float>& input) const;
    int predict(const ImageBuffer& image) const;
    int predict(const Tensor<float>& input) const;

    // Mean cross-entropy over the batch; accumulates gradients. Callers own
    // zeroing grads and the optimizer step.
    float loss_and_grads(const std::vector<const Tensor<float>*>& images,
                         const std::vector<int>& labels);

private:
    Tensor<float> forward(const Tensor<float>& x, Tape<float>* tape) const;
    void backward(const Tensor<float>& dy, Tape<float>& tape);
    static Tensor<float> prepare(const ImageBuffer& image);

    Conv2d<float> conv1_, conv2_, conv3_, conv4_;
    GroupNorm<float> gn1_, gn2_, gn3_, gn4_;
    Linear<float> head_;
    SiLU<float> act_;
    ParamRegistry<float> registry_;
};

// Trained model plus its held-out evaluation and the per-epoch mean
// training loss curve.
struct TrainOutcome {
    std::unique_ptr<ToyCnn> model;
    EvalResult eval;
    std::vector<double> epoch_losses;
};

// Trains the configured backbone on train_manifest and evaluates on
// eval_manifest. Images resolve against base_dir. Deterministic in
// (manifests, config): the shuffle and init streams derive from config.seed.
TrainOutcome train_classifier(const DatasetManifest& train_manifest,
                              const DatasetManifest& eval_manifest, const TrainConfig& config,
                              const std::string& base_dir);

// Evaluates an already-trained model on a manifest.
EvalResult evaluate(const ToyCnn& model, const DatasetManifest& eval_manifest,
                    const std::string& base_dir);

// One (ratio, seed) cell of a mixing-ratio sweep.
struct SweepCell {
    double ratio = 0.0;
    std::uint64_t seed = 0;
    double top1 = 0.0;
    double f1_macro = 0.0;
    std::size_t n_train = 0;
};

// Per-ratio aggregate over seeds (population standard deviation).
struct SweepSummary {
    double ratio = 0.0;
    double mean_top1 = 0.0;
    double std_top1 = 0.0;
};

struct SweepTable {
    std::vector<SweepCell> cells;
    std::vector<SweepSummary> summary;
};

// For each (ratio, seed): k-shot subset of real, mix with the synthetic
// pool, train, evaluate on eval_set. Shortfall errors from mixing propagate.
SweepTable ratio_sweep(const DatasetManifest& real, const DatasetManifest& synthetic_pool,
                       const DatasetManifest& eval_set, const std::vector<double>& ratios, int k,
                       const std::vector<std::uint64_t>& seeds, const TrainConfig& config,
                       const std::string& base_dir);

// Results table: tab-delimited with header (ratio, seed, top1, f1_macro,
// n_train), one line per cell.
void write_sweep_table(const SweepTable& table, const std::string& path);

// Plot data: tab-delimited (x, y, series) triples, one series per seed plus
// a "mean" series, ratio on x and top-1 accuracy on y.
void write_sweep_plot(const SweepTable& table, const std::string& path);

} // namespace pqdaf
