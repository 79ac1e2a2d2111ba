#include "pqdaf/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <string>

using namespace pqdaf;

namespace {

const char* kind_label(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation: return "validation";
        case ErrorKind::External: return "external";
        case ErrorKind::Shortfall: return "shortfall";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation: return 2;
        case ErrorKind::External: return 3;
        case ErrorKind::Shortfall: return 4;
    }
    return 1;
}

struct Cli {
    PipelineConfig config;
    std::string config_path;
    std::string train_manifest;
    std::string eval_manifest;

    CLI::Option* opt_seed = nullptr;
    CLI::Option* opt_k_shot = nullptr;
    CLI::Option* opt_ratio = nullptr;
    CLI::Option* opt_tau = nullptr;
    CLI::Option* opt_scorer = nullptr;
    CLI::Option* opt_endpoint = nullptr;
    CLI::Option* opt_out_dir = nullptr;
    CLI::Option* opt_deterministic = nullptr;
    CLI::Option* opt_per_class_generate = nullptr;
    CLI::Option* opt_generator_steps = nullptr;
};

// The config file provides the base values; any flag given on the command
// line wins over it.
void add_shared_flags(CLI::App& app, Cli& cli) {
    app.add_option("--config", cli.config_path, "JSON config file");
    cli.opt_seed = app.add_option("--seed", cli.config.seed, "master random seed");
    cli.opt_k_shot = app.add_option("--k-shot", cli.config.k_shot, "real samples per class");
    cli.opt_ratio =
        app.add_option("--ratio", cli.config.ratio, "synthetic-to-real mixing ratio");
    cli.opt_tau = app.add_option("--tau", cli.config.tau, "semantic filter threshold");
    cli.opt_scorer = app.add_option("--scorer", cli.config.scorer, "mock or remote")
                         ->check(CLI::IsMember({"mock", "remote"}));
    cli.opt_endpoint = app.add_option("--scorer-endpoint", cli.config.scorer_endpoint,
                                      "remote scorer URL (overrides PQDAF_SCORER_ENDPOINT)");
    cli.opt_out_dir = app.add_option("--out-dir", cli.config.out_dir, "artifact directory");
    cli.opt_deterministic = app.add_flag("--deterministic,!--no-deterministic",
                                         cli.config.deterministic, "deterministic sampling");
    cli.opt_per_class_generate = app.add_option(
        "--per-class-generate", cli.config.per_class_generate, "samples generated per class");
    cli.opt_generator_steps = app.add_option("--generator-steps", cli.config.generator_steps,
                                             "generator training steps");
}

void merge_config(Cli& cli) {
    if (cli.config_path.empty()) return;
    PipelineConfig base = load_pipeline_config(cli.config_path);
    if (cli.opt_seed->count() == 0) cli.config.seed = base.seed;
    if (cli.opt_k_shot->count() == 0) cli.config.k_shot = base.k_shot;
    if (cli.opt_ratio->count() == 0) cli.config.ratio = base.ratio;
    if (cli.opt_tau->count() == 0) cli.config.tau = base.tau;
    if (cli.opt_scorer->count() == 0) cli.config.scorer = base.scorer;
    if (cli.opt_endpoint->count() == 0) cli.config.scorer_endpoint = base.scorer_endpoint;
    if (cli.opt_out_dir->count() == 0) cli.config.out_dir = base.out_dir;
    if (cli.opt_deterministic->count() == 0) cli.config.deterministic = base.deterministic;
    if (cli.opt_per_class_generate->count() == 0)
        cli.config.per_class_generate = base.per_class_generate;
    if (cli.opt_generator_steps->count() == 0) cli.config.generator_steps = base.generator_steps;

    cli.config.per_class_train = base.per_class_train;
    cli.config.per_class_test = base.per_class_test;
    cli.config.resolution = base.resolution;
    cli.config.denoiser = base.denoiser;
    cli.config.diffusion_steps = base.diffusion_steps;
    cli.config.beta_start = base.beta_start;
    cli.config.beta_end = base.beta_end;
    cli.config.generator_batch = base.generator_batch;
    cli.config.generator_lr = base.generator_lr;
    cli.config.drop_prob = base.drop_prob;
    cli.config.guidance_w = base.guidance_w;
    cli.config.sampler_steps = base.sampler_steps;
    cli.config.scorer_timeout_s = base.scorer_timeout_s;
    cli.config.retry_limit = base.retry_limit;
    cli.config.max_concurrent_requests = base.max_concurrent_requests;
    cli.config.sweep_ratios = base.sweep_ratios;
    cli.config.eval_seeds = base.eval_seeds;
    cli.config.classifier = base.classifier;
}

void print_eval(const char* label, const EvalResult& eval) {
    std::printf("%s: top1=%.4f f1_macro=%.4f n=%zu\n", label, eval.top1, eval.f1_macro,
                eval.n);
}

int run(Cli& cli, const std::string& command) {
    const PipelineConfig& cfg = cli.config;
    if (command == "make-toy") {
        const ToyDataset ds = stage_make_toy(cfg);
        std::printf("toy dataset: %zu train, %zu test at %s/toy\n", ds.train.records.size(),
                    ds.test.records.size(), cfg.out_dir.c_str());
    } else if (command == "train-generator") {
        const GeneratorTrainReport r = stage_train_generator(cfg);
        std::printf("generator: %d steps, loss ma50 %.4f -> %.4f, checkpoint %s\n", r.steps,
                    r.initial_ma, r.final_ma, r.checkpoint_path.c_str());
    } else if (command == "generate") {
        const DatasetManifest pool = stage_generate(cfg);
        std::printf("generated %zu samples -> %s/gen/pool.jsonl\n", pool.records.size(),
                    cfg.out_dir.c_str());
    } else if (command == "filter") {
        const FilterStageReport r = stage_filter(cfg);
        std::printf("filter: kept %zu of %zu at tau=%.3f\n", r.kept, r.scored, cfg.tau);
        for (int c = 0; c < kNumCategories; ++c)
            std::printf("  %s: %zu/%zu\n", category_from_id(c).code.c_str(),
                        r.class_kept[static_cast<std::size_t>(c)],
                        r.class_total[static_cast<std::size_t>(c)]);
    } else if (command == "mix") {
        const DatasetManifest mixed = stage_mix(cfg);
        std::size_t synthetic = 0;
        for (const LabeledSample& s : mixed.records)
            synthetic += s.provenance == Provenance::Synthetic ? 1 : 0;
        std::printf("mixed %zu samples (%zu synthetic) -> %s/mix/train_mixed.jsonl\n",
                    mixed.records.size(), synthetic, cfg.out_dir.c_str());
    } else if (command == "train") {
        const TrainOutcome outcome = stage_train(cfg);
        print_eval("trained", outcome.eval);
    } else if (command == "eval") {
        const EvalResult eval = stage_eval(cfg, cli.train_manifest, cli.eval_manifest);
        print_eval("eval", eval);
    } else if (command == "sweep") {
        const SweepTable table = stage_sweep(cfg);
        for (const SweepSummary& s : table.summary)
            std::printf("ratio %.2f: top1 %.4f +- %.4f\n", s.ratio, s.mean_top1, s.std_top1);
        std::printf("table -> %s/results/sweep.tsv\n", cfg.out_dir.c_str());
    } else if (command == "pipeline") {
        const PipelineReport r = run_pipeline(cfg);
        std::printf("generated %zu, kept %zu, mixed %zu (%zu synthetic)\n", r.generated,
                    r.filter.kept, r.mixed_total, r.mixed_synthetic);
        print_eval("final", r.eval);
        std::printf("provenance chain: %s\n", r.provenance_ok ? "complete" : "BROKEN");
        if (!r.provenance_ok) return 1;
    } else if (command == "trend") {
        const TrendReport r = run_trend(cfg);
        for (const TrendCell& c : r.cells)
            std::printf("seed %llu: real=%.4f augmented=%.4f\n",
                        static_cast<unsigned long long>(c.seed), c.real_top1,
                        c.augmented_top1);
        std::printf("augmented >= real in %d of %zu seeds\n", r.wins, r.cells.size());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"pose-conditioned diffusion augmentation pipeline"};
    app.require_subcommand(1);

    Cli cli;
    const char* commands[] = {"make-toy", "train-generator", "generate", "filter", "mix",
                              "train",    "eval",            "sweep",    "pipeline", "trend"};
    const char* descriptions[] = {
        "render the labeled stick-figure corpus",
        "train the pose-guided generator on the toy train split",
        "sample a synthetic pool from the trained generator",
        "score the pool and keep samples at or above tau",
        "mix a k-shot real subset with kept synthetic samples",
        "train the classifier on the mixed set, eval on the test split",
        "train on one manifest and evaluate on another",
        "mixing-ratio sweep over seeds",
        "generate, filter, mix, train, and eval in one run",
        "per-seed augmented vs real-only comparison"};
    for (std::size_t i = 0; i < std::size(commands); ++i) {
        CLI::App* sub = app.add_subcommand(commands[i], descriptions[i]);
        sub->fallthrough();
        if (std::string(commands[i]) == "eval") {
            sub->add_option("--train-manifest", cli.train_manifest, "training manifest path")
                ->required();
            sub->add_option("--eval-manifest", cli.eval_manifest, "evaluation manifest path")
                ->required();
        }
    }
    add_shared_flags(app, cli);

    CLI11_PARSE(app, argc, argv);

    try {
        merge_config(cli);
        return run(cli, app.get_subcommands().front()->get_name());
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", kind_label(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 1;
    }
}
