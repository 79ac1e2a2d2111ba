#include "pqdaf/pipeline.hpp"

#include "pqdaf/dataset_ops.hpp"
#include "pqdaf/error.hpp"
#include "pqdaf/manifest_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>

namespace pqdaf {

namespace {

namespace fs = std::filesystem;

using nlohmann::json;

fs::path dir_of(const PipelineConfig& cfg, const char* sub) {
    return fs::path(cfg.out_dir) / sub;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw external_error("cannot create directory " + dir.string() + ": " + ec.message());
}

json classifier_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},       {"batch_size", c.batch_size},
                {"lr", c.lr},               {"weight_decay", c.weight_decay},
                {"seed", c.seed},           {"backbone", c.backbone}};
}

void classifier_from_json(const json& j, TrainConfig& c) {
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "lr") c.lr = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "backbone") c.backbone = value.get<std::string>();
        else throw validation_error("unknown config key classifier." + key);
    }
}

json denoiser_to_json(const DenoiserConfig& d) {
    return json{{"resolution", d.resolution},
                {"channels", d.channels},
                {"groups", d.groups},
                {"pose_channels", d.pose_channels},
                {"pose_layers", d.pose_layers},
                {"feat_dim", d.feat_dim},
                {"proj_hidden", d.proj_hidden},
                {"time_dim", d.time_dim},
                {"sin_dim", d.sin_dim},
                {"res_blocks", d.res_blocks},
                {"init_seed", d.init_seed},
                {"frozen_seed", d.frozen_seed}};
}

void denoiser_from_json(const json& j, DenoiserConfig& d) {
    for (const auto& [key, value] : j.items()) {
        if (key == "resolution") d.resolution = value.get<int>();
        else if (key == "channels") d.channels = value.get<int>();
        else if (key == "groups") d.groups = value.get<int>();
        else if (key == "pose_channels") d.pose_channels = value.get<int>();
        else if (key == "pose_layers") d.pose_layers = value.get<int>();
        else if (key == "feat_dim") d.feat_dim = value.get<int>();
        else if (key == "proj_hidden") d.proj_hidden = value.get<int>();
        else if (key == "time_dim") d.time_dim = value.get<int>();
        else if (key == "sin_dim") d.sin_dim = value.get<int>();
        else if (key == "res_blocks") d.res_blocks = value.get<int>();
        else if (key == "init_seed") d.init_seed = value.get<std::uint64_t>();
        else if (key == "frozen_seed") d.frozen_seed = value.get<std::uint64_t>();
        else throw validation_error("unknown config key denoiser." + key);
    }
}

void apply_config_object(const json& j, PipelineConfig& c) {
    for (const auto& [key, value] : j.items()) {
        if (key == "out_dir") c.out_dir = value.get<std::string>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "per_class_train") c.per_class_train = value.get<int>();
        else if (key == "per_class_test") c.per_class_test = value.get<int>();
        else if (key == "resolution") c.resolution = value.get<int>();
        else if (key == "denoiser") denoiser_from_json(value, c.denoiser);
        else if (key == "diffusion_steps") c.diffusion_steps = value.get<int>();
        else if (key == "beta_start") c.beta_start = value.get<double>();
        else if (key == "beta_end") c.beta_end = value.get<double>();
        else if (key == "generator_steps") c.generator_steps = value.get<int>();
        else if (key == "generator_batch") c.generator_batch = value.get<int>();
        else if (key == "generator_lr") c.generator_lr = value.get<double>();
        else if (key == "drop_prob") c.drop_prob = value.get<double>();
        else if (key == "guidance_w") c.guidance_w = value.get<double>();
        else if (key == "sampler_steps") c.sampler_steps = value.get<int>();
        else if (key == "deterministic") c.deterministic = value.get<bool>();
        else if (key == "per_class_generate") c.per_class_generate = value.get<int>();
        else if (key == "tau") c.tau = value.get<double>();
        else if (key == "scorer") c.scorer = value.get<std::string>();
        else if (key == "scorer_endpoint") c.scorer_endpoint = value.get<std::string>();
        else if (key == "scorer_timeout_s") c.scorer_timeout_s = value.get<double>();
        else if (key == "retry_limit") c.retry_limit = value.get<int>();
        else if (key == "max_concurrent_requests")
            c.max_concurrent_requests = value.get<int>();
        else if (key == "k_shot") c.k_shot = value.get<int>();
        else if (key == "ratio") c.ratio = value.get<double>();
        else if (key == "sweep_ratios") c.sweep_ratios = value.get<std::vector<double>>();
        else if (key == "eval_seeds")
            c.eval_seeds = value.get<std::vector<std::uint64_t>>();
        else if (key == "classifier") classifier_from_json(value, c.classifier);
        else throw validation_error("unknown config key " + key);
    }
}

json config_to_json(const PipelineConfig& c) {
    return json{{"out_dir", c.out_dir},
                {"seed", c.seed},
                {"per_class_train", c.per_class_train},
                {"per_class_test", c.per_class_test},
                {"resolution", c.resolution},
                {"denoiser", denoiser_to_json(c.denoiser)},
                {"diffusion_steps", c.diffusion_steps},
                {"beta_start", c.beta_start},
                {"beta_end", c.beta_end},
                {"generator_steps", c.generator_steps},
                {"generator_batch", c.generator_batch},
                {"generator_lr", c.generator_lr},
                {"drop_prob", c.drop_prob},
                {"guidance_w", c.guidance_w},
                {"sampler_steps", c.sampler_steps},
                {"deterministic", c.deterministic},
                {"per_class_generate", c.per_class_generate},
                {"tau", c.tau},
                {"scorer", c.scorer},
                {"scorer_endpoint", c.scorer_endpoint},
                {"scorer_timeout_s", c.scorer_timeout_s},
                {"retry_limit", c.retry_limit},
                {"max_concurrent_requests", c.max_concurrent_requests},
                {"k_shot", c.k_shot},
                {"ratio", c.ratio},
                {"sweep_ratios", c.sweep_ratios},
                {"eval_seeds", c.eval_seeds},
                {"classifier", classifier_to_json(c.classifier)}};
}

NoiseSchedule schedule_of(const PipelineConfig& cfg) {
    return NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
}

DatasetManifest read_required_manifest(const fs::path& path, const char* producer) {
    if (!fs::exists(path))
        throw validation_error("missing " + path.string() + " (run " + std::string(producer) +
                               " first)");
    return read_manifest(path.string());
}

std::map<std::string, Skeleton> read_required_poses(const fs::path& path, const char* producer) {
    if (!fs::exists(path))
        throw validation_error("missing " + path.string() + " (run " + std::string(producer) +
                               " first)");
    return read_pose_index(path.string());
}

std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

void PipelineConfig::validate() const {
    if (out_dir.empty()) throw validation_error("out_dir must not be empty");
    if (per_class_train < 1 || per_class_test < 1)
        throw validation_error("per-class counts must be >= 1");
    if (resolution != denoiser.resolution)
        throw validation_error("resolution and denoiser.resolution disagree");
    denoiser.validate();
    if (diffusion_steps < 2) throw validation_error("diffusion_steps must be >= 2");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw validation_error("betas must satisfy 0 < beta_start <= beta_end < 1");
    if (generator_steps < 1) throw validation_error("generator_steps must be >= 1");
    if (generator_batch < 1) throw validation_error("generator_batch must be >= 1");
    if (!(generator_lr > 0.0)) throw validation_error("generator_lr must be positive");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0))
        throw validation_error("drop_prob must lie in [0, 1)");
    if (!(guidance_w >= 0.0 && guidance_w <= 1.0))
        throw validation_error("guidance weight w must lie in [0, 1]");
    if (sampler_steps < 1) throw validation_error("sampler_steps must be >= 1");
    if (per_class_generate < 0) throw validation_error("per_class_generate must be >= 0");
    if (!(tau >= 0.0 && tau <= 1.0)) throw validation_error("tau must lie in [0, 1]");
    if (scorer != "mock" && scorer != "remote")
        throw validation_error("scorer must be \"mock\" or \"remote\"");
    if (!(scorer_timeout_s > 0.0)) throw validation_error("scorer_timeout_s must be positive");
    if (retry_limit < 0) throw validation_error("retry_limit must be >= 0");
    if (max_concurrent_requests < 1)
        throw validation_error("max_concurrent_requests must be >= 1");
    if (k_shot < 1) throw validation_error("k_shot must be >= 1");
    if (ratio < 0.0) throw validation_error("ratio must be >= 0");
    for (double r : sweep_ratios)
        if (r < 0.0) throw validation_error("sweep ratios must be >= 0");
    if (sweep_ratios.empty()) throw validation_error("sweep_ratios must not be empty");
    if (eval_seeds.empty()) throw validation_error("eval_seeds must not be empty");
    classifier.validate();
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw external_error("cannot open config file: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw validation_error(path + ": config is not valid JSON");
    if (!j.is_object()) throw validation_error(path + ": config must be a JSON object");

    PipelineConfig c;
    try {
        apply_config_object(j, c);
    } catch (const json::exception& e) {
        throw validation_error(path + ": " + e.what());
    }

    // resolution applies to the denoiser too unless explicitly overridden
    if (!j.contains("denoiser") || !j["denoiser"].contains("resolution"))
        c.denoiser.resolution = c.resolution;
    return c;
}

void echo_pipeline_config(const PipelineConfig& config, const std::string& dir) {
    ensure_dir(dir);
    const fs::path path = fs::path(dir) / "config_echo.json";
    std::ofstream out(path);
    if (!out) throw external_error("cannot write config echo: " + path.string());
    out << config_to_json(config).dump(2) << '\n';
    if (!out.flush()) throw external_error("failed writing config echo: " + path.string());
}

PoseConsistencyScorer::PoseConsistencyScorer(double full_score_alignment)
    : full_score_alignment_(full_score_alignment) {
    if (!(full_score_alignment > 0.0 && full_score_alignment <= 1.0))
        throw validation_error("full-score alignment must lie in (0, 1]");
}

void PoseConsistencyScorer::register_target(const ImageBuffer& image, const Skeleton& target) {
    targets_[hash64(encode_image_bytes(image))] = target;
}

std::string PoseConsistencyScorer::score(const ImageBuffer& image, const std::string&) {
    const auto it = targets_.find(hash64(encode_image_bytes(image)));
    if (it == targets_.end())
        throw validation_error("image not registered with the pose-consistency scorer");
    const double a =
        pose_alignment(image, render_skeleton(it->second, image.width, image.height));
    return format_score(std::min(1.0, a / full_score_alignment_));
}

std::unique_ptr<Scorer> make_scorer(const PipelineConfig& config, const DatasetManifest& pool,
                                    const std::map<std::string, Skeleton>& target_poses) {
    if (config.scorer == "mock") {
        auto scorer = std::make_unique<PoseConsistencyScorer>();
        for (const LabeledSample& s : pool.records) {
            const auto it = target_poses.find(s.id);
            if (it == target_poses.end())
                throw validation_error("no target pose recorded for sample " + s.id);
            scorer->register_target(resolve_image(s, config.out_dir), it->second);
        }
        return scorer;
    }
    std::string endpoint = config.scorer_endpoint;
    if (endpoint.empty()) {
        const char* env = std::getenv("PQDAF_SCORER_ENDPOINT");
        if (env != nullptr) endpoint = env;
    }
    if (endpoint.empty())
        throw validation_error(
            "remote scorer selected but no endpoint configured (set scorer_endpoint or "
            "PQDAF_SCORER_ENDPOINT)");
    RemoteScorer::Options opt;
    opt.endpoint = endpoint;
    opt.timeout_s = config.scorer_timeout_s;
    return std::make_unique<RemoteScorer>(opt);
}

ToyDataset stage_make_toy(const PipelineConfig& config) {
    config.validate();
    ToyDatasetConfig tc;
    tc.out_dir = config.out_dir;
    tc.per_class_train = config.per_class_train;
    tc.per_class_test = config.per_class_test;
    tc.resolution = config.resolution;
    tc.seed = config.seed;
    ToyDataset ds = make_toy_dataset(tc);
    echo_pipeline_config(config, dir_of(config, "toy").string());
    return ds;
}

GeneratorTrainReport stage_train_generator(const PipelineConfig& config) {
    config.validate();
    const fs::path toy = dir_of(config, "toy");
    const DatasetManifest train = read_required_manifest(toy / "train.jsonl", "make-toy");
    const auto poses = read_required_poses(toy / "poses.jsonl", "make-toy");

    DenoiserModel<float> model(config.denoiser);
    const NoiseSchedule schedule = schedule_of(config);
    const GeneratorTrainingSet set = build_generator_training_set(
        train, poses, config.out_dir, model.encoders(), config.seed);

    Adam<float>::Config opt;
    opt.lr = config.generator_lr;
    GeneratorTrainer<float> trainer(model, schedule, opt, config.seed);
    Rng batch_rng(hash_combine(0x67626174ull, config.seed));

    const fs::path results = dir_of(config, "results");
    ensure_dir(results);
    std::ofstream curve(results / "generator_loss.tsv");
    if (!curve) throw external_error("cannot write generator loss curve");
    curve << "step\tloss\tma50\n";

    GeneratorTrainReport report;
    report.steps = config.generator_steps;
    std::deque<double> window;
    double window_sum = 0.0;
    for (int step = 1; step <= config.generator_steps; ++step) {
        std::vector<std::pair<const Tensor<float>*, const ConditionBundle<float>*>> batch;
        for (int b = 0; b < config.generator_batch; ++b) {
            const std::size_t i =
                static_cast<std::size_t>(batch_rng.uniform_int(set.targets.size()));
            batch.emplace_back(&set.targets[i], &set.bundles[i]);
        }
        const double loss = trainer.training_step(batch, config.drop_prob);
        window.push_back(loss);
        window_sum += loss;
        if (window.size() > 50) {
            window_sum -= window.front();
            window.pop_front();
        }
        const double ma = window_sum / static_cast<double>(window.size());
        if (step == std::min(50, config.generator_steps)) report.initial_ma = ma;
        report.final_ma = ma;
        curve << step << '\t' << loss << '\t' << ma << '\n';
    }
    if (!curve.flush()) throw external_error("failed writing generator loss curve");

    const fs::path ckpt_dir = dir_of(config, "checkpoints");
    ensure_dir(ckpt_dir);
    report.checkpoint_path = (ckpt_dir / "generator.ckpt").string();
    save_checkpoint(model, schedule, report.checkpoint_path);
    echo_pipeline_config(config, ckpt_dir.string());
    echo_pipeline_config(config, results.string());
    return report;
}

DatasetManifest stage_generate(const PipelineConfig& config) {
    config.validate();
    const fs::path toy = dir_of(config, "toy");
    const DatasetManifest train = read_required_manifest(toy / "train.jsonl", "make-toy");
    const auto train_poses = read_required_poses(toy / "poses.jsonl", "make-toy");

    const fs::path ckpt = dir_of(config, "checkpoints") / "generator.ckpt";
    if (!fs::exists(ckpt))
        throw validation_error("missing " + ckpt.string() + " (run train-generator first)");
    NoiseSchedule schedule;
    const std::unique_ptr<DenoiserModel<float>> model =
        load_checkpoint<float>(ckpt.string(), &schedule);
    if (model->config().resolution != config.resolution)
        throw validation_error("checkpoint resolution does not match the configured resolution");

    std::array<std::vector<const LabeledSample*>, kNumCategories> by_class;
    for (const LabeledSample& s : train.records)
        by_class[static_cast<std::size_t>(s.category_id)].push_back(&s);

    const fs::path gen = dir_of(config, "gen");
    ensure_dir(gen / "images");

    DatasetManifest pool;
    pool.split = Split::SyntheticPool;
    pool.seed = config.seed;
    std::map<std::string, Skeleton> target_poses;
    for (int c = 0; c < kNumCategories; ++c) {
        const auto& members = by_class[static_cast<std::size_t>(c)];
        if (members.empty() && config.per_class_generate > 0)
            throw validation_error("class " + category_from_id(c).code +
                                   " has no source samples in the train split");
        for (int i = 0; i < config.per_class_generate; ++i) {
            Rng rng(hash_combine(hash_combine(0x67656E69ull, config.seed),
                                 static_cast<std::uint64_t>(c) * 1000003ull +
                                     static_cast<std::uint64_t>(i)));
            const LabeledSample& source = *members[rng.uniform_int(members.size())];
            const auto source_pose = train_poses.find(source.id);
            if (source_pose == train_poses.end())
                throw validation_error("no skeleton recorded for sample " + source.id);
            const Skeleton target_skeleton = synth_pose(category_from_id(c), rng.next_u64());

            const ConditionBundle<float> bundle =
                build_generation_bundle(resolve_image(source, config.out_dir),
                                        source_pose->second, target_skeleton, model->encoders());
            SamplerConfig sc;
            sc.w = config.guidance_w;
            sc.steps = config.sampler_steps;
            sc.seed = config.seed;
            sc.deterministic = config.deterministic;
            sc.image_index =
                static_cast<std::uint64_t>(c) * 1000003ull + static_cast<std::uint64_t>(i);
            const ImageBuffer img = sample(*model, bundle, schedule, sc);

            char idbuf[32];
            std::snprintf(idbuf, sizeof idbuf, "gen_C%d_%04d", c, i);
            LabeledSample rec;
            rec.id = idbuf;
            rec.path = "gen/images/" + rec.id + ".ppm";
            rec.category_id = c;
            rec.provenance = Provenance::Synthetic;
            write_image(to_byte(img), (fs::path(config.out_dir) / rec.path).string());
            pool.records.push_back(std::move(rec));
            target_poses.emplace(idbuf, target_skeleton);
        }
    }
    write_manifest(pool, (gen / "pool.jsonl").string());
    write_pose_index(target_poses, (gen / "poses.jsonl").string());
    echo_pipeline_config(config, gen.string());
    return pool;
}

FilterStageReport stage_filter(const PipelineConfig& config) {
    config.validate();
    const fs::path gen = dir_of(config, "gen");
    const DatasetManifest pool = read_required_manifest(gen / "pool.jsonl", "generate");
    const auto target_poses = read_required_poses(gen / "poses.jsonl", "generate");

    const std::unique_ptr<Scorer> scorer = make_scorer(config, pool, target_poses);
    FilterConfig fc;
    fc.tau = config.tau;
    fc.max_concurrent_requests = config.max_concurrent_requests;
    fc.retry_limit = config.retry_limit;
    fc.image_base_dir = config.out_dir;
    const FilterResult result = filter(pool.records, *scorer, fc);

    DatasetManifest kept;
    kept.split = Split::SyntheticPool;
    kept.seed = config.seed;
    kept.records = result.kept;
    write_manifest(kept, (gen / "kept.jsonl").string());
    write_score_audit(result.audit, (gen / "audit.jsonl").string());
    echo_pipeline_config(config, gen.string());

    FilterStageReport report;
    report.scored = result.audit.size();
    report.kept = result.kept.size();
    for (const ScoreRecord& r : result.audit)
        ++report.class_total[static_cast<std::size_t>(r.category_id)];
    for (const LabeledSample& s : result.kept)
        ++report.class_kept[static_cast<std::size_t>(s.category_id)];
    return report;
}

DatasetManifest stage_mix(const PipelineConfig& config) {
    config.validate();
    const DatasetManifest train =
        read_required_manifest(dir_of(config, "toy") / "train.jsonl", "make-toy");
    const DatasetManifest kept =
        read_required_manifest(dir_of(config, "gen") / "kept.jsonl", "filter");

    const DatasetManifest shot = few_shot_subset(train, config.k_shot, config.seed);
    MixSpec spec;
    spec.ratio = config.ratio;
    spec.k_shot = config.k_shot;
    spec.seed = config.seed;
    const DatasetManifest mixed = mix(shot, kept, spec);

    const fs::path mix_dir = dir_of(config, "mix");
    ensure_dir(mix_dir);
    write_manifest(shot, (mix_dir / "real_shot.jsonl").string());
    write_manifest(mixed, (mix_dir / "train_mixed.jsonl").string());
    echo_pipeline_config(config, mix_dir.string());
    return mixed;
}

TrainOutcome stage_train(const PipelineConfig& config) {
    config.validate();
    const DatasetManifest mixed =
        read_required_manifest(dir_of(config, "mix") / "train_mixed.jsonl", "mix");
    const DatasetManifest test =
        read_required_manifest(dir_of(config, "toy") / "test.jsonl", "make-toy");

    TrainConfig tc = config.classifier;
    tc.seed = config.seed;
    TrainOutcome outcome = train_classifier(mixed, test, tc, config.out_dir);

    const fs::path results = dir_of(config, "results");
    ensure_dir(results);
    std::ofstream losses(results / "classifier_loss.tsv");
    if (!losses) throw external_error("cannot write classifier loss curve");
    losses << "epoch\tloss\n";
    for (std::size_t e = 0; e < outcome.epoch_losses.size(); ++e)
        losses << e + 1 << '\t' << outcome.epoch_losses[e] << '\n';
    if (!losses.flush()) throw external_error("failed writing classifier loss curve");

    json metrics{{"top1", outcome.eval.top1},
                 {"f1_macro", outcome.eval.f1_macro},
                 {"n", outcome.eval.n},
                 {"n_train", mixed.records.size()}};
    std::ofstream mout(results / "train_metrics.json");
    if (!mout) throw external_error("cannot write train metrics");
    mout << metrics.dump(2) << '\n';
    if (!mout.flush()) throw external_error("failed writing train metrics");
    echo_pipeline_config(config, results.string());
    return outcome;
}

EvalResult stage_eval(const PipelineConfig& config, const std::string& train_manifest_path,
                      const std::string& eval_manifest_path) {
    config.validate();
    const DatasetManifest train = read_manifest(train_manifest_path);
    const DatasetManifest eval_set = read_manifest(eval_manifest_path);
    TrainConfig tc = config.classifier;
    tc.seed = config.seed;
    const TrainOutcome outcome = train_classifier(train, eval_set, tc, config.out_dir);

    const fs::path results = dir_of(config, "results");
    ensure_dir(results);
    json per_class = json::array();
    for (int c = 0; c < kNumCategories; ++c) {
        const ClassStats& s = outcome.eval.per_class[static_cast<std::size_t>(c)];
        per_class.push_back(json{{"category", category_from_id(c).code},
                                 {"precision", s.precision},
                                 {"recall", s.recall},
                                 {"f1", s.f1},
                                 {"tp", s.tp},
                                 {"fp", s.fp},
                                 {"fn", s.fn}});
    }
    json metrics{{"top1", outcome.eval.top1},
                 {"f1_macro", outcome.eval.f1_macro},
                 {"n", outcome.eval.n},
                 {"per_class", per_class}};
    std::ofstream mout(results / "eval_metrics.json");
    if (!mout) throw external_error("cannot write eval metrics");
    mout << metrics.dump(2) << '\n';
    if (!mout.flush()) throw external_error("failed writing eval metrics");
    echo_pipeline_config(config, results.string());
    return outcome.eval;
}

SweepTable stage_sweep(const PipelineConfig& config) {
    config.validate();
    const DatasetManifest train =
        read_required_manifest(dir_of(config, "toy") / "train.jsonl", "make-toy");
    const DatasetManifest kept =
        read_required_manifest(dir_of(config, "gen") / "kept.jsonl", "filter");
    const DatasetManifest test =
        read_required_manifest(dir_of(config, "toy") / "test.jsonl", "make-toy");

    const SweepTable table = ratio_sweep(train, kept, test, config.sweep_ratios, config.k_shot,
                                         config.eval_seeds, config.classifier, config.out_dir);
    const fs::path results = dir_of(config, "results");
    ensure_dir(results);
    write_sweep_table(table, (results / "sweep.tsv").string());
    write_sweep_plot(table, (results / "sweep_plot.tsv").string());
    echo_pipeline_config(config, results.string());
    return table;
}

namespace {

// the provenance contract behind the mixed training set: every synthetic
// record traces back to an audited keep decision at or above the threshold
bool verify_provenance(const DatasetManifest& mixed, const std::vector<ScoreRecord>& audit,
                       double tau) {
    std::set<std::string> kept_ids;
    for (const ScoreRecord& r : audit)
        if (r.decision == ScoreDecision::Kept && r.s.has_value() && *r.s >= tau)
            kept_ids.insert(r.sample_id);
    for (const LabeledSample& s : mixed.records)
        if (s.provenance == Provenance::Synthetic && kept_ids.count(s.id) == 0) return false;
    return true;
}

} // namespace

PipelineReport run_pipeline(const PipelineConfig& config) {
    PipelineReport report;
    report.generated = stage_generate(config).records.size();
    report.filter = stage_filter(config);
    const DatasetManifest mixed = stage_mix(config);
    report.mixed_total = mixed.records.size();
    for (const LabeledSample& s : mixed.records)
        if (s.provenance == Provenance::Synthetic) ++report.mixed_synthetic;
    report.eval = stage_train(config).eval;

    const std::vector<ScoreRecord> audit =
        read_score_audit((dir_of(config, "gen") / "audit.jsonl").string());
    report.provenance_ok = verify_provenance(mixed, audit, config.tau);
    return report;
}

TrendReport run_trend(const PipelineConfig& config) {
    config.validate();
    stage_generate(config);
    stage_filter(config);

    const DatasetManifest train =
        read_required_manifest(dir_of(config, "toy") / "train.jsonl", "make-toy");
    const DatasetManifest kept =
        read_required_manifest(dir_of(config, "gen") / "kept.jsonl", "filter");
    const DatasetManifest test =
        read_required_manifest(dir_of(config, "toy") / "test.jsonl", "make-toy");

    TrendReport report;
    for (std::uint64_t seed : config.eval_seeds) {
        const DatasetManifest shot = few_shot_subset(train, config.k_shot, seed);
        MixSpec spec;
        spec.ratio = config.ratio;
        spec.k_shot = config.k_shot;
        spec.seed = seed;
        const DatasetManifest mixed = mix(shot, kept, spec);

        TrainConfig tc = config.classifier;
        tc.seed = seed;
        const TrainOutcome real_run = train_classifier(shot, test, tc, config.out_dir);
        const TrainOutcome aug_run = train_classifier(mixed, test, tc, config.out_dir);

        TrendCell cell;
        cell.seed = seed;
        cell.real_top1 = real_run.eval.top1;
        cell.augmented_top1 = aug_run.eval.top1;
        if (cell.augmented_top1 >= cell.real_top1) ++report.wins;
        report.cells.push_back(cell);
    }

    const fs::path results = dir_of(config, "results");
    ensure_dir(results);
    std::ofstream out(results / "trend.tsv");
    if (!out) throw external_error("cannot write trend table");
    out << "seed\treal_top1\taugmented_top1\twin\n";
    for (const TrendCell& c : report.cells)
        out << c.seed << '\t' << format_score(c.real_top1) << '\t'
            << format_score(c.augmented_top1) << '\t'
            << (c.augmented_top1 >= c.real_top1 ? 1 : 0) << '\n';
    if (!out.flush()) throw external_error("failed writing trend table");
    echo_pipeline_config(config, results.string());
    return report;
}

} // namespace pqdaf
