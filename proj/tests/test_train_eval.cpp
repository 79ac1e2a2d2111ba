#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pqdaf/dataset_ops.hpp"
#include "pqdaf/manifest_io.hpp"
#include "pqdaf/rng.hpp"
#include "pqdaf/toy_data.hpp"
#include "pqdaf/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace pqdaf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "pqdaf_train_eval" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// independent confusion-matrix computation for the metric oracle
EvalResult oracle_eval(const std::vector<int>& preds, const std::vector<int>& labels) {
    EvalResult out;
    out.n = preds.size();
    long correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
    out.top1 = static_cast<double>(correct) / static_cast<double>(preds.size());
    double sum = 0.0;
    for (int c = 0; c < kNumCategories; ++c) {
        ClassStats& s = out.per_class[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c && labels[i] == c) ++s.tp;
            if (preds[i] == c && labels[i] != c) ++s.fp;
            if (preds[i] != c && labels[i] == c) ++s.fn;
        }
        s.precision = s.tp + s.fp == 0 ? 0.0
                                       : static_cast<double>(s.tp) /
                                             static_cast<double>(s.tp + s.fp);
        s.recall = s.tp + s.fn == 0
                       ? 0.0
                       : static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
        s.f1 = s.precision + s.recall == 0.0
                   ? 0.0
                   : 2.0 * s.precision * s.recall / (s.precision + s.recall);
        sum += s.f1;
    }
    out.f1_macro = sum / kNumCategories;
    return out;
}

// independent pixel-set computation for the alignment oracle
double oracle_alignment(const ImageBuffer& image, const PoseMap& target) {
    const std::vector<float> li = luminance01(image);
    const std::vector<float> lp = luminance01(target.image);
    const int w = image.width, h = image.height;
    std::set<std::pair<int, int>> a, b;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (lp[static_cast<std::size_t>(y) * w + x] > kPoseForegroundThreshold)
                b.insert({y, x});
            float mx = -1.0f, mn = 2.0f;
            for (int yy = std::max(0, y - 1); yy <= std::min(h - 1, y + 1); ++yy)
                for (int xx = std::max(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx) {
                    mx = std::max(mx, li[static_cast<std::size_t>(yy) * w + xx]);
                    mn = std::min(mn, li[static_cast<std::size_t>(yy) * w + xx]);
                }
            if (mx - mn > kEdgeThreshold &&
                li[static_cast<std::size_t>(y) * w + x] > kPoseForegroundThreshold)
                a.insert({y, x});
        }
    if (a.empty() || b.empty()) return 0.0;
    std::vector<std::pair<int, int>> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    return static_cast<double>(both.size()) /
           static_cast<double>(std::min(a.size(), b.size()));
}

ImageBuffer embed(const ImageBuffer& src, int canvas_w, int canvas_h, int ox, int oy) {
    ImageBuffer out(canvas_w, canvas_h, src.channels, src.range, 0.0f);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                out.at(c, y + oy, x + ox) = src.at(c, y, x);
    return out;
}

DatasetManifest synthetic_copy(const DatasetManifest& src) {
    DatasetManifest pool;
    pool.split = Split::SyntheticPool;
    pool.seed = src.seed;
    for (const LabeledSample& r : src.records) {
        LabeledSample s = r;
        s.id = "syn_" + r.id;
        s.provenance = Provenance::Synthetic;
        s.score = 1.0;
        pool.records.push_back(std::move(s));
    }
    return pool;
}

} // namespace

TEST_CASE("top-1 accuracy counts exact matches") {
    CHECK(top1({1, 2, 3}, {1, 2, 4}) == doctest::Approx(2.0 / 3.0));
    CHECK(top1({9, 0}, {9, 0}) == 1.0);
    CHECK(top1({5}, {6}) == 0.0);

    CHECK_THROWS_AS(top1({}, {}), Error);
    CHECK_THROWS_AS(top1({1, 2}, {1}), Error);
    CHECK_THROWS_AS(top1({10}, {0}), Error);
    CHECK_THROWS_AS(top1({0}, {-1}), Error);
}

TEST_CASE("a class with one of each count scores F1 one half") {
    const EvalResult r = f1_macro({0, 1, 0}, {0, 0, 1});
    CHECK(r.per_class[0].tp == 1);
    CHECK(r.per_class[0].fp == 1);
    CHECK(r.per_class[0].fn == 1);
    CHECK(r.per_class[0].precision == 0.5);
    CHECK(r.per_class[0].recall == 0.5);
    CHECK(r.per_class[0].f1 == 0.5);
    CHECK(r.per_class[1].f1 == 0.0);
    CHECK(r.f1_macro == doctest::Approx(0.05));
    CHECK(r.top1 == doctest::Approx(1.0 / 3.0));
    CHECK(r.n == 3);
}

TEST_CASE("perfect predictions score one everywhere") {
    std::vector<int> v;
    for (int c = 0; c < kNumCategories; ++c)
        for (int i = 0; i < 3; ++i) v.push_back(c);
    const EvalResult r = f1_macro(v, v);
    CHECK(r.top1 == 1.0);
    CHECK(r.f1_macro == 1.0);
    for (const ClassStats& s : r.per_class) {
        CHECK(s.f1 == 1.0);
        CHECK(s.fp == 0);
        CHECK(s.fn == 0);
    }
}

TEST_CASE("metrics match a brute-force confusion-matrix oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(60);
        std::vector<int> preds(n), labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.uniform_int(kNumCategories));
            labels[i] = static_cast<int>(rng.uniform_int(kNumCategories));
        }
        const EvalResult got = f1_macro(preds, labels);
        const EvalResult want = oracle_eval(preds, labels);
        CHECK(got.top1 == doctest::Approx(want.top1).epsilon(1e-9));
        CHECK(got.f1_macro == doctest::Approx(want.f1_macro).epsilon(1e-9));
        long tp_sum = 0;
        for (int c = 0; c < kNumCategories; ++c) {
            const ClassStats& g = got.per_class[static_cast<std::size_t>(c)];
            const ClassStats& w = want.per_class[static_cast<std::size_t>(c)];
            CHECK(g.tp == w.tp);
            CHECK(g.fp == w.fp);
            CHECK(g.fn == w.fn);
            CHECK(g.f1 == doctest::Approx(w.f1).epsilon(1e-9));
            tp_sum += g.tp;
            long support = 0;
            for (int lbl : labels) support += lbl == c ? 1 : 0;
            CHECK(g.tp + g.fn == support);
        }
        CHECK(static_cast<double>(tp_sum) / static_cast<double>(n) ==
              doctest::Approx(got.top1).epsilon(1e-12));
    }
}

TEST_CASE("metrics are invariant under joint permutation") {
    Rng rng(7);
    std::vector<int> preds, labels;
    for (int i = 0; i < 37; ++i) {
        preds.push_back(static_cast<int>(rng.uniform_int(kNumCategories)));
        labels.push_back(static_cast<int>(rng.uniform_int(kNumCategories)));
    }
    const EvalResult before = f1_macro(preds, labels);

    std::vector<std::size_t> order(preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<int> p2, l2;
    for (std::size_t i : order) {
        p2.push_back(preds[i]);
        l2.push_back(labels[i]);
    }
    const EvalResult after = f1_macro(p2, l2);
    CHECK(before.top1 == after.top1);
    CHECK(before.f1_macro == after.f1_macro);
    for (int c = 0; c < kNumCategories; ++c)
        CHECK(before.per_class[static_cast<std::size_t>(c)].f1 ==
              after.per_class[static_cast<std::size_t>(c)].f1);
}

TEST_CASE("single-class labels follow the zero convention") {
    const std::vector<int> labels(10, 7);
    std::vector<int> preds(10, 7);
    preds[3] = 2;
    preds[6] = 3;
    const EvalResult r = f1_macro(preds, labels);
    CHECK(r.per_class[7].tp == 8);
    CHECK(r.per_class[7].fn == 2);
    CHECK(r.per_class[7].fp == 0);
    CHECK(r.per_class[7].f1 == doctest::Approx(8.0 / 9.0));
    CHECK(r.per_class[2].f1 == 0.0);
    CHECK(r.per_class[2].fp == 1);
    CHECK(r.per_class[0].f1 == 0.0);
    CHECK(r.f1_macro == doctest::Approx(8.0 / 90.0));
}

TEST_CASE("alignment of a rendered pose map with itself is exactly one") {
    const Skeleton sk = synth_pose(category_from_id(4), 11);
    const PoseMap pm = render_skeleton(sk, 32, 32);
    CHECK(pose_alignment(pm.image, pm) == 1.0);
}

TEST_CASE("blank inputs score zero alignment") {
    const Skeleton sk = synth_pose(category_from_id(0), 3);
    const PoseMap pm = render_skeleton(sk, 32, 32);
    const ImageBuffer black(32, 32, 3, PixelRange::Byte, 0.0f);
    CHECK(pose_alignment(black, pm) == 0.0);
    const PoseMap blank_map{ImageBuffer(32, 32, 3, PixelRange::Byte, 0.0f), sk};
    CHECK(pose_alignment(pm.image, blank_map) == 0.0);
}

TEST_CASE("shifted pose map scores below one and matches the pixel-set oracle") {
    const Skeleton sk = synth_pose(category_from_id(6), 21);
    const PoseMap pm = render_skeleton(sk, 32, 32);

    ImageBuffer shifted(32, 32, 3, PixelRange::Byte, 0.0f);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 4; x < 32; ++x) shifted.at(c, y, x) = pm.image.at(c, y, x - 4);

    const double a = pose_alignment(shifted, pm);
    CHECK(a < 1.0);
    CHECK(a > 0.0);
    CHECK(a == oracle_alignment(shifted, pm));
}

TEST_CASE("alignment matches the pixel-set oracle on rendered figures") {
    Rng rng(31);
    for (int trial = 0; trial < 6; ++trial) {
        const int cat = static_cast<int>(rng.uniform_int(kNumCategories));
        const Skeleton target = synth_pose(category_from_id(cat), rng.next_u64());
        const Skeleton other = synth_pose(category_from_id((cat + 4) % 10), rng.next_u64());
        const ToyStyle style = sample_style(rng);
        const ImageBuffer fig = render_figure(other, style, 32, 32);
        const PoseMap pm = render_skeleton(target, 32, 32);
        CHECK(pose_alignment(fig, pm) == oracle_alignment(fig, pm));
    }
}

TEST_CASE("alignment is invariant when both inputs translate together") {
    const Skeleton sk = synth_pose(category_from_id(8), 5);
    const PoseMap pm = render_skeleton(sk, 32, 32);
    Rng rng(17);
    const ImageBuffer fig = render_figure(synth_pose(category_from_id(2), 9),
                                          sample_style(rng), 32, 32);

    const PoseMap at_a{embed(pm.image, 48, 48, 4, 4), sk};
    const PoseMap at_b{embed(pm.image, 48, 48, 9, 7), sk};
    const double a = pose_alignment(embed(fig, 48, 48, 4, 4), at_a);
    const double b = pose_alignment(embed(fig, 48, 48, 9, 7), at_b);
    CHECK(a == b);
}

TEST_CASE("alignment rejects mismatched sizes") {
    const Skeleton sk = synth_pose(category_from_id(1), 2);
    const PoseMap pm = render_skeleton(sk, 32, 32);
    const ImageBuffer small(16, 16, 3, PixelRange::Byte, 0.0f);
    CHECK_THROWS_WITH_AS(pose_alignment(small, pm), doctest::Contains("sizes differ"), Error);
}

TEST_CASE("classifier parameter count lands at desk scale") {
    ToyCnn model(1);
    const std::size_t count = model.params().parameter_count();
    CHECK(count > 50'000);
    CHECK(count < 200'000);
}

TEST_CASE("train config rejects unknown backbones") {
    TrainConfig cfg;
    cfg.backbone = "resnet50";
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("only \"toy-cnn\""), Error);
    cfg.backbone = "toy-cnn";
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("untrained models predict at chance level") {
    const fs::path dir = temp_dir("chance");
    ToyDatasetConfig tc;
    tc.out_dir = dir.string();
    tc.per_class_train = 1;
    tc.per_class_test = 6;
    tc.resolution = 16;
    tc.seed = 99;
    make_toy_dataset(tc);
    const DatasetManifest test = read_manifest((dir / "toy" / "test.jsonl").string());

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ToyCnn model(seed);
        const EvalResult r = evaluate(model, test, dir.string());
        CHECK(r.top1 >= 0.0);
        CHECK(r.top1 <= 0.3);
        CHECK(r.n == test.records.size());
    }
}

TEST_CASE("two hundred epochs memorize twenty samples") {
    const fs::path dir = temp_dir("overfit");
    ToyDatasetConfig tc;
    tc.out_dir = dir.string();
    tc.per_class_train = 4;
    tc.per_class_test = 1;
    tc.resolution = 16;
    tc.seed = 13;
    make_toy_dataset(tc);
    const DatasetManifest train = read_manifest((dir / "toy" / "train.jsonl").string());
    const DatasetManifest subset = few_shot_subset(train, 2, 3);
    REQUIRE(subset.records.size() == 20);

    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.seed = 5;
    const TrainOutcome run = train_classifier(subset, subset, cfg, dir.string());
    CHECK(run.eval.top1 >= 0.95);
    CHECK(run.epoch_losses.size() == 200);
    CHECK(run.epoch_losses.back() < run.epoch_losses.front());
}

TEST_CASE("training is deterministic in the seed") {
    const fs::path dir = temp_dir("determinism");
    ToyDatasetConfig tc;
    tc.out_dir = dir.string();
    tc.per_class_train = 2;
    tc.per_class_test = 2;
    tc.resolution = 16;
    tc.seed = 7;
    make_toy_dataset(tc);
    const DatasetManifest train = read_manifest((dir / "toy" / "train.jsonl").string());
    const DatasetManifest test = read_manifest((dir / "toy" / "test.jsonl").string());

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 11;
    const TrainOutcome a = train_classifier(train, test, cfg, dir.string());
    const TrainOutcome b = train_classifier(train, test, cfg, dir.string());
    CHECK(a.eval.top1 == b.eval.top1);
    CHECK(a.eval.f1_macro == b.eval.f1_macro);
    REQUIRE(a.epoch_losses.size() == b.epoch_losses.size());
    for (std::size_t i = 0; i < a.epoch_losses.size(); ++i)
        CHECK(a.epoch_losses[i] == b.epoch_losses[i]);

    cfg.seed = 12;
    const TrainOutcome c = train_classifier(train, test, cfg, dir.string());
    CHECK(c.epoch_losses != a.epoch_losses);
}

TEST_CASE("training requires every class present") {
    const fs::path dir = temp_dir("class_check");
    ToyDatasetConfig tc;
    tc.out_dir = dir.string();
    tc.per_class_train = 1;
    tc.per_class_test = 1;
    tc.resolution = 16;
    tc.seed = 3;
    make_toy_dataset(tc);
    DatasetManifest train = read_manifest((dir / "toy" / "train.jsonl").string());
    const DatasetManifest test = read_manifest((dir / "toy" / "test.jsonl").string());

    train.records.erase(std::remove_if(train.records.begin(), train.records.end(),
                                       [](const LabeledSample& s) { return s.category_id == 3; }),
                        train.records.end());
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_WITH_AS(train_classifier(train, test, cfg, dir.string()),
                         doctest::Contains("C3 is absent from the training manifest"), Error);

    DatasetManifest none;
    none.split = Split::Train;
    CHECK_THROWS_AS(train_classifier(none, test, cfg, dir.string()), Error);
}

TEST_CASE("sweep writers emit the documented formats") {
    SweepTable table;
    for (double ratio : {0.5, 1.0})
        for (std::uint64_t seed : {1ull, 2ull}) {
            SweepCell cell;
            cell.ratio = ratio;
            cell.seed = seed;
            cell.top1 = 0.1 * ratio + 0.01 * static_cast<double>(seed);
            cell.f1_macro = cell.top1 / 2.0;
            cell.n_train = static_cast<std::size_t>(100 * ratio) + 100;
            table.cells.push_back(cell);
        }
    for (double ratio : {0.5, 1.0}) {
        SweepSummary s;
        s.ratio = ratio;
        s.mean_top1 = 0.1 * ratio + 0.015;
        s.std_top1 = 0.005;
        table.summary.push_back(s);
    }

    const fs::path dir = temp_dir("writers");
    const fs::path table_path = dir / "sweep.tsv";
    const fs::path plot_path = dir / "plot.tsv";
    write_sweep_table(table, table_path.string());
    write_sweep_plot(table, plot_path.string());

    std::ifstream tf(table_path);
    std::string line;
    REQUIRE(std::getline(tf, line));
    CHECK(line == "ratio\tseed\ttop1\tf1_macro\tn_train");
    std::size_t rows = 0;
    while (std::getline(tf, line)) {
        std::istringstream is(line);
        std::string ratio, seed, t1, f1, n;
        REQUIRE(std::getline(is, ratio, '\t'));
        REQUIRE(std::getline(is, seed, '\t'));
        REQUIRE(std::getline(is, t1, '\t'));
        REQUIRE(std::getline(is, f1, '\t'));
        REQUIRE(std::getline(is, n));
        const SweepCell& cell = table.cells[rows];
        CHECK(std::stod(ratio) == doctest::Approx(cell.ratio));
        CHECK(std::stoull(seed) == cell.seed);
        CHECK(std::stod(t1) == doctest::Approx(cell.top1).epsilon(1e-6));
        CHECK(std::stoull(n) == cell.n_train);
        ++rows;
    }
    CHECK(rows == table.cells.size());

    std::ifstream pf(plot_path);
    REQUIRE(std::getline(pf, line));
    CHECK(line == "x\ty\tseries");
    std::set<std::string> series;
    std::size_t mean_points = 0;
    while (std::getline(pf, line)) {
        std::istringstream is(line);
        std::string x, y, s;
        REQUIRE(std::getline(is, x, '\t'));
        REQUIRE(std::getline(is, y, '\t'));
        REQUIRE(std::getline(is, s));
        series.insert(s);
        if (s == "mean") {
            ++mean_points;
            const double xr = std::stod(x);
            for (const SweepSummary& sm : table.summary)
                if (sm.ratio == xr) CHECK(std::stod(y) == doctest::Approx(sm.mean_top1));
        }
    }
    CHECK(series == std::set<std::string>{"seed-1", "seed-2", "mean"});
    CHECK(mean_points == table.summary.size());
}

TEST_CASE("ratio sweep composes subset, mix, train, and eval") {
    const fs::path dir = temp_dir("sweep");
    ToyDatasetConfig tc;
    tc.out_dir = dir.string();
    tc.per_class_train = 4;
    tc.per_class_test = 2;
    tc.resolution = 16;
    tc.seed = 23;
    make_toy_dataset(tc);
    const DatasetManifest train = read_manifest((dir / "toy" / "train.jsonl").string());
    const DatasetManifest test = read_manifest((dir / "toy" / "test.jsonl").string());
    const DatasetManifest pool = synthetic_copy(train);

    TrainConfig cfg;
    cfg.epochs = 1;
    const SweepTable table =
        ratio_sweep(train, pool, test, {0.0, 1.0}, 2, {1, 2}, cfg, dir.string());

    REQUIRE(table.cells.size() == 4);
    REQUIRE(table.summary.size() == 2);
    for (const SweepCell& cell : table.cells) {
        if (cell.ratio == 0.0) CHECK(cell.n_train == 20);
        else CHECK(cell.n_train == 40);
        CHECK(cell.top1 >= 0.0);
        CHECK(cell.top1 <= 1.0);
    }
    for (const SweepSummary& s : table.summary) {
        double sum = 0.0;
        int count = 0;
        for (const SweepCell& cell : table.cells)
            if (cell.ratio == s.ratio) {
                sum += cell.top1;
                ++count;
            }
        CHECK(count == 2);
        CHECK(s.mean_top1 == doctest::Approx(sum / count).epsilon(1e-12));
    }

    CHECK_THROWS_AS(ratio_sweep(train, pool, test, {50.0}, 2, {1}, cfg, dir.string()),
                    ShortfallError);
}
