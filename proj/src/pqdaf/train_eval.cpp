#include "pqdaf/train_eval.hpp"

#include "pqdaf/dataset_ops.hpp"
#include "pqdaf/error.hpp"
#include "pqdaf/rng.hpp"
#include "pqdaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace pqdaf {

namespace {

void check_pairs(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw validation_error("metrics need at least one prediction");
    if (predictions.size() != labels.size())
        throw validation_error("prediction and label counts differ");
    for (int p : predictions) category_from_id(p);
    for (int l : labels) category_from_id(l);
}

} // namespace

double top1(const std::vector<int>& predictions, const std::vector<int>& labels) {
    check_pairs(predictions, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

EvalResult f1_macro(const std::vector<int>& predictions, const std::vector<int>& labels) {
    check_pairs(predictions, labels);
    EvalResult r;
    r.n = predictions.size();
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int p = predictions[i];
        const int l = labels[i];
        if (p == l) {
            ++r.per_class[static_cast<std::size_t>(l)].tp;
        } else {
            ++r.per_class[static_cast<std::size_t>(p)].fp;
            ++r.per_class[static_cast<std::size_t>(l)].fn;
        }
    }
    long correct = 0;
    double f1_sum = 0.0;
    for (auto& c : r.per_class) {
        correct += c.tp;
        c.precision = c.tp + c.fp == 0 ? 0.0
                                       : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
        c.recall = c.tp + c.fn == 0 ? 0.0
                                    : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
        c.f1 = c.precision + c.recall == 0.0
                   ? 0.0
                   : 2.0 * c.precision * c.recall / (c.precision + c.recall);
        f1_sum += c.f1;
    }
    r.top1 = static_cast<double>(correct) / static_cast<double>(r.n);
    r.f1_macro = f1_sum / kNumCategories;
    return r;
}

double pose_alignment(const ImageBuffer& image, const PoseMap& target) {
    const ImageBuffer& pm = target.image;
    if (image.width != pm.width || image.height != pm.height)
        throw validation_error("image and pose map sizes differ");
    const int h = image.height, w = image.width;

    const std::vector<float> lum_img = luminance01(image);
    const std::vector<float> lum_pose = luminance01(pm);

    // A: bright pixels sitting on a luminance edge of the image
    // B: non-background pixels of the pose map
    std::size_t count_a = 0, count_b = 0, count_ab = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float mx = 0.0f, mn = 1.0f;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    const float v = lum_img[static_cast<std::size_t>(yy) * w + xx];
                    mx = std::max(mx, v);
                    mn = std::min(mn, v);
                }
            const std::size_t idx = static_cast<std::size_t>(y) * w + x;
            const bool in_a =
                mx - mn > kEdgeThreshold && lum_img[idx] > kPoseForegroundThreshold;
            const bool in_b = lum_pose[idx] > kPoseForegroundThreshold;
            count_a += in_a;
            count_b += in_b;
            count_ab += in_a && in_b;
        }
    if (count_a == 0 || count_b == 0) return 0.0;
    return static_cast<double>(count_ab) / static_cast<double>(std::min(count_a, count_b));
}

void TrainConfig::validate() const {
    if (epochs < 1) throw validation_error("epochs must be >= 1");
    if (batch_size < 1) throw validation_error("batch_size must be >= 1");
    if (!(lr > 0.0)) throw validation_error("learning rate must be positive");
    if (weight_decay < 0.0) throw validation_error("weight decay must be >= 0");
    if (backbone != "toy-cnn")
        throw validation_error("unknown backbone \"" + backbone +
                               "\" (only \"toy-cnn\" is built in)");
}

ToyCnn::ToyCnn(std::uint64_t init_seed) {
    Rng rng(hash_combine(0x636C617373ull, init_seed));
    conv1_.init(3, 24, 3, 2, 1, rng);
    gn1_.init(24, 4);
    conv2_.init(24, 48, 3, 2, 1, rng);
    gn2_.init(48, 8);
    conv3_.init(48, 64, 3, 2, 1, rng);
    gn3_.init(64, 8);
    conv4_.init(64, 96, 3, 1, 1, rng);
    gn4_.init(96, 8);
    head_.init(96, kNumCategories, rng);
    conv1_.reg(registry_, "cls.conv1");
    gn1_.reg(registry_, "cls.gn1");
    conv2_.reg(registry_, "cls.conv2");
    gn2_.reg(registry_, "cls.gn2");
    conv3_.reg(registry_, "cls.conv3");
    gn3_.reg(registry_, "cls.gn3");
    conv4_.reg(registry_, "cls.conv4");
    gn4_.reg(registry_, "cls.gn4");
    head_.reg(registry_, "cls.head");
}

Tensor<float> ToyCnn::prepare(const ImageBuffer& image) {
    if (image.channels != 3) throw validation_error("classifier expects 3-channel images");
    if (image.width % 8 != 0 || image.height % 8 != 0 || image.width < 8 || image.height < 8)
        throw validation_error("classifier expects sides that are positive multiples of 8");
    return to_tensor<float>(image.range == PixelRange::Unit ? image : to_unit(image));
}

Tensor<float> ToyCnn::forward(const Tensor<float>& x, Tape<float>* tape) const {
    Tensor<float> h = act_.forward(gn1_.forward(conv1_.forward(x, tape), tape), tape);
    h = act_.forward(gn2_.forward(conv2_.forward(h, tape), tape), tape);
    h = act_.forward(gn3_.forward(conv3_.forward(h, tape), tape), tape);
    h = act_.forward(gn4_.forward(conv4_.forward(h, tape), tape), tape);

    // global average pool, then the linear head over the pooled vector
    const std::size_t plane = static_cast<std::size_t>(h.h) * h.w;
    std::vector<float> pooled(static_cast<std::size_t>(h.c));
    for (int c = 0; c < h.c; ++c) {
        float acc = 0.0f;
        const float* base = &h.v[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) acc += base[i];
        pooled[static_cast<std::size_t>(c)] = acc / static_cast<float>(plane);
    }
    if (tape) tape->push(Tensor<float>(h.c, h.h, h.w));
    std::vector<float> out = head_.forward(pooled, tape);
    return from_vector(std::move(out));
}

void ToyCnn::backward(const Tensor<float>& dy, Tape<float>& tape) {
    std::vector<float> dpooled = head_.backward(dy.v, tape);
    Tensor<float> shape = tape.pop();
    const std::size_t plane = static_cast<std::size_t>(shape.h) * shape.w;
    Tensor<float> dh(shape.c, shape.h, shape.w);
    for (int c = 0; c < shape.c; ++c) {
        const float g = dpooled[static_cast<std::size_t>(c)] / static_cast<float>(plane);
        float* base = &dh.v[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) base[i] = g;
    }
    dh = conv4_.backward(gn4_.backward(act_.backward(dh, tape), tape), tape);
    dh = conv3_.backward(gn3_.backward(act_.backward(dh, tape), tape), tape);
    dh = conv2_.backward(gn2_.backward(act_.backward(dh, tape), tape), tape);
    conv1_.backward(gn1_.backward(act_.backward(dh, tape), tape), tape);
}

std::vector<float> ToyCnn::logits(const ImageBuffer& image) const {
    return forward(prepare(image), nullptr).v;
}

std::vector<float> ToyCnn::logits(const Tensor<float>& input) const {
    return forward(input, nullptr).v;
}

int ToyCnn::predict(const ImageBuffer& image) const {
    const std::vector<float> scores = logits(image);
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

int ToyCnn::predict(const Tensor<float>& input) const {
    const std::vector<float> scores = logits(input);
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

float ToyCnn::loss_and_grads(const std::vector<const Tensor<float>*>& images,
                             const std::vector<int>& labels) {
    if (images.empty()) throw validation_error("training batch is empty");
    if (images.size() != labels.size())
        throw validation_error("image and label counts differ");
    const float bscale = 1.0f / static_cast<float>(images.size());
    float total = 0.0f;
    for (std::size_t s = 0; s < images.size(); ++s) {
        category_from_id(labels[s]);
        Tape<float> tape;
        Tensor<float> z = forward(*images[s], &tape);

        // softmax cross-entropy with the max subtracted for stability
        const float mx = *std::max_element(z.v.begin(), z.v.end());
        float lse = 0.0f;
        for (float v : z.v) lse += std::exp(v - mx);
        lse = std::log(lse) + mx;
        total += (lse - z.v[static_cast<std::size_t>(labels[s])]) * bscale;

        Tensor<float> dz(z.c, z.h, z.w);
        for (std::size_t k = 0; k < z.v.size(); ++k)
            dz.v[k] = std::exp(z.v[k] - lse) * bscale;
        dz.v[static_cast<std::size_t>(labels[s])] -= bscale;
        backward(dz, tape);
        if (!tape.empty()) throw validation_error("activation tape not fully consumed");
    }
    return total;
}

namespace {

struct LoadedSet {
    std::vector<Tensor<float>> images;
    std::vector<int> labels;
};

LoadedSet load_set(const DatasetManifest& manifest, const std::string& base_dir) {
    LoadedSet out;
    out.images.reserve(manifest.records.size());
    out.labels.reserve(manifest.records.size());
    for (const LabeledSample& s : manifest.records) {
        out.images.push_back(to_tensor<float>(to_unit(resolve_image(s, base_dir))));
        out.labels.push_back(s.category_id);
    }
    return out;
}

EvalResult evaluate_loaded(const ToyCnn& model, const LoadedSet& set) {
    std::vector<int> predictions;
    predictions.reserve(set.images.size());
    for (const Tensor<float>& img : set.images) predictions.push_back(model.predict(img));
    return f1_macro(predictions, set.labels);
}

} // namespace

TrainOutcome train_classifier(const DatasetManifest& train_manifest,
                              const DatasetManifest& eval_manifest, const TrainConfig& config,
                              const std::string& base_dir) {
    config.validate();
    if (train_manifest.records.empty()) throw validation_error("training manifest is empty");
    if (eval_manifest.records.empty()) throw validation_error("evaluation manifest is empty");
    const auto counts = per_class_counts(train_manifest);
    for (int c = 0; c < kNumCategories; ++c)
        if (counts[static_cast<std::size_t>(c)] == 0)
            throw validation_error("class " + category_from_id(c).code +
                                   " is absent from the training manifest");

    LoadedSet train = load_set(train_manifest, base_dir);
    LoadedSet eval_set = load_set(eval_manifest, base_dir);

    TrainOutcome out;
    out.model = std::make_unique<ToyCnn>(config.seed);
    Adam<float>::Config opt_cfg;
    opt_cfg.lr = config.lr;
    opt_cfg.weight_decay = config.weight_decay;
    Adam<float> opt(opt_cfg);
    Rng order_rng(hash_combine(0x65706F6368ull, config.seed));

    std::vector<std::size_t> order(train.images.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t hi =
                std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
            std::vector<const Tensor<float>*> images;
            std::vector<int> labels;
            for (std::size_t i = lo; i < hi; ++i) {
                images.push_back(&train.images[order[i]]);
                labels.push_back(train.labels[order[i]]);
            }
            out.model->params().zero_grads();
            const float loss = out.model->loss_and_grads(images, labels);
            opt.step(out.model->params());
            epoch_loss += static_cast<double>(loss) * static_cast<double>(images.size());
            seen += images.size();
        }
        out.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    out.eval = evaluate_loaded(*out.model, eval_set);
    return out;
}

EvalResult evaluate(const ToyCnn& model, const DatasetManifest& eval_manifest,
                    const std::string& base_dir) {
    if (eval_manifest.records.empty()) throw validation_error("evaluation manifest is empty");
    return evaluate_loaded(model, load_set(eval_manifest, base_dir));
}

SweepTable ratio_sweep(const DatasetManifest& real, const DatasetManifest& synthetic_pool,
                       const DatasetManifest& eval_set, const std::vector<double>& ratios, int k,
                       const std::vector<std::uint64_t>& seeds, const TrainConfig& config,
                       const std::string& base_dir) {
    if (ratios.empty()) throw validation_error("ratio sweep needs at least one ratio");
    if (seeds.empty()) throw validation_error("ratio sweep needs at least one seed");
    config.validate();

    SweepTable table;
    for (double ratio : ratios) {
        double sum = 0.0, sum_sq = 0.0;
        for (std::uint64_t seed : seeds) {
            DatasetManifest shot = few_shot_subset(real, k, seed);
            MixSpec spec;
            spec.ratio = ratio;
            spec.k_shot = k;
            spec.seed = seed;
            DatasetManifest mixed = mix(shot, synthetic_pool, spec);
            TrainConfig cell_cfg = config;
            cell_cfg.seed = seed;
            TrainOutcome run = train_classifier(mixed, eval_set, cell_cfg, base_dir);
            SweepCell cell;
            cell.ratio = ratio;
            cell.seed = seed;
            cell.top1 = run.eval.top1;
            cell.f1_macro = run.eval.f1_macro;
            cell.n_train = mixed.records.size();
            table.cells.push_back(cell);
            sum += cell.top1;
            sum_sq += cell.top1 * cell.top1;
        }
        const double n = static_cast<double>(seeds.size());
        SweepSummary s;
        s.ratio = ratio;
        s.mean_top1 = sum / n;
        s.std_top1 = std::sqrt(std::max(0.0, sum_sq / n - s.mean_top1 * s.mean_top1));
        table.summary.push_back(s);
    }
    return table;
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

void write_sweep_table(const SweepTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw external_error("cannot open results table for writing: " + path);
    out << "ratio\tseed\ttop1\tf1_macro\tn_train\n";
    for (const SweepCell& c : table.cells)
        out << format_double(c.ratio) << '\t' << c.seed << '\t' << format_double(c.top1) << '\t'
            << format_double(c.f1_macro) << '\t' << c.n_train << '\n';
    if (!out.flush()) throw external_error("failed writing results table: " + path);
}

void write_sweep_plot(const SweepTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw external_error("cannot open plot data for writing: " + path);
    out << "x\ty\tseries\n";
    for (const SweepCell& c : table.cells)
        out << format_double(c.ratio) << '\t' << format_double(c.top1) << "\tseed-" << c.seed
            << '\n';
    for (const SweepSummary& s : table.summary)
        out << format_double(s.ratio) << '\t' << format_double(s.mean_top1) << "\tmean\n";
    if (!out.flush()) throw external_error("failed writing plot data: " + path);
}

} // namespace pqdaf
