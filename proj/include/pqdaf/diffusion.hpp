#pragma once

#include "pqdaf/error.hpp"
#include "pqdaf/image.hpp"
#include "pqdaf/nn.hpp"
#include "pqdaf/pose.hpp"
#include "pqdaf/rng.hpp"
#include "pqdaf/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace pqdaf {

// Diffusion noise schedule. alpha_bars[t] is the exclusive cumulative
// product of alphas, so alpha_bars[0] == 1 and t == 0 leaves x0 untouched.
struct NoiseSchedule {
    int T = 200;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 2e-2);
    void validate() const;
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
ImageBuffer forward_noise(const ImageBuffer& x0, int t, const ImageBuffer& eps,
                          const NoiseSchedule& schedule);

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                        const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.T)
        throw validation_error("diffusion step t out of range: " + std::to_string(t));
    if (!x0.same_shape(eps)) throw validation_error("noise shape does not match image shape");
    const T a = static_cast<T>(std::sqrt(schedule.alpha_bars[static_cast<std::size_t>(t)]));
    const T s = static_cast<T>(std::sqrt(1.0 - schedule.alpha_bars[static_cast<std::size_t>(t)]));
    Tensor<T> out(x0.c, x0.h, x0.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + s * eps.v[i];
    return out;
}

// Evenly spaced sampling-time ladder: ascending, unique, times.front() == 0
// and times.back() == T - 1, with `steps` denoiser evaluations between them.
std::vector<int> sample_times(int T, int steps);

// Architecture and initialization parameters for the generator. The default
// is the 32x32 desk-scale configuration; the gradcheck tests shrink it to a
// miniature variant through the same fields.
struct DenoiserConfig {
    int resolution = 32;
    int channels = 32;      // trunk width, also the attention/token width
    int groups = 8;
    int pose_channels = 16; // pose encoder output channels
    int pose_layers = 4;
    int feat_dim = 32;      // frozen pyramid output width
    int proj_hidden = 48;   // hidden width of the two projection perceptrons
    int time_dim = 64;
    int sin_dim = 32;
    int res_blocks = 3;     // attention blocks sit between consecutive pairs
    std::uint64_t init_seed = 1;
    std::uint64_t frozen_seed = 101;

    void validate() const;
};

// Inputs and embeddings for one conditioned generation: the three branch
// inputs (width-concatenated image pair, masked source with its indicator
// channel, width-concatenated pose maps), the frozen-encoder features, and
// the embeddings computed by the trainable encoder heads. drop flags mark a
// branch as replaced by its learned null embedding.
template <typename T>
struct ConditionBundle {
    Tensor<T> pair_input; // 3 x H x 2W
    Tensor<T> mask_input; // 4 x H x W, channel 3 is the indicator
    Tensor<T> pose_input; // 3 x H x 2W
    ImageBuffer indicator; // 1 channel, values in {0, 1}

    std::vector<T> semantic_feat; // frozen encoder over pair_input
    std::vector<T> mask_feat;     // frozen encoder over mask_input

    std::vector<T> f_st; // fused image embedding
    std::vector<T> i_sm; // mask-aware embedding
    Tensor<T> p_st;      // pose structure embedding, pose_channels x H x 2W

    bool drop_image = false; // f_st and i_sm jointly
    bool drop_pose = false;  // p_st

    void validate() const {
        for (float v : indicator.values)
            if (v != 0.0f && v != 1.0f)
                throw validation_error("indicator map must contain only 0 and 1");
        if (!drop_image && (f_st.empty() || i_sm.empty()))
            throw validation_error("image-branch embeddings missing and not marked dropped");
        if (!drop_pose && p_st.v.empty())
            throw validation_error("pose embedding missing and not marked dropped");
    }
};

// Frozen convolutional pyramid: three stride-2 convolutions with SiLU
// between, global-mean-pooled to a feature vector. Parameters are derived
// from a fixed seed and never registered with any optimizer.
template <typename T>
class FrozenPyramid {
public:
    void init(int in_c, int feat_dim, std::uint64_t seed) {
        Rng rng(seed);
        const int c1 = std::max(2, feat_dim / 4);
        const int c2 = std::max(2, feat_dim / 2);
        conv1_.init(in_c, c1, 3, 2, 1, rng);
        conv2_.init(c1, c2, 3, 2, 1, rng);
        conv3_.init(c2, feat_dim, 3, 2, 1, rng);
        feat_dim_ = feat_dim;
    }

    std::vector<T> forward(const Tensor<T>& x) const {
        SiLU<T> act;
        Tensor<T> h = act.forward(conv1_.forward(x, nullptr), nullptr);
        h = act.forward(conv2_.forward(h, nullptr), nullptr);
        h = conv3_.forward(h, nullptr);
        std::vector<T> feat(static_cast<std::size_t>(feat_dim_), T(0));
        const std::size_t plane = static_cast<std::size_t>(h.h) * h.w;
        for (int c = 0; c < feat_dim_; ++c) {
            T acc = T(0);
            for (std::size_t i = 0; i < plane; ++i) acc += h.v[static_cast<std::size_t>(c) * plane + i];
            feat[static_cast<std::size_t>(c)] = acc / static_cast<T>(plane);
        }
        return feat;
    }

    void checksum_into(std::uint64_t& h) const {
        for (const auto* vec : {&conv1_.w, &conv1_.b, &conv2_.w, &conv2_.b, &conv3_.w, &conv3_.b})
            for (T x : *vec) {
                double d = static_cast<double>(x);
                std::uint64_t bits;
                static_assert(sizeof(bits) == sizeof(d));
                std::memcpy(&bits, &d, sizeof(bits));
                h = hash_combine(h, bits);
            }
    }

    int feat_dim() const { return feat_dim_; }

private:
    Conv2d<T> conv1_, conv2_, conv3_;
    int feat_dim_ = 0;
};

// The conditioning encoders: two frozen pyramids (semantic pair branch and
// masked-source branch) with trainable projection heads, the trainable
// four-layer pose encoder, and the learned per-branch null embeddings.
template <typename T>
class EncoderSet {
public:
    void init(const DenoiserConfig& cfg, Rng& rng) {
        cfg_ = cfg;
        frozen_semantic_.init(3, cfg.feat_dim, cfg.frozen_seed);
        frozen_mask_.init(4, cfg.feat_dim, hash_combine(cfg.frozen_seed, 0x6D61736Bull));
        semantic_proj_.init(cfg.feat_dim, cfg.proj_hidden, cfg.channels, rng);
        mask_proj_.init(cfg.feat_dim, cfg.proj_hidden, cfg.channels, rng);
        pose_convs_.resize(static_cast<std::size_t>(cfg.pose_layers));
        int in_c = 3;
        for (int l = 0; l < cfg.pose_layers; ++l) {
            pose_convs_[static_cast<std::size_t>(l)].init(in_c, cfg.pose_channels, 3, 1, 1, rng);
            in_c = cfg.pose_channels;
        }
        null_f_.assign(static_cast<std::size_t>(cfg.channels), T(0));
        null_i_.assign(static_cast<std::size_t>(cfg.channels), T(0));
        null_p_.assign(static_cast<std::size_t>(cfg.pose_channels), T(0));
        nn_detail::init_uniform(null_f_, rng, 0.1);
        nn_detail::init_uniform(null_i_, rng, 0.1);
        nn_detail::init_uniform(null_p_, rng, 0.1);
    }

    void reg(ParamRegistry<T>& r) {
        semantic_proj_.reg(r, "enc.semantic_proj");
        mask_proj_.reg(r, "enc.mask_proj");
        for (std::size_t l = 0; l < pose_convs_.size(); ++l)
            pose_convs_[l].reg(r, "enc.pose.conv" + std::to_string(l));
        r.add("enc.null_f", &null_f_, &gnull_f_, false);
        r.add("enc.null_i", &null_i_, &gnull_i_, false);
        r.add("enc.null_p", &null_p_, &gnull_p_, false);
    }

    std::vector<T> frozen_semantic_forward(const Tensor<T>& pair_input) const {
        return frozen_semantic_.forward(pair_input);
    }
    std::vector<T> frozen_mask_forward(const Tensor<T>& mask_input) const {
        return frozen_mask_.forward(mask_input);
    }

    std::vector<T> encode_f(const std::vector<T>& semantic_feat, Tape<T>* tape) const {
        return semantic_proj_.forward(semantic_feat, tape);
    }
    std::vector<T> encode_i(const std::vector<T>& mask_feat, Tape<T>* tape) const {
        return mask_proj_.forward(mask_feat, tape);
    }

    Tensor<T> encode_p(const Tensor<T>& pose_input, Tape<T>* tape) const {
        Tensor<T> h = pose_convs_.front().forward(pose_input, tape);
        for (std::size_t l = 1; l < pose_convs_.size(); ++l) {
            h = act_.forward(h, tape);
            h = pose_convs_[l].forward(h, tape);
        }
        return h;
    }

    void encode_f_backward(const std::vector<T>& df, Tape<T>& tape) {
        semantic_proj_.backward(df, tape);
    }
    void encode_i_backward(const std::vector<T>& di, Tape<T>& tape) {
        mask_proj_.backward(di, tape);
    }
    void encode_p_backward(const Tensor<T>& dp, Tape<T>& tape) {
        Tensor<T> d = dp;
        for (std::size_t l = pose_convs_.size(); l-- > 1;) {
            d = pose_convs_[l].backward(d, tape);
            d = act_.backward(d, tape);
        }
        pose_convs_.front().backward(d, tape);
    }

    const std::vector<T>& null_f() const { return null_f_; }
    const std::vector<T>& null_i() const { return null_i_; }
    const std::vector<T>& null_p() const { return null_p_; }
    std::vector<T>& null_f_grad() { return gnull_f_; }
    std::vector<T>& null_i_grad() { return gnull_i_; }
    std::vector<T>& null_p_grad() { return gnull_p_; }

    // Exact digest of the frozen parameters; training must never change it.
    std::uint64_t frozen_checksum() const {
        std::uint64_t h = 0xCBF29CE484222325ull;
        frozen_semantic_.checksum_into(h);
        frozen_mask_.checksum_into(h);
        return h;
    }

private:
    DenoiserConfig cfg_;
    FrozenPyramid<T> frozen_semantic_, frozen_mask_;
    Mlp<T> semantic_proj_, mask_proj_;
    std::vector<Conv2d<T>> pose_convs_;
    SiLU<T> act_;
    std::vector<T> null_f_, null_i_, null_p_;
    std::vector<T> gnull_f_, gnull_i_, gnull_p_;
};

// Residual block: norm -> SiLU -> conv -> +time bias -> norm -> SiLU ->
// conv, with an identity skip.
template <typename T>
struct ResBlock {
    GroupNorm<T> gn1, gn2;
    Conv2d<T> conv1, conv2;
    Linear<T> time_proj;
    SiLU<T> act;

    void init(int channels, int groups, int time_dim, Rng& rng) {
        gn1.init(channels, groups);
        gn2.init(channels, groups);
        conv1.init(channels, channels, 3, 1, 1, rng);
        conv2.init(channels, channels, 3, 1, 1, rng);
        time_proj.init(time_dim, channels, rng);
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        gn1.reg(r, name + ".gn1");
        conv1.reg(r, name + ".conv1");
        time_proj.reg(r, name + ".time");
        gn2.reg(r, name + ".gn2");
        conv2.reg(r, name + ".conv2");
    }

    Tensor<T> forward(const Tensor<T>& x, const std::vector<T>& t_act, Tape<T>* tape) const {
        Tensor<T> h = conv1.forward(act.forward(gn1.forward(x, tape), tape), tape);
        std::vector<T> tb = time_proj.forward(t_act, tape);
        const std::size_t plane = static_cast<std::size_t>(h.h) * h.w;
        for (int c = 0; c < h.c; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                h.v[static_cast<std::size_t>(c) * plane + i] += tb[static_cast<std::size_t>(c)];
        h = conv2.forward(act.forward(gn2.forward(h, tape), tape), tape);
        for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] += x.v[i];
        return h;
    }

    Tensor<T> backward(const Tensor<T>& dy, std::vector<T>& dt_act, Tape<T>& tape) {
        Tensor<T> d = gn2.backward(act.backward(conv2.backward(dy, tape), tape), tape);
        std::vector<T> dtb(static_cast<std::size_t>(d.c), T(0));
        const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
        for (int c = 0; c < d.c; ++c) {
            T acc = T(0);
            for (std::size_t i = 0; i < plane; ++i) acc += d.v[static_cast<std::size_t>(c) * plane + i];
            dtb[static_cast<std::size_t>(c)] = acc;
        }
        std::vector<T> dt = time_proj.backward(dtb, tape);
        for (std::size_t i = 0; i < dt_act.size(); ++i) dt_act[i] += dt[i];
        d = gn1.backward(act.backward(conv1.backward(d, tape), tape), tape);
        for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] += dy.v[i];
        return d;
    }
};

// The noise-prediction network epsilon_theta(x_t, conditions, t): a
// single-resolution trunk of residual blocks alternating with cross
// attention over the condition tokens, plus the trainable encoder heads it
// conditions on. Inference (tape-less forward) is const and safe to share
// across concurrent samplers; training runs as one logical stream.
template <typename T>
class DenoiserModel {
public:
    explicit DenoiserModel(const DenoiserConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.init_seed);
        encoders_.init(cfg_, rng);
        conv_in_.init(3, cfg_.channels, 3, 1, 1, rng);
        pose_inject_.init(cfg_.pose_channels, cfg_.channels, 1, 1, 0, rng, /*zero=*/true);
        time_mlp_.init(cfg_.sin_dim, cfg_.time_dim, cfg_.time_dim, rng);
        time_token_.init(cfg_.time_dim, cfg_.channels, rng);
        res_.resize(static_cast<std::size_t>(cfg_.res_blocks));
        attn_.resize(static_cast<std::size_t>(cfg_.res_blocks - 1));
        for (auto& r : res_) r.init(cfg_.channels, cfg_.groups, cfg_.time_dim, rng);
        for (auto& a : attn_) a.init(cfg_.channels, rng);
        norm_out_.init(cfg_.channels, cfg_.groups);
        conv_out_.init(cfg_.channels, 3, 3, 1, 1, rng, /*zero=*/true);

        encoders_.reg(registry_);
        conv_in_.reg(registry_, "trunk.conv_in");
        pose_inject_.reg(registry_, "trunk.pose_inject");
        time_mlp_.reg(registry_, "trunk.time_mlp");
        time_token_.reg(registry_, "trunk.time_token");
        for (std::size_t i = 0; i < res_.size(); ++i)
            res_[i].reg(registry_, "trunk.res" + std::to_string(i));
        for (std::size_t i = 0; i < attn_.size(); ++i)
            attn_[i].reg(registry_, "trunk.attn" + std::to_string(i));
        norm_out_.reg(registry_, "trunk.norm_out");
        conv_out_.reg(registry_, "trunk.conv_out");
    }

    DenoiserModel(const DenoiserModel&) = delete;
    DenoiserModel& operator=(const DenoiserModel&) = delete;

    const DenoiserConfig& config() const { return cfg_; }
    ParamRegistry<T>& params() { return registry_; }
    const ParamRegistry<T>& params() const { return registry_; }
    EncoderSet<T>& encoders() { return encoders_; }
    const EncoderSet<T>& encoders() const { return encoders_; }

    // Inference using the bundle's stored embeddings and drop flags.
    Tensor<T> predict(const Tensor<T>& x_t, const ConditionBundle<T>& bundle, int t) const {
        return predict_branch(x_t, bundle, t, bundle.drop_image, bundle.drop_pose);
    }

    // Inference with explicit branch selection (used by guided prediction).
    Tensor<T> predict_branch(const Tensor<T>& x_t, const ConditionBundle<T>& bundle, int t,
                             bool drop_image, bool drop_pose) const {
        if (!drop_image && (bundle.f_st.empty() || bundle.i_sm.empty()))
            throw validation_error("image-branch embeddings missing from condition bundle");
        if (!drop_pose && bundle.p_st.v.empty())
            throw validation_error("pose embedding missing from condition bundle");
        const std::vector<T>& f = drop_image ? encoders_.null_f() : bundle.f_st;
        const std::vector<T>& i = drop_image ? encoders_.null_i() : bundle.i_sm;
        Tensor<T> p = drop_pose ? broadcast_null_p(x_t.h, x_t.w)
                                : slice_target_half(bundle.p_st, x_t.w);
        return trunk_forward(x_t, t, f, i, p, nullptr);
    }

    Tensor<T> trunk_forward(const Tensor<T>& x_t, int t, const std::vector<T>& f_emb,
                            const std::vector<T>& i_emb, const Tensor<T>& p_target,
                            Tape<T>* tape) const {
        if (x_t.c != 3) throw validation_error("denoiser input must have 3 channels");
        std::vector<T> t_sin = time_sinusoid(t);
        std::vector<T> t_emb = time_mlp_.forward(t_sin, tape);
        std::vector<T> t_act = act_.forward(t_emb, tape);
        std::vector<T> tok_t = time_token_.forward(t_act, tape);
        Tensor<T> h = conv_in_.forward(x_t, tape);
        Tensor<T> hp = pose_inject_.forward(p_target, tape);
        for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] += hp.v[i];
        std::vector<std::vector<T>> tokens{tok_t, f_emb, i_emb};
        for (std::size_t b = 0; b < res_.size(); ++b) {
            h = res_[b].forward(h, t_act, tape);
            if (b < attn_.size()) h = attn_[b].forward(h, tokens, tape);
        }
        h = act_.forward(norm_out_.forward(h, tape), tape);
        return conv_out_.forward(h, tape);
    }

    // Mirrors trunk_forward; returns d x_t and fills the embedding grads.
    Tensor<T> trunk_backward(const Tensor<T>& dpred, Tape<T>& tape, std::vector<T>& df_emb,
                             std::vector<T>& di_emb, Tensor<T>& dp_target) {
        Tensor<T> d = norm_out_.backward(act_.backward(conv_out_.backward(dpred, tape), tape), tape);
        std::vector<T> dt_act(static_cast<std::size_t>(cfg_.time_dim), T(0));
        std::vector<std::vector<T>> dtokens(3, std::vector<T>(static_cast<std::size_t>(cfg_.channels), T(0)));
        for (std::size_t b = res_.size(); b-- > 0;) {
            if (b < attn_.size()) d = attn_[b].backward(d, dtokens, tape);
            d = res_[b].backward(d, dt_act, tape);
        }
        dp_target = pose_inject_.backward(d, tape);
        Tensor<T> dx = conv_in_.backward(d, tape);
        std::vector<T> dtt = time_token_.backward(dtokens[0], tape);
        for (std::size_t i = 0; i < dt_act.size(); ++i) dt_act[i] += dtt[i];
        std::vector<T> dt_emb = act_.backward(dt_act, tape);
        time_mlp_.backward(dt_emb, tape);
        df_emb = std::move(dtokens[1]);
        di_emb = std::move(dtokens[2]);
        return dx;
    }

    Tensor<T> broadcast_null_p(int h, int w) const {
        Tensor<T> p(cfg_.pose_channels, h, w);
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        for (int c = 0; c < cfg_.pose_channels; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                p.v[static_cast<std::size_t>(c) * plane + i] =
                    encoders_.null_p()[static_cast<std::size_t>(c)];
        return p;
    }

    static Tensor<T> slice_target_half(const Tensor<T>& p_st, int target_w) {
        if (p_st.w != 2 * target_w)
            throw validation_error("pose embedding width does not match a source/target pair");
        Tensor<T> out(p_st.c, p_st.h, target_w);
        for (int c = 0; c < p_st.c; ++c)
            for (int y = 0; y < p_st.h; ++y)
                for (int x = 0; x < target_w; ++x)
                    out.at(c, y, x) = p_st.at(c, y, target_w + x);
        return out;
    }

    std::vector<T> time_sinusoid(int t) const {
        const int half = cfg_.sin_dim / 2;
        std::vector<T> out(static_cast<std::size_t>(cfg_.sin_dim));
        for (int i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
            out[static_cast<std::size_t>(i)] = static_cast<T>(std::sin(t * freq));
            out[static_cast<std::size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
        }
        return out;
    }

private:
    DenoiserConfig cfg_;
    EncoderSet<T> encoders_;
    Conv2d<T> conv_in_, pose_inject_, conv_out_;
    Mlp<T> time_mlp_;
    Linear<T> time_token_;
    std::vector<ResBlock<T>> res_;
    std::vector<CrossAttention<T>> attn_;
    GroupNorm<T> norm_out_;
    SiLU<T> act_;
    ParamRegistry<T> registry_;
};

// Builds a ConditionBundle from raw inputs: width-concatenates the image and
// pose pairs, derives the indicator from the mask, fills occluded source
// pixels with the neutral value, runs the frozen encoders, and computes the
// current embeddings.
template <typename T>
ConditionBundle<T> assemble_conditions(const ImageBuffer& source, const ImageBuffer& target,
                                       const PoseMap& source_pose, const PoseMap& target_pose,
                                       const ImageBuffer& mask, const EncoderSet<T>& encoders) {
    if (source.height != target.height || source.width != target.width ||
        source.channels != 3 || target.channels != 3)
        throw validation_error("source and target must be 3-channel images of equal size");
    if (source_pose.image.height != source.height || source_pose.image.width != source.width ||
        target_pose.image.height != source.height || target_pose.image.width != source.width)
        throw validation_error("pose maps must match the image size");
    if (mask.channels != 1 || mask.height != source.height || mask.width != source.width)
        throw validation_error("mask must be a 1-channel map matching the source size");
    for (float v : mask.values)
        if (v != 0.0f && v != 1.0f) throw validation_error("mask must be binary (0/1)");

    ConditionBundle<T> b;
    b.pair_input = to_tensor<T>(hconcat(to_unit(source), to_unit(target)));
    b.pose_input = to_tensor<T>(hconcat(to_unit(source_pose.image), to_unit(target_pose.image)));

    b.indicator = mask;
    Tensor<T> src = to_tensor<T>(to_unit(source));
    b.mask_input = Tensor<T>(4, source.height, source.width);
    for (int y = 0; y < source.height; ++y)
        for (int x = 0; x < source.width; ++x) {
            const bool keep = mask.at(0, y, x) == 1.0f;
            for (int c = 0; c < 3; ++c)
                b.mask_input.at(c, y, x) = keep ? src.at(c, y, x) : T(0);
            b.mask_input.at(3, y, x) = keep ? T(1) : T(0);
        }

    b.semantic_feat = encoders.frozen_semantic_forward(b.pair_input);
    b.mask_feat = encoders.frozen_mask_forward(b.mask_input);
    b.f_st = encoders.encode_f(b.semantic_feat, nullptr);
    b.i_sm = encoders.encode_i(b.mask_feat, nullptr);
    b.p_st = encoders.encode_p(b.pose_input, nullptr);
    return b;
}

// Weighted dual-branch guided prediction:
//   w * eps(x_t, f_st, i_sm, t) + (1 - w) * eps(x_t, p_st, t)
// The endpoints return the single branch directly, bit-for-bit.
template <typename T>
Tensor<T> cfg_predict(const DenoiserModel<T>& model, const Tensor<T>& x_t,
                      const ConditionBundle<T>& bundle, int t, double w) {
    if (!(w >= 0.0 && w <= 1.0))
        throw validation_error("guidance weight w must lie in [0, 1]");
    if (w == 1.0) return model.predict_branch(x_t, bundle, t, false, true);
    if (w == 0.0) return model.predict_branch(x_t, bundle, t, true, false);
    Tensor<T> img = model.predict_branch(x_t, bundle, t, false, true);
    Tensor<T> pose = model.predict_branch(x_t, bundle, t, true, false);
    Tensor<T> out(img.c, img.h, img.w);
    const T wi = static_cast<T>(w);
    for (std::size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = wi * img.v[i] + (T(1) - wi) * pose.v[i];
    return out;
}

struct SamplerConfig {
    double w = 0.5;
    int steps = 40;
    std::uint64_t seed = 0;
    bool deterministic = true;
    std::uint64_t image_index = 0;
};

// Iterative reverse process driven by cfg_predict. Deterministic mode uses
// the noise-free update; otherwise per-step Gaussian noise is injected. The
// random stream depends only on (seed, image_index), so concurrent samplers
// reproduce the sequential results.
template <typename T>
ImageBuffer sample(const DenoiserModel<T>& model, const ConditionBundle<T>& bundle,
                   const NoiseSchedule& schedule, const SamplerConfig& config) {
    if (config.steps < 1) throw validation_error("sampler steps must be >= 1");
    if (!(config.w >= 0.0 && config.w <= 1.0))
        throw validation_error("guidance weight w must lie in [0, 1]");
    schedule.validate();
    Rng rng(hash_combine(hash_combine(0x73616D706C65ull, config.seed), config.image_index));

    const std::vector<int> times = sample_times(schedule.T, config.steps);
    const int res = model.config().resolution;
    Tensor<T> x(3, res, res);
    const double sigma_init =
        std::sqrt(1.0 - schedule.alpha_bars[static_cast<std::size_t>(times.back())]);
    for (auto& v : x.v) v = static_cast<T>(sigma_init * rng.normal());

    for (std::size_t j = times.size(); j-- > 1;) {
        const int t = times[j];
        const int t_prev = times[j - 1];
        Tensor<T> eps_hat = cfg_predict(model, x, bundle, t, config.w);
        const double ab_t = schedule.alpha_bars[static_cast<std::size_t>(t)];
        const double ab_p = schedule.alpha_bars[static_cast<std::size_t>(t_prev)];
        const double sa = std::sqrt(ab_t), sn = std::sqrt(1.0 - ab_t);
        double sigma = 0.0;
        if (!config.deterministic)
            sigma = std::sqrt(std::max(0.0, (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)));
        const double coef_eps = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
        const double sap = std::sqrt(ab_p);
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            double x0 = (static_cast<double>(x.v[i]) - sn * static_cast<double>(eps_hat.v[i])) / sa;
            x0 = std::clamp(x0, -1.0, 1.0);
            double nx = sap * x0 + coef_eps * static_cast<double>(eps_hat.v[i]);
            if (sigma > 0.0) nx += sigma * rng.normal();
            x.v[i] = static_cast<T>(nx);
        }
    }
    for (auto& v : x.v) v = std::clamp(v, T(-1), T(1));
    return to_image(x);
}

// One element of a training batch with its noising variables made explicit,
// so losses replay exactly (the gradient check depends on this).
template <typename T>
struct TrainItem {
    const Tensor<T>* x0;
    const ConditionBundle<T>* bundle;
    int t;
    const Tensor<T>* eps;
    bool drop_image = false;
    bool drop_pose = false;
};

// Mean squared error between sampled and predicted noise, averaged over
// values and batch items; gradients are accumulated into the model registry
// in item order. Frozen encoders take no part in the gradient flow.
template <typename T>
T diffusion_loss_and_grads(DenoiserModel<T>& model, const NoiseSchedule& schedule,
                           const std::vector<TrainItem<T>>& items) {
    if (items.empty()) throw validation_error("training batch is empty");
    const T bscale = T(1) / static_cast<T>(items.size());
    T total = T(0);
    for (const TrainItem<T>& item : items) {
        Tape<T> tape;
        Tensor<T> x_t = forward_noise(*item.x0, item.t, *item.eps, schedule);

        std::vector<T> f, i;
        if (item.drop_image) {
            f = model.encoders().null_f();
            i = model.encoders().null_i();
        } else {
            f = model.encoders().encode_f(item.bundle->semantic_feat, &tape);
            i = model.encoders().encode_i(item.bundle->mask_feat, &tape);
        }
        Tensor<T> p_target;
        if (item.drop_pose) {
            p_target = model.broadcast_null_p(x_t.h, x_t.w);
        } else {
            Tensor<T> p_full = model.encoders().encode_p(item.bundle->pose_input, &tape);
            p_target = DenoiserModel<T>::slice_target_half(p_full, x_t.w);
        }

        Tensor<T> pred = model.trunk_forward(x_t, item.t, f, i, p_target, &tape);
        const T n = static_cast<T>(pred.v.size());
        T loss = T(0);
        Tensor<T> dpred(pred.c, pred.h, pred.w);
        for (std::size_t k = 0; k < pred.v.size(); ++k) {
            const T d = pred.v[k] - item.eps->v[k];
            loss += d * d;
            dpred.v[k] = T(2) * d / n * bscale;
        }
        total += loss / n * bscale;

        std::vector<T> df, di;
        Tensor<T> dp_target;
        model.trunk_backward(dpred, tape, df, di, dp_target);

        if (item.drop_pose) {
            const std::size_t plane = static_cast<std::size_t>(dp_target.h) * dp_target.w;
            for (int c = 0; c < dp_target.c; ++c) {
                T acc = T(0);
                for (std::size_t k = 0; k < plane; ++k)
                    acc += dp_target.v[static_cast<std::size_t>(c) * plane + k];
                model.encoders().null_p_grad()[static_cast<std::size_t>(c)] += acc;
            }
        } else {
            Tensor<T> dp_full(dp_target.c, dp_target.h, 2 * dp_target.w);
            for (int c = 0; c < dp_target.c; ++c)
                for (int y = 0; y < dp_target.h; ++y)
                    for (int x = 0; x < dp_target.w; ++x)
                        dp_full.at(c, y, dp_target.w + x) = dp_target.at(c, y, x);
            model.encoders().encode_p_backward(dp_full, tape);
        }
        if (item.drop_image) {
            for (std::size_t k = 0; k < df.size(); ++k) {
                model.encoders().null_f_grad()[k] += df[k];
                model.encoders().null_i_grad()[k] += di[k];
            }
        } else {
            model.encoders().encode_i_backward(di, tape);
            model.encoders().encode_f_backward(df, tape);
        }
        if (!tape.empty()) throw validation_error("activation tape not fully consumed");
    }
    return total;
}

// Owns the optimizer and the training random stream. Each training_step
// draws (t, eps, branch drops) per sample, accumulates gradients in sample
// order, and applies one optimizer update to the trainable parameters.
template <typename T>
class GeneratorTrainer {
public:
    GeneratorTrainer(DenoiserModel<T>& model, NoiseSchedule schedule,
                     typename Adam<T>::Config opt, std::uint64_t seed)
        : model_(model), schedule_(std::move(schedule)), opt_(opt),
          rng_(hash_combine(0x747261696Eull, seed)) {
        schedule_.validate();
    }

    const NoiseSchedule& schedule() const { return schedule_; }

    T training_step(const std::vector<std::pair<const Tensor<T>*, const ConditionBundle<T>*>>& batch,
                    double drop_prob = 0.1) {
        if (batch.empty()) throw validation_error("training batch is empty");
        if (!(drop_prob >= 0.0 && drop_prob < 1.0))
            throw validation_error("drop_prob must lie in [0, 1)");
        std::vector<Tensor<T>> noises(batch.size());
        std::vector<TrainItem<T>> items(batch.size());
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const Tensor<T>* x0 = batch[s].first;
            noises[s] = Tensor<T>(x0->c, x0->h, x0->w);
            for (auto& v : noises[s].v) v = static_cast<T>(rng_.normal());
            items[s].x0 = x0;
            items[s].bundle = batch[s].second;
            items[s].t = 1 + static_cast<int>(rng_.uniform_int(static_cast<std::uint64_t>(schedule_.T - 1)));
            items[s].eps = &noises[s];
            items[s].drop_image = rng_.bernoulli(drop_prob);
            items[s].drop_pose = rng_.bernoulli(drop_prob);
        }
        model_.params().zero_grads();
        T loss = diffusion_loss_and_grads(model_, schedule_, items);
        opt_.step(model_.params());
        return loss;
    }

private:
    DenoiserModel<T>& model_;
    NoiseSchedule schedule_;
    Adam<T> opt_;
    Rng rng_;
};

inline constexpr int kCheckpointFormatVersion = 1;

// Self-describing checkpoint: one JSON header line (format version,
// architecture config, schedule, parameter table) followed by the raw
// float32 parameter values in registry order.
template <typename T>
void save_checkpoint(const DenoiserModel<T>& model, const NoiseSchedule& schedule,
                     const std::string& path);

template <typename T>
std::unique_ptr<DenoiserModel<T>> load_checkpoint(const std::string& path,
                                                  NoiseSchedule* schedule_out);

} // namespace pqdaf
