#include "pqdaf/diffusion.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace pqdaf {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 2) throw validation_error("noise schedule needs at least 2 steps");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
        throw validation_error("betas must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<std::size_t>(T));
    s.alphas.resize(static_cast<std::size_t>(T));
    s.alpha_bars.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        s.betas[static_cast<std::size_t>(t)] =
            beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(T - 1);
        s.alphas[static_cast<std::size_t>(t)] = 1.0 - s.betas[static_cast<std::size_t>(t)];
    }
    s.alpha_bars[0] = 1.0;
    for (int t = 1; t < T; ++t)
        s.alpha_bars[static_cast<std::size_t>(t)] =
            s.alpha_bars[static_cast<std::size_t>(t - 1)] * s.alphas[static_cast<std::size_t>(t - 1)];
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    if (T < 2 || betas.size() != static_cast<std::size_t>(T) ||
        alphas.size() != static_cast<std::size_t>(T) ||
        alpha_bars.size() != static_cast<std::size_t>(T))
        throw validation_error("noise schedule arrays are inconsistent with T");
    if (alpha_bars[0] != 1.0) throw validation_error("alpha_bars[0] must equal 1");
    for (int t = 0; t < T; ++t) {
        const double b = betas[static_cast<std::size_t>(t)];
        if (!(b > 0.0 && b < 1.0)) throw validation_error("betas must lie in (0, 1)");
        if (t > 0 && alpha_bars[static_cast<std::size_t>(t)] >=
                         alpha_bars[static_cast<std::size_t>(t - 1)])
            throw validation_error("alpha_bars must be strictly decreasing");
    }
}

ImageBuffer forward_noise(const ImageBuffer& x0, int t, const ImageBuffer& eps,
                          const NoiseSchedule& schedule) {
    if (x0.range != PixelRange::Unit || eps.range != PixelRange::Unit)
        throw validation_error("forward_noise expects unit-range images");
    if (eps.channels != x0.channels || eps.height != x0.height || eps.width != x0.width)
        throw validation_error("noise shape does not match image shape");
    if (t < 0 || t >= schedule.T)
        throw validation_error("diffusion step t out of range: " + std::to_string(t));
    const double a = std::sqrt(schedule.alpha_bars[static_cast<std::size_t>(t)]);
    const double s = std::sqrt(1.0 - schedule.alpha_bars[static_cast<std::size_t>(t)]);
    ImageBuffer out = x0;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = static_cast<float>(a * x0.values[i] + s * eps.values[i]);
    return out;
}

std::vector<int> sample_times(int T, int steps) {
    if (steps < 1) throw validation_error("sampler steps must be >= 1");
    if (T < 2) throw validation_error("noise schedule needs at least 2 steps");
    std::vector<int> times;
    for (int j = 0; j <= steps; ++j) {
        const int t = static_cast<int>(
            std::llround(static_cast<double>(j) * (T - 1) / static_cast<double>(steps)));
        if (times.empty() || t != times.back()) times.push_back(t);
    }
    return times;
}

void DenoiserConfig::validate() const {
    if (resolution < 8) throw validation_error("resolution must be at least 8");
    if (channels < 4) throw validation_error("channels must be at least 4");
    if (groups < 1 || channels % groups != 0)
        throw validation_error("groups must divide channels");
    if (pose_channels < 2) throw validation_error("pose_channels must be at least 2");
    if (pose_layers < 2) throw validation_error("pose_layers must be at least 2");
    if (feat_dim < 4) throw validation_error("feat_dim must be at least 4");
    if (proj_hidden < 2) throw validation_error("proj_hidden must be at least 2");
    if (time_dim < 2) throw validation_error("time_dim must be at least 2");
    if (sin_dim < 4 || sin_dim % 2 != 0)
        throw validation_error("sin_dim must be even and at least 4");
    if (res_blocks < 2) throw validation_error("res_blocks must be at least 2");
}

namespace {

nlohmann::json config_to_json(const DenoiserConfig& c) {
    return nlohmann::json{
        {"resolution", c.resolution},   {"channels", c.channels},
        {"groups", c.groups},           {"pose_channels", c.pose_channels},
        {"pose_layers", c.pose_layers}, {"feat_dim", c.feat_dim},
        {"proj_hidden", c.proj_hidden}, {"time_dim", c.time_dim},
        {"sin_dim", c.sin_dim},         {"res_blocks", c.res_blocks},
        {"init_seed", c.init_seed},     {"frozen_seed", c.frozen_seed},
    };
}

DenoiserConfig config_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.resolution = j.at("resolution").get<int>();
    c.channels = j.at("channels").get<int>();
    c.groups = j.at("groups").get<int>();
    c.pose_channels = j.at("pose_channels").get<int>();
    c.pose_layers = j.at("pose_layers").get<int>();
    c.feat_dim = j.at("feat_dim").get<int>();
    c.proj_hidden = j.at("proj_hidden").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.sin_dim = j.at("sin_dim").get<int>();
    c.res_blocks = j.at("res_blocks").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.frozen_seed = j.at("frozen_seed").get<std::uint64_t>();
    return c;
}

} // namespace

template <typename T>
void save_checkpoint(const DenoiserModel<T>& model, const NoiseSchedule& schedule,
                     const std::string& path) {
    schedule.validate();
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["config"] = config_to_json(model.config());
    header["schedule"] = {{"T", schedule.T},
                          {"beta_start", schedule.beta_start},
                          {"beta_end", schedule.beta_end}};
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : model.params().entries)
        params.push_back({{"name", e.name}, {"size", e.data->size()}});
    header["params"] = std::move(params);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw external_error("cannot open checkpoint for writing: " + path);
    out << header.dump() << "\n";
    for (const auto& e : model.params().entries)
        for (T v : *e.data) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    if (!out) throw external_error("failed writing checkpoint: " + path);
}

template <typename T>
std::unique_ptr<DenoiserModel<T>> load_checkpoint(const std::string& path,
                                                  NoiseSchedule* schedule_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw external_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line))
        throw validation_error(path + ": missing checkpoint header");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded())
        throw validation_error(path + ": checkpoint header is not valid JSON");
    const int version = header.value("format_version", -1);
    if (version != kCheckpointFormatVersion)
        throw validation_error(path + ": unsupported checkpoint format_version " +
                               std::to_string(version) + " (expected " +
                               std::to_string(kCheckpointFormatVersion) + ")");
    DenoiserConfig cfg;
    NoiseSchedule schedule;
    try {
        cfg = config_from_json(header.at("config"));
        const auto& js = header.at("schedule");
        schedule = NoiseSchedule::linear(js.at("T").get<int>(), js.at("beta_start").get<double>(),
                                         js.at("beta_end").get<double>());
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(path + ": malformed checkpoint header: " + e.what());
    }

    auto model = std::make_unique<DenoiserModel<T>>(cfg);
    const auto& entries = model->params().entries;
    const auto& ptable = header.at("params");
    if (!ptable.is_array() || ptable.size() != entries.size())
        throw validation_error(path + ": checkpoint parameter table does not match the model");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const std::string name = ptable[k].at("name").get<std::string>();
        const std::size_t size = ptable[k].at("size").get<std::size_t>();
        if (name != entries[k].name || size != entries[k].data->size())
            throw validation_error(path + ": checkpoint parameter " + name +
                                   " does not match model parameter " + entries[k].name);
    }
    for (const auto& e : entries)
        for (auto& v : *e.data) {
            float f = 0.0f;
            in.read(reinterpret_cast<char*>(&f), sizeof(f));
            if (!in) throw validation_error(path + ": checkpoint truncated");
            v = static_cast<T>(f);
        }
    if (in.get() != std::ifstream::traits_type::eof())
        throw validation_error(path + ": trailing data after parameters");
    if (schedule_out) *schedule_out = schedule;
    return model;
}

template void save_checkpoint<float>(const DenoiserModel<float>&, const NoiseSchedule&,
                                     const std::string&);
template void save_checkpoint<double>(const DenoiserModel<double>&, const NoiseSchedule&,
                                      const std::string&);
template std::unique_ptr<DenoiserModel<float>> load_checkpoint<float>(const std::string&,
                                                                      NoiseSchedule*);
template std::unique_ptr<DenoiserModel<double>> load_checkpoint<double>(const std::string&,
                                                                        NoiseSchedule*);

} // namespace pqdaf
