#include "pqdaf/filter.hpp"

#include "pqdaf/rng.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace pqdaf {

const PromptTable& PromptTable::standard() {
    static const PromptTable table{{
        "The driver is driving normally with both hands on the steering wheel.",
        "The driver is texting with the right hand while driving.",
        "The driver is holding a phone to the right ear while driving.",
        "The driver is texting with the left hand while driving.",
        "The driver is holding a phone to the left ear while driving.",
        "The driver is adjusting the car's multimedia or infotainment system.",
        "The driver is drinking water while driving.",
        "The driver is reaching toward the back seat to grab something.",
        "The driver is applying makeup while driving.",
        "The driver is talking to a passenger while driving.",
    }};
    return table;
}

const std::string& PromptTable::prompt(int category_id) const {
    if (category_id < 0 || category_id >= kNumCategories)
        throw validation_error("unknown category id " + std::to_string(category_id));
    return prompts[static_cast<std::size_t>(category_id)];
}

void PromptTable::validate() const {
    for (std::size_t i = 0; i < prompts.size(); ++i)
        if (prompts[i].empty())
            throw validation_error("prompt for C" + std::to_string(i) + " is empty");
}

std::string build_query(const Category& category, const PromptTable& table) {
    return "How well does this image match the description: “" +
           table.prompt(category.id) +
           "”? Respond with a number between 0 and 1, where 1 means perfect match.";
}

ParsedScore parse_score(const std::string& response) {
    std::size_t start = std::string::npos;
    for (std::size_t i = 0; i < response.size(); ++i)
        if (std::isdigit(static_cast<unsigned char>(response[i]))) {
            start = i;
            break;
        }
    if (start == std::string::npos) return {false, 0.0, ParseFailure::NoNumeral};
    std::size_t end = start;
    while (end < response.size() && std::isdigit(static_cast<unsigned char>(response[end]))) ++end;
    if (end < response.size() && response[end] == '.' && end + 1 < response.size() &&
        std::isdigit(static_cast<unsigned char>(response[end + 1]))) {
        ++end;
        while (end < response.size() && std::isdigit(static_cast<unsigned char>(response[end])))
            ++end;
    }
    const double value = std::stod(response.substr(start, end - start));
    if (value < 0.0 || value > 1.0) return {false, value, ParseFailure::OutOfRange};
    return {true, value, ParseFailure::None};
}

std::string to_string(ScoreDecision decision) {
    switch (decision) {
    case ScoreDecision::Pending: return "pending";
    case ScoreDecision::Kept: return "kept";
    case ScoreDecision::Discarded: return "discarded";
    case ScoreDecision::Unparseable: return "unparseable";
    }
    throw validation_error("unknown score decision");
}

std::string to_string(ParseFailure failure) {
    switch (failure) {
    case ParseFailure::None: return "none";
    case ParseFailure::NoNumeral: return "no_numeral";
    case ParseFailure::OutOfRange: return "out_of_range";
    }
    throw validation_error("unknown parse failure");
}

namespace {

ScoreDecision decision_from_string(const std::string& s, const std::string& where) {
    if (s == "pending") return ScoreDecision::Pending;
    if (s == "kept") return ScoreDecision::Kept;
    if (s == "discarded") return ScoreDecision::Discarded;
    if (s == "unparseable") return ScoreDecision::Unparseable;
    throw validation_error(where + ": unknown decision \"" + s + "\"");
}

ParseFailure failure_from_string(const std::string& s, const std::string& where) {
    if (s == "none") return ParseFailure::None;
    if (s == "no_numeral") return ParseFailure::NoNumeral;
    if (s == "out_of_range") return ParseFailure::OutOfRange;
    throw validation_error(where + ": unknown failure \"" + s + "\"");
}

std::string base64_encode(const std::string& bytes) {
    static const char alphabet[] =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= bytes.size()) {
        const unsigned a = static_cast<unsigned char>(bytes[i]);
        const unsigned b = static_cast<unsigned char>(bytes[i + 1]);
        const unsigned c = static_cast<unsigned char>(bytes[i + 2]);
        out.push_back(alphabet[a >> 2]);
        out.push_back(alphabet[((a & 0x3) << 4) | (b >> 4)]);
        out.push_back(alphabet[((b & 0xF) << 2) | (c >> 6)]);
        out.push_back(alphabet[c & 0x3F]);
        i += 3;
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const unsigned a = static_cast<unsigned char>(bytes[i]);
        out.push_back(alphabet[a >> 2]);
        out.push_back(alphabet[(a & 0x3) << 4]);
        out.push_back('=');
        out.push_back('=');
    } else if (rest == 2) {
        const unsigned a = static_cast<unsigned char>(bytes[i]);
        const unsigned b = static_cast<unsigned char>(bytes[i + 1]);
        out.push_back(alphabet[a >> 2]);
        out.push_back(alphabet[((a & 0x3) << 4) | (b >> 4)]);
        out.push_back(alphabet[(b & 0xF) << 2]);
        out.push_back('=');
    }
    return out;
}

} // namespace

double HashScorer::value_for(const ImageBuffer& image, const std::string& query) const {
    const std::string bytes = encode_image_bytes(image);
    std::uint64_t h = hash64(bytes);
    h = hash_combine(h, hash64(query));
    h = hash_combine(h, seed_);
    return Rng(h).uniform();
}

std::string HashScorer::score(const ImageBuffer& image, const std::string& query) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", value_for(image, query));
    return buf;
}

std::string FlakyScorer::score(const ImageBuffer& image, const std::string& query) {
    calls_.fetch_add(1);
    if (remaining_.fetch_sub(1) > 0) throw external_error("injected transport failure");
    return inner_.score(image, query);
}

RemoteScorer::RemoteScorer(Options options) : timeout_s_(options.timeout_s) {
    std::string rest = options.endpoint;
    const std::string scheme = "http://";
    if (rest.rfind(scheme, 0) != 0)
        throw validation_error("scorer endpoint must start with http://: " + options.endpoint);
    rest = rest.substr(scheme.size());
    const std::size_t slash = rest.find('/');
    path_ = slash == std::string::npos ? "/score" : rest.substr(slash);
    std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
    const std::size_t colon = hostport.find(':');
    host_ = colon == std::string::npos ? hostport : hostport.substr(0, colon);
    port_ = colon == std::string::npos ? 80 : std::stoi(hostport.substr(colon + 1));
    if (host_.empty() || port_ <= 0 || port_ > 65535)
        throw validation_error("malformed scorer endpoint: " + options.endpoint);
}

std::string RemoteScorer::score(const ImageBuffer& image, const std::string& query) {
    httplib::Client client(host_, port_);
    const auto seconds = static_cast<time_t>(timeout_s_);
    const auto usec = static_cast<time_t>((timeout_s_ - static_cast<double>(seconds)) * 1e6);
    client.set_connection_timeout(seconds, usec);
    client.set_read_timeout(seconds, usec);
    client.set_write_timeout(seconds, usec);

    nlohmann::json body{{"image", base64_encode(encode_image_bytes(image))}, {"query", query}};
    httplib::Result res = client.Post(path_, body.dump(), "application/json");
    if (!res)
        throw external_error("cannot reach scorer endpoint http://" + host_ + ":" +
                             std::to_string(port_) + path_);
    if (res->status != 200)
        throw external_error("scorer endpoint returned status " + std::to_string(res->status));
    return res->body;
}

ScoreRecord score_sample(Scorer& scorer, const LabeledSample& sample, const PromptTable& table,
                         int retry_limit, const std::string& image_base_dir) {
    if (retry_limit < 0) throw validation_error("retry_limit must be >= 0");
    const Category& category = category_from_id(sample.category_id);
    ScoreRecord record;
    record.sample_id = sample.id;
    record.category_id = sample.category_id;
    record.query = build_query(category, table);

    const ImageBuffer image =
        sample.image ? *sample.image : resolve_image(sample, image_base_dir);
    for (int attempt = 0;; ++attempt) {
        try {
            record.raw_response = scorer.score(image, record.query);
            break;
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::External || attempt >= retry_limit) throw;
        }
    }

    const ParsedScore parsed = parse_score(record.raw_response);
    record.failure = parsed.failure;
    if (parsed.ok) record.s = parsed.value;
    return record;
}

void FilterConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw validation_error("tau must lie in [0, 1]");
    if (max_concurrent_requests < 1)
        throw validation_error("max_concurrent_requests must be >= 1");
    if (retry_limit < 0) throw validation_error("retry_limit must be >= 0");
}

FilterResult filter(const std::vector<LabeledSample>& samples, Scorer& scorer,
                    const FilterConfig& config, const PromptTable& table) {
    config.validate();
    table.validate();

    std::vector<ScoreRecord> records(samples.size());
    const int workers =
        std::min<int>(config.max_concurrent_requests, static_cast<int>(samples.size()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < samples.size(); ++i)
            records[i] = score_sample(scorer, samples[i], table, config.retry_limit,
                                      config.image_base_dir);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        std::mutex error_mutex;
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= samples.size()) return;
                    try {
                        records[i] = score_sample(scorer, samples[i], table, config.retry_limit,
                                                  config.image_base_dir);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(error_mutex);
                        if (!first_error) first_error = std::current_exception();
                        return;
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    FilterResult result;
    for (std::size_t i = 0; i < records.size(); ++i) {
        ScoreRecord& record = records[i];
        if (!record.s) {
            if (config.unparseable_policy == UnparseablePolicy::Error)
                throw validation_error("unparseable score for sample " + record.sample_id +
                                       " (" + to_string(record.failure) + "): \"" +
                                       record.raw_response + "\"");
            record.decision = ScoreDecision::Unparseable;
        } else if (*record.s >= config.tau) {
            record.decision = ScoreDecision::Kept;
            LabeledSample kept = samples[i];
            kept.score = *record.s;
            result.kept.push_back(std::move(kept));
        } else {
            record.decision = ScoreDecision::Discarded;
        }
    }
    result.audit = std::move(records);
    return result;
}

void write_score_audit(const std::vector<ScoreRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw external_error("cannot open audit file for writing: " + path);
    nlohmann::json header{{"format_version", 1}, {"kind", "score_audit"}};
    out << header.dump() << "\n";
    for (const ScoreRecord& r : records) {
        nlohmann::json j{{"sample_id", r.sample_id},
                         {"category_id", r.category_id},
                         {"query", r.query},
                         {"raw_response", r.raw_response},
                         {"failure", to_string(r.failure)},
                         {"decision", to_string(r.decision)}};
        j["s"] = r.s ? nlohmann::json(*r.s) : nlohmann::json(nullptr);
        out << j.dump() << "\n";
    }
    if (!out) throw external_error("failed writing audit file: " + path);
}

std::vector<ScoreRecord> read_score_audit(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw external_error("cannot open audit file: " + path);
    std::string line;
    int line_no = 0;
    auto where = [&] { return path + ":" + std::to_string(line_no); };

    if (!std::getline(in, line)) throw validation_error(path + ": missing audit header");
    ++line_no;
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw validation_error(where() + ": audit header is not a JSON object");
    const int version = header.value("format_version", -1);
    if (version != 1)
        throw validation_error(where() + ": unsupported audit format_version " +
                               std::to_string(version) + " (expected 1)");

    std::vector<ScoreRecord> records;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw validation_error(where() + ": malformed audit record");
        try {
            ScoreRecord r;
            r.sample_id = j.at("sample_id").get<std::string>();
            r.category_id = j.at("category_id").get<int>();
            r.query = j.at("query").get<std::string>();
            r.raw_response = j.at("raw_response").get<std::string>();
            r.failure = failure_from_string(j.at("failure").get<std::string>(), where());
            r.decision = decision_from_string(j.at("decision").get<std::string>(), where());
            if (!j.at("s").is_null()) r.s = j.at("s").get<double>();
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw validation_error(where() + ": " + e.what());
        }
    }
    return records;
}

} // namespace pqdaf
