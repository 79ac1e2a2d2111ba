#pragma once

#include "pqdaf/error.hpp"
#include "pqdaf/image.hpp"
#include "pqdaf/sample.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pqdaf {

// Category-indexed prompt texts used to query the vision-language scorer.
struct PromptTable {
    std::array<std::string, kNumCategories> prompts;

    static const PromptTable& standard();
    const std::string& prompt(int category_id) const;
    void validate() const;
};

// The numeric-score query sent to the scorer, with the category prompt
// substituted between typographic quotes.
std::string build_query(const Category& category, const PromptTable& table);

enum class ParseFailure { None, NoNumeral, OutOfRange };

struct ParsedScore {
    bool ok = false;
    double value = 0.0;
    ParseFailure failure = ParseFailure::None;
};

// Extracts the first decimal numeral (digits, optionally followed by a dot
// and more digits) from free text; succeeds iff one exists and lies in [0,1].
ParsedScore parse_score(const std::string& response);

enum class ScoreDecision { Pending, Kept, Discarded, Unparseable };

std::string to_string(ScoreDecision decision);
std::string to_string(ParseFailure failure);

// Full forensic record of one scoring call.
struct ScoreRecord {
    std::string sample_id;
    int category_id = 0;
    std::string query;
    std::string raw_response;
    std::optional<double> s;
    ParseFailure failure = ParseFailure::None;
    ScoreDecision decision = ScoreDecision::Pending;
};

enum class UnparseablePolicy { Discard, Error };

struct FilterConfig {
    double tau = 0.8;
    UnparseablePolicy unparseable_policy = UnparseablePolicy::Discard;
    int max_concurrent_requests = 1;
    int retry_limit = 0;
    std::string image_base_dir;

    void validate() const;
};

// Scores one (image, query) pair, returning the raw response text. Throws
// an External error on transport failure. Implementations must tolerate
// concurrent calls.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::string score(const ImageBuffer& image, const std::string& query) = 0;
};

// Always answers with the same text.
class ConstScorer : public Scorer {
public:
    explicit ConstScorer(std::string response) : response_(std::move(response)) {}
    std::string score(const ImageBuffer&, const std::string&) override { return response_; }

private:
    std::string response_;
};

// Pure deterministic mock: the score is a uniform value in [0, 1] derived
// from a hash of the image bytes, the query, and the seed.
class HashScorer : public Scorer {
public:
    explicit HashScorer(std::uint64_t seed = 0) : seed_(seed) {}
    std::string score(const ImageBuffer& image, const std::string& query) override;
    double value_for(const ImageBuffer& image, const std::string& query) const;

private:
    std::uint64_t seed_;
};

// Fails the first `failures` calls with a transport error, then delegates.
class FlakyScorer : public Scorer {
public:
    FlakyScorer(Scorer& inner, int failures) : inner_(inner), remaining_(failures) {}
    std::string score(const ImageBuffer& image, const std::string& query) override;
    int calls() const { return calls_.load(); }

private:
    Scorer& inner_;
    std::atomic<int> remaining_;
    std::atomic<int> calls_{0};
};

// HTTP client for a remote scorer: POSTs {image (base64), query} as JSON and
// returns the response body verbatim. A fresh connection per call keeps the
// client safe for concurrent use.
class RemoteScorer : public Scorer {
public:
    struct Options {
        std::string endpoint; // e.g. http://127.0.0.1:8808/score
        double timeout_s = 10.0;
    };

    explicit RemoteScorer(Options options);
    std::string score(const ImageBuffer& image, const std::string& query) override;

private:
    std::string host_;
    int port_ = 80;
    std::string path_;
    double timeout_s_;
};

// Scores one sample: builds the query, calls the scorer (with retries on
// transport errors), and parses the response. The decision is left Pending.
ScoreRecord score_sample(Scorer& scorer, const LabeledSample& sample, const PromptTable& table,
                         int retry_limit = 0, const std::string& image_base_dir = {});

struct FilterResult {
    std::vector<LabeledSample> kept;
    std::vector<ScoreRecord> audit;
};

// Threshold filtering: keeps exactly the samples whose parsed score is
// >= tau, in input order, each annotated with its score. The audit list has
// one record per input, also in input order, regardless of concurrency.
FilterResult filter(const std::vector<LabeledSample>& samples, Scorer& scorer,
                    const FilterConfig& config, const PromptTable& table = PromptTable::standard());

void write_score_audit(const std::vector<ScoreRecord>& records, const std::string& path);
std::vector<ScoreRecord> read_score_audit(const std::string& path);

} // namespace pqdaf
