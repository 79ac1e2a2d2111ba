#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pqdaf/error.hpp"
#include "pqdaf/filter.hpp"
#include "pqdaf/rng.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

using namespace pqdaf;

namespace {

std::string temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "pqdaf_test";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

ImageBuffer small_image(std::uint64_t seed) {
    ImageBuffer img(4, 4, 3, PixelRange::Byte);
    Rng rng(seed);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform_int(256));
    return img;
}

LabeledSample mem_sample(const std::string& id, int category_id, std::uint64_t seed) {
    LabeledSample s;
    s.id = id;
    s.path = id + ".ppm";
    s.category_id = category_id;
    s.provenance = Provenance::Synthetic;
    s.image = small_image(seed);
    return s;
}

// independent first-numeral reference built on std::regex
ParsedScore regex_reference(const std::string& text) {
    static const std::regex numeral("[0-9]+(\\.[0-9]+)?");
    std::smatch m;
    if (!std::regex_search(text, m, numeral)) return {false, 0.0, ParseFailure::NoNumeral};
    const double v = std::stod(m.str());
    if (v < 0.0 || v > 1.0) return {false, v, ParseFailure::OutOfRange};
    return {true, v, ParseFailure::None};
}

class ValidationThrowingScorer : public Scorer {
public:
    std::string score(const ImageBuffer&, const std::string&) override {
        throw validation_error("scorer rejected the request shape");
    }
};

} // namespace

TEST_CASE("the prompt table carries the ten category descriptions verbatim") {
    const PromptTable& t = PromptTable::standard();
    const std::vector<std::string> want = {
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
    };
    REQUIRE(want.size() == static_cast<std::size_t>(kNumCategories));
    for (int c = 0; c < kNumCategories; ++c)
        CHECK(t.prompt(c) == want[static_cast<std::size_t>(c)]);
    CHECK_THROWS_AS(t.prompt(-1), Error);
    CHECK_THROWS_AS(t.prompt(10), Error);
    CHECK_NOTHROW(t.validate());
}

TEST_CASE("queries wrap the prompt in the fixed template") {
    const PromptTable& t = PromptTable::standard();
    const std::string q0 = build_query(category_from_id(0), t);
    CHECK(q0 ==
          "How well does this image match the description: "
          "“The driver is driving normally with both hands on the steering wheel.”? "
          "Respond with a number between 0 and 1, where 1 means perfect match.");
    const std::string q1 = build_query(category_from_id(1), t);
    CHECK(q1.find("The driver is texting with the right hand while driving.") !=
          std::string::npos);
    for (int c = 0; c < kNumCategories; ++c) {
        const std::string q = build_query(category_from_id(c), t);
        CHECK(q.rfind("where 1 means perfect match.") == q.size() - 28);
        CHECK(q.rfind("How well does this image match the description: ", 0) == 0);
        CHECK(q.find("“") != std::string::npos);
        CHECK(q.find("”?") != std::string::npos);
    }
}

TEST_CASE("score parsing takes the first in-range decimal numeral") {
    SUBCASE("plain and embedded numerals") {
        CHECK(parse_score("0.85").value == 0.85);
        CHECK(parse_score("0.85").ok);
        CHECK(parse_score("The image matches the description with score 0.7.").value == 0.7);
        CHECK(parse_score("1").value == 1.0);
        CHECK(parse_score("1.").value == 1.0);
        CHECK(parse_score("score 0.8.5 overall").value == 0.8);
        CHECK(parse_score("00.5").value == 0.5);
        CHECK(parse_score("0.79999").value < 0.8);
        CHECK(parse_score("0.80").value == 0.8);
    }

    SUBCASE("failures carry distinct reasons") {
        ParsedScore none = parse_score("yes, perfect match");
        CHECK_FALSE(none.ok);
        CHECK(none.failure == ParseFailure::NoNumeral);

        ParsedScore range = parse_score("rating: 7/10");
        CHECK_FALSE(range.ok);
        CHECK(range.failure == ParseFailure::OutOfRange);
        CHECK(range.value == 7.0);

        CHECK(parse_score("42%").failure == ParseFailure::OutOfRange);
        CHECK(parse_score("").failure == ParseFailure::NoNumeral);
        // the numeral itself is unsigned; a leading minus is prose
        CHECK(parse_score("-0.5").value == 0.5);
    }

    SUBCASE("agreement with a regex reference on mixed prose") {
        const std::vector<std::string> corpus = {
            "Perfect. 1.0 out of 1.0",
            "I'd say around 0.65, maybe 0.7",
            "no number here",
            "the score is .9",
            "3 people, score 0.2",
            "weighted 0.333333 by the rubric",
            "answer=0.0",
            "almost: 0.999",
            "2.5 is my rating",
            "half credit so 0.5.",
        };
        for (const std::string& text : corpus) {
            ParsedScore a = parse_score(text);
            ParsedScore b = regex_reference(text);
            CHECK(a.ok == b.ok);
            CHECK(a.failure == b.failure);
            if (a.ok) CHECK(a.value == b.value);
        }
    }
}

TEST_CASE("score_sample records the full exchange") {
    ConstScorer one("1.0");
    LabeledSample s = mem_sample("gen_0001", 2, 50);
    ScoreRecord r = score_sample(one, s, PromptTable::standard());
    CHECK(r.sample_id == "gen_0001");
    CHECK(r.category_id == 2);
    CHECK(r.raw_response == "1.0");
    REQUIRE(r.s.has_value());
    CHECK(*r.s == 1.0);
    CHECK(r.decision == ScoreDecision::Pending);
    CHECK(r.query.find("holding a phone to the right ear") != std::string::npos);

    ConstScorer prose("match: 0.42 overall");
    ScoreRecord r2 = score_sample(prose, s, PromptTable::standard());
    CHECK(*r2.s == 0.42);

    ConstScorer silent("no idea");
    ScoreRecord r3 = score_sample(silent, s, PromptTable::standard());
    CHECK_FALSE(r3.s.has_value());
    CHECK(r3.failure == ParseFailure::NoNumeral);
}

TEST_CASE("score_sample loads images from disk when not in memory") {
    ImageBuffer img = small_image(60);
    const std::string dir = temp_path("");
    write_image(img, dir + "/disk_sample.ppm");
    LabeledSample s;
    s.id = "disk_sample";
    s.path = "disk_sample.ppm";
    s.category_id = 0;
    s.provenance = Provenance::Synthetic;

    HashScorer scorer(1);
    ScoreRecord r = score_sample(scorer, s, PromptTable::standard(), 0, dir);
    REQUIRE(r.s.has_value());
    // the response must match scoring the same pixels directly
    LabeledSample with_mem = s;
    with_mem.image = img;
    ScoreRecord r2 = score_sample(scorer, with_mem, PromptTable::standard());
    CHECK(r.raw_response == r2.raw_response);
}

TEST_CASE("transport failures are retried up to the limit") {
    ConstScorer inner("0.9");
    LabeledSample s = mem_sample("retry_me", 1, 70);

    SUBCASE("no retries surfaces the failure") {
        FlakyScorer flaky(inner, 1);
        try {
            score_sample(flaky, s, PromptTable::standard(), 0);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::External);
        }
    }

    SUBCASE("one retry rides through one failure") {
        FlakyScorer flaky(inner, 1);
        ScoreRecord r = score_sample(flaky, s, PromptTable::standard(), 1);
        CHECK(*r.s == 0.9);
        CHECK(flaky.calls() == 2);
    }

    SUBCASE("two failures exhaust a single retry") {
        FlakyScorer flaky(inner, 2);
        CHECK_THROWS_AS(score_sample(flaky, s, PromptTable::standard(), 1), Error);
    }

    SUBCASE("non-transport errors are not retried") {
        ValidationThrowingScorer bad;
        try {
            score_sample(bad, s, PromptTable::standard(), 5);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Validation);
        }
    }
}

TEST_CASE("filtering keeps exactly the samples at or above the threshold") {
    FilterConfig cfg;

    SUBCASE("empty input") {
        ConstScorer one("1.0");
        FilterResult r = filter({}, one, cfg);
        CHECK(r.kept.empty());
        CHECK(r.audit.empty());
    }

    SUBCASE("the threshold is inclusive") {
        ConstScorer at("0.8");
        FilterResult kept = filter({mem_sample("a", 0, 1)}, at, cfg);
        REQUIRE(kept.kept.size() == 1);
        CHECK(*kept.kept[0].score == 0.8);
        CHECK(kept.audit[0].decision == ScoreDecision::Kept);

        ConstScorer below("0.79999");
        FilterResult dropped = filter({mem_sample("a", 0, 1)}, below, cfg);
        CHECK(dropped.kept.empty());
        CHECK(dropped.audit[0].decision == ScoreDecision::Discarded);
    }

    SUBCASE("a thousand hash-scored samples match the brute-force scan") {
        std::vector<LabeledSample> samples;
        for (int i = 0; i < 1000; ++i)
            samples.push_back(mem_sample("gen_" + std::to_string(i), i % kNumCategories,
                                         static_cast<std::uint64_t>(1000 + i)));
        HashScorer scorer(9);
        const auto t0 = std::chrono::steady_clock::now();
        FilterResult r = filter(samples, scorer, cfg);
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        CHECK(elapsed < 5.0);

        // brute force: rescore each sample through the same pure scorer and
        // apply the keep rule by hand, preserving input order
        std::vector<std::string> want_ids;
        std::vector<double> want_scores;
        const PromptTable& table = PromptTable::standard();
        for (const LabeledSample& s : samples) {
            const std::string response =
                scorer.score(*s.image, build_query(category_from_id(s.category_id), table));
            const ParsedScore p = parse_score(response);
            REQUIRE(p.ok);
            if (p.value >= 0.8) {
                want_ids.push_back(s.id);
                want_scores.push_back(p.value);
            }
        }
        REQUIRE(r.kept.size() == want_ids.size());
        CHECK(want_ids.size() > 100);  // sanity: the hash really is spread out
        CHECK(want_ids.size() < 300);
        for (std::size_t i = 0; i < want_ids.size(); ++i) {
            CHECK(r.kept[i].id == want_ids[i]);
            CHECK(*r.kept[i].score == want_scores[i]);
        }

        // audit is one record per input, in input order, non-score fields intact
        REQUIRE(r.audit.size() == samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
            CHECK(r.audit[i].sample_id == samples[i].id);
            CHECK(r.audit[i].category_id == samples[i].category_id);
        }
        for (const LabeledSample& k : r.kept) {
            const auto it = std::find_if(samples.begin(), samples.end(),
                                         [&](const LabeledSample& s) { return s.id == k.id; });
            REQUIRE(it != samples.end());
            CHECK(k.path == it->path);
            CHECK(k.category_id == it->category_id);
            CHECK(k.provenance == it->provenance);
        }
    }

    SUBCASE("permuting the input permutes the audit but not the kept id-set") {
        std::vector<LabeledSample> samples;
        for (int i = 0; i < 60; ++i)
            samples.push_back(mem_sample("p_" + std::to_string(i), i % kNumCategories,
                                         static_cast<std::uint64_t>(40 + i)));
        HashScorer scorer(3);
        FilterResult a = filter(samples, scorer, cfg);
        Rng rng(8);
        std::vector<LabeledSample> shuffled = samples;
        rng.shuffle(shuffled);
        FilterResult b = filter(shuffled, scorer, cfg);
        std::set<std::string> ids_a, ids_b;
        for (const auto& s : a.kept) ids_a.insert(s.id);
        for (const auto& s : b.kept) ids_b.insert(s.id);
        CHECK(ids_a == ids_b);
        for (std::size_t i = 0; i < shuffled.size(); ++i)
            CHECK(b.audit[i].sample_id == shuffled[i].id);
    }

    SUBCASE("raising tau never grows the kept set") {
        std::vector<LabeledSample> samples;
        for (int i = 0; i < 80; ++i)
            samples.push_back(mem_sample("m_" + std::to_string(i), i % kNumCategories,
                                         static_cast<std::uint64_t>(900 + i)));
        HashScorer scorer(5);
        std::set<std::string> prev;
        bool first = true;
        for (double tau : {0.0, 0.3, 0.8, 1.0}) {
            FilterConfig c;
            c.tau = tau;
            FilterResult r = filter(samples, scorer, c);
            std::set<std::string> ids;
            for (const auto& s : r.kept) ids.insert(s.id);
            if (tau == 0.0) CHECK(ids.size() == samples.size());
            if (tau == 1.0) CHECK(ids.empty()); // hash scores never print 1.000000
            if (!first)
                for (const auto& id : ids) CHECK(prev.count(id) == 1);
            prev = ids;
            first = false;
        }
        ConstScorer perfect("1.0");
        FilterConfig c;
        c.tau = 1.0;
        FilterResult r = filter({samples[0]}, perfect, c);
        CHECK(r.kept.size() == 1);
    }

    SUBCASE("unparseable responses follow the policy") {
        ConstScorer silent("hard to say");
        std::vector<LabeledSample> samples{mem_sample("u1", 0, 1), mem_sample("u2", 1, 2)};
        FilterResult r = filter(samples, silent, cfg);
        CHECK(r.kept.empty());
        CHECK(r.audit[0].decision == ScoreDecision::Unparseable);
        CHECK(r.audit[1].decision == ScoreDecision::Unparseable);

        FilterConfig strict = cfg;
        strict.unparseable_policy = UnparseablePolicy::Error;
        try {
            filter(samples, silent, strict);
            FAIL("expected an error");
        } catch (const Error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("u1") != std::string::npos);
            CHECK(msg.find("hard to say") != std::string::npos);
        }
    }

    SUBCASE("config validation") {
        ConstScorer one("1.0");
        FilterConfig bad = cfg;
        bad.tau = 1.5;
        CHECK_THROWS_AS(filter({}, one, bad), Error);
        bad = cfg;
        bad.max_concurrent_requests = 0;
        CHECK_THROWS_AS(filter({}, one, bad), Error);
        bad = cfg;
        bad.retry_limit = -1;
        CHECK_THROWS_AS(filter({}, one, bad), Error);
    }
}

TEST_CASE("concurrent filtering reproduces the sequential run") {
    std::vector<LabeledSample> samples;
    for (int i = 0; i < 200; ++i)
        samples.push_back(mem_sample("c_" + std::to_string(i), i % kNumCategories,
                                     static_cast<std::uint64_t>(7000 + i)));
    HashScorer scorer(11);
    FilterConfig seq;
    FilterConfig par;
    par.max_concurrent_requests = 8;

    FilterResult a = filter(samples, scorer, seq);
    FilterResult b = filter(samples, scorer, par);
    REQUIRE(a.kept.size() == b.kept.size());
    for (std::size_t i = 0; i < a.kept.size(); ++i) {
        CHECK(a.kept[i].id == b.kept[i].id);
        CHECK(*a.kept[i].score == *b.kept[i].score);
    }
    REQUIRE(a.audit.size() == b.audit.size());
    for (std::size_t i = 0; i < a.audit.size(); ++i) {
        CHECK(a.audit[i].sample_id == b.audit[i].sample_id);
        CHECK(a.audit[i].raw_response == b.audit[i].raw_response);
        CHECK(a.audit[i].decision == b.audit[i].decision);
    }

    // a worker failure must surface, not hang
    ConstScorer inner("0.9");
    FlakyScorer flaky(inner, 3);
    try {
        filter(samples, flaky, par);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::External);
    }
}

TEST_CASE("audit files round-trip every record field") {
    ConstScorer mixed("0.93");
    ConstScorer silent("unsure");
    std::vector<ScoreRecord> records;
    records.push_back(score_sample(mixed, mem_sample("rt1", 0, 1), PromptTable::standard()));
    records.back().decision = ScoreDecision::Kept;
    records.push_back(score_sample(silent, mem_sample("rt2", 5, 2), PromptTable::standard()));
    records.back().decision = ScoreDecision::Unparseable;
    ScoreRecord range;
    range.sample_id = "rt3";
    range.category_id = 9;
    range.query = "q";
    range.raw_response = "9000";
    range.failure = ParseFailure::OutOfRange;
    range.decision = ScoreDecision::Unparseable;
    records.push_back(range);

    const std::string path = temp_path("audit.jsonl");
    write_score_audit(records, path);
    std::vector<ScoreRecord> back = read_score_audit(path);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(back[i].sample_id == records[i].sample_id);
        CHECK(back[i].category_id == records[i].category_id);
        CHECK(back[i].query == records[i].query);
        CHECK(back[i].raw_response == records[i].raw_response);
        CHECK(back[i].s.has_value() == records[i].s.has_value());
        if (back[i].s) CHECK(*back[i].s == *records[i].s);
        CHECK(back[i].failure == records[i].failure);
        CHECK(back[i].decision == records[i].decision);
    }

    SUBCASE("version and record errors cite the line") {
        const std::string bad = temp_path("audit_bad.jsonl");
        {
            std::ofstream out(bad);
            out << "{\"format_version\": 3, \"kind\": \"score_audit\"}\n";
        }
        try {
            read_score_audit(bad);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("format_version 3") != std::string::npos);
        }
        {
            std::ofstream out(bad);
            out << "{\"format_version\": 1, \"kind\": \"score_audit\"}\n";
            out << "{\"sample_id\": \"x\"}\n";
        }
        try {
            read_score_audit(bad);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }
}

TEST_CASE("the remote scorer speaks the HTTP protocol") {
    httplib::Server server;
    std::string seen_query;
    std::string seen_image;
    server.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        seen_query = body.at("query").get<std::string>();
        seen_image = body.at("image").get<std::string>();
        res.set_content("certainly: 0.91", "text/plain");
    });
    server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("boom", "text/plain");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread serve([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    RemoteScorer::Options opt;
    opt.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/score";
    opt.timeout_s = 5.0;
    RemoteScorer remote(opt);
    LabeledSample s = mem_sample("remote1", 3, 90);
    ScoreRecord r = score_sample(remote, s, PromptTable::standard());
    REQUIRE(r.s.has_value());
    CHECK(*r.s == 0.91);
    CHECK(seen_query == r.query);
    CHECK_FALSE(seen_image.empty());
    for (char c : seen_image) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/' ||
                        c == '=';
        CHECK(ok);
    }

    RemoteScorer::Options broken_opt = opt;
    broken_opt.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
    RemoteScorer broken(broken_opt);
    try {
        broken.score(*s.image, "q");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::External);
        CHECK(std::string(e.what()).find("500") != std::string::npos);
    }

    server.stop();
    serve.join();

    RemoteScorer::Options dead_opt = opt;
    dead_opt.endpoint = "http://127.0.0.1:1/score";
    dead_opt.timeout_s = 0.5;
    RemoteScorer dead(dead_opt);
    try {
        dead.score(*s.image, "q");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::External);
    }

    CHECK_THROWS_AS(RemoteScorer({.endpoint = "ftp://x/score"}), Error);
    CHECK_THROWS_AS(RemoteScorer({.endpoint = "http://:80/"}), Error);
}
