#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "entaudit/audit.hpp"
#include "oracles.hpp"
#include "util.hpp"

using namespace entaudit;

namespace {

// random lowercase text over a tiny vocabulary, occasionally gluing words
// together so boundary handling actually gets exercised
std::string random_text(std::uint64_t key, std::size_t n_words,
                        const std::vector<std::string>& vocab) {
    StreamRng rng(key);
    std::string text;
    for (std::size_t i = 0; i < n_words; ++i) {
        const std::string& w = vocab[rng.next_below(vocab.size())];
        if (!text.empty()) {
            double u = rng.next_uniform();
            if (u < 0.15)
                ;  // glue directly onto the previous word
            else if (u < 0.3)
                text += ". ";
            else
                text += " ";
        }
        text += w;
    }
    return text;
}

std::vector<std::pair<int, std::size_t>> sorted_matches(const std::vector<Match>& ms) {
    std::vector<std::pair<int, std::size_t>> out;
    for (const auto& m : ms) out.emplace_back(m.pattern, m.offset);
    std::sort(out.begin(), out.end());
    return out;
}

GeneratedSample sample_of(const std::string& id, const std::string& body) {
    GeneratedSample s;
    s.id = id;
    s.body = body;
    s.setup = "full";
    return s;
}

}  // namespace

TEST_CASE("multi-pattern matcher equals the naive bounded scan") {
    const std::vector<std::string> vocab = {"al",    "alice", "alices", "bob",  "bobtown",
                                            "smith", "acme",  "corp",   "kline", "x9"};
    std::vector<std::string> patterns = {"alice", "alice smith", "bobtown", "acme corp",
                                         "kline", "al",          "x9"};
    MatchIndex index(patterns);

    for (std::uint64_t trial = 0; trial < 400; ++trial) {
        std::string text = random_text(derive_key(50, "t", trial), 3 + trial % 40, vocab);
        auto got = sorted_matches(index.find(text));
        std::vector<std::pair<int, std::size_t>> want;
        for (std::size_t p = 0; p < patterns.size(); ++p)
            for (std::size_t off : oracles::find_bounded(text, patterns[p]))
                want.emplace_back(static_cast<int>(p), off);
        std::sort(want.begin(), want.end());
        INFO("text: " << text);
        REQUIRE(got == want);
    }
}

TEST_CASE("matcher boundary semantics") {
    MatchIndex index({"bobtown", "alice", "alice smith"});
    auto names = [&](const std::string& text) {
        std::set<std::string> out;
        for (const auto& m : index.find(text)) out.insert(index.pattern(m.pattern));
        return out;
    };
    CHECK(names("bobtown is nice") == std::set<std::string>{"bobtown"});
    CHECK(names("in bobtown.") == std::set<std::string>{"bobtown"});
    CHECK(names("bobtowns mayor") == std::set<std::string>{});      // trailing word char
    CHECK(names("mybobtown") == std::set<std::string>{});           // leading word char
    CHECK(names("(bobtown)") == std::set<std::string>{"bobtown"});
    // a pattern that is a prefix of another: both reported on the long form
    CHECK(names("alice smith arrived") == std::set<std::string>{"alice", "alice smith"});
    CHECK(names("alice9 smith") == std::set<std::string>{});
    CHECK(index.find("").empty());
    CHECK_THROWS(MatchIndex({}));
    CHECK_THROWS(MatchIndex({"ok", ""}));
}

TEST_CASE("matching is case-blind through canonicalization") {
    MatchIndex index({"alice smith"});
    // scan() canonicalizes bodies the same way gazetteer surfaces were
    std::vector<GeneratedSample> samples = {sample_of("s1", "Met ALICE   Smith yesterday")};
    EntitySets sets;
    sets.all.push_back({"alice smith", "PERSON", 1, false});
    ScanResult result = scan(index, sets, SetKind::all, samples);
    REQUIRE(result.matched_surfaces == std::set<std::string>{"alice smith"});
    REQUIRE(result.occurrences == 1);
    REQUIRE(result.log.size() == 1);
    CHECK(result.log[0].sample_id == "s1");
    CHECK(result.log[0].type == "PERSON");
}

TEST_CASE("gazetteer loading counts k on the train split and flags pretraining overlap") {
    testutil::TempDir dir;
    // fine-tuning corpus: zorg blint twice in train, once in test; acme corp once
    Corpus fine;
    fine.documents.push_back({"d0", "zorg blint wrote to acme corp", std::nullopt});
    fine.documents.push_back({"d1", "a memo from Zorg Blint, again", std::nullopt});
    fine.documents.push_back({"d2", "zorg blint stayed home", std::nullopt});
    fine.documents.push_back({"d3", "nothing here", std::nullopt});
    fine.split = {{"d0", Split::train},
                  {"d1", Split::train},
                  {"d2", Split::test},
                  {"d3", Split::train}};
    Corpus pre;
    pre.documents.push_back({"p0", "acme corp files a report", std::nullopt});
    pre.split = {{"p0", Split::train}};

    std::string path = (dir.path / "gazetteer.tsv").string();
    testutil::write_file(path,
                         "Zorg Blint\tPERSON\n"
                         "acme corp\tORG\n"
                         "zorg blint\tPERSON\n"   // duplicate after canonicalization
                         "ab\tPERSON\n"           // too short, dropped
                         "ghost name\tPERSON\n");  // never occurs, dropped

    EntitySets sets = load_gazetteer(path, fine, pre);
    REQUIRE(sets.all.size() == 2);
    std::map<std::string, EntityRecord> by_surface;
    for (const auto& r : sets.all) by_surface[r.surface] = r;
    REQUIRE(by_surface.count("zorg blint") == 1);
    CHECK(by_surface["zorg blint"].k == 2);  // d2 is test, not counted
    CHECK(by_surface["zorg blint"].type == "PERSON");
    CHECK(by_surface["zorg blint"].in_pretraining == false);
    CHECK(by_surface["acme corp"].k == 1);
    CHECK(by_surface["acme corp"].in_pretraining == true);

    // set algebra on top of the records
    auto all = sets.select(SetKind::all);
    auto priv = sets.select(SetKind::private_set);
    auto p1e = sets.select(SetKind::private_1eidetic);
    REQUIRE(all.size() == 2);
    REQUIRE(priv.size() == 1);
    CHECK(priv[0]->surface == "zorg blint");
    REQUIRE(p1e.empty());  // zorg blint has k=2

    SECTION("format errors") {
        std::string bad1 = (dir.path / "bad1.tsv").string();
        testutil::write_file(bad1, "no tab here\n");
        CHECK_THROWS_WITH(load_gazetteer(bad1, fine, pre),
                          Catch::Matchers::ContainsSubstring("no tab separator"));
        std::string bad2 = (dir.path / "bad2.tsv").string();
        testutil::write_file(bad2, "thing\tNOT_A_TYPE\n");
        CHECK_THROWS_WITH(load_gazetteer(bad2, fine, pre),
                          Catch::Matchers::ContainsSubstring("unknown entity type"));
        std::string bad3 = (dir.path / "bad3.tsv").string();
        testutil::write_file(bad3, "acme corp\tORG\nAcme Corp\tPERSON\n");
        CHECK_THROWS_WITH(load_gazetteer(bad3, fine, pre),
                          Catch::Matchers::ContainsSubstring("conflicting types"));
    }

    SECTION("JSONL rows load the same way") {
        std::string jpath = (dir.path / "gazetteer.jsonl").string();
        testutil::write_file(jpath,
                             "{\"surface\": \"Zorg Blint\", \"type\": \"PERSON\"}\n"
                             "{\"surface\": \"acme corp\", \"type\": \"ORG\"}\n");
        EntitySets jsets = load_gazetteer(jpath, fine, pre);
        REQUIRE(jsets.all.size() == 2);
        CHECK(jsets.all[0].surface == "acme corp");
        CHECK(jsets.all[1].surface == "zorg blint");
    }
}

TEST_CASE("set selection equals a naive reconstruction on random records") {
    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        StreamRng rng(derive_key(60, "sets", trial));
        EntitySets sets;
        std::size_t n = 1 + rng.next_below(50);
        for (std::size_t i = 0; i < n; ++i) {
            EntityRecord r;
            r.surface = "surf" + std::to_string(trial) + "_" + std::to_string(i);
            r.type = "PERSON";
            r.k = 1 + static_cast<long>(rng.next_below(5));
            r.in_pretraining = rng.next_uniform() < 0.4;
            sets.all.push_back(r);
        }
        std::set<std::string> want_all, want_priv, want_p1e;
        for (const auto& r : sets.all) {
            want_all.insert(r.surface);
            if (!r.in_pretraining) {
                want_priv.insert(r.surface);
                if (r.k == 1) want_p1e.insert(r.surface);
            }
        }
        auto names_of = [](const std::vector<const EntityRecord*>& records) {
            std::set<std::string> out;
            for (const auto* r : records) out.insert(r->surface);
            return out;
        };
        REQUIRE(names_of(sets.select(SetKind::all)) == want_all);
        REQUIRE(names_of(sets.select(SetKind::private_set)) == want_priv);
        REQUIRE(names_of(sets.select(SetKind::private_1eidetic)) == want_p1e);
    }
}

TEST_CASE("scanning is worker-invariant and monotone in the sample set") {
    std::vector<std::string> patterns = {"zorg blint", "acme corp", "kline"};
    EntitySets sets;
    sets.all.push_back({"acme corp", "ORG", 2, false});
    sets.all.push_back({"kline", "PERSON", 1, false});
    sets.all.push_back({"zorg blint", "PERSON", 1, false});
    MatchIndex index = build_index(sets, SetKind::all);

    std::vector<GeneratedSample> samples;
    samples.push_back(sample_of("a", "zorg blint visited acme corp"));
    samples.push_back(sample_of("b", "nothing of note"));
    samples.push_back(sample_of("c", "kline and zorg blint and kline"));

    ScanResult one = scan(index, sets, SetKind::all, samples, 1);
    ScanResult four = scan(index, sets, SetKind::all, samples, 4);
    REQUIRE(one.occurrences == four.occurrences);
    REQUIRE(one.matched_surfaces == four.matched_surfaces);
    REQUIRE(one.log.size() == four.log.size());
    for (std::size_t i = 0; i < one.log.size(); ++i) {
        CHECK(one.log[i].sample_id == four.log[i].sample_id);
        CHECK(one.log[i].surface == four.log[i].surface);
        CHECK(one.log[i].offset == four.log[i].offset);
    }
    CHECK(one.occurrences == 5);
    CHECK(one.matched_surfaces.size() == 3);

    ScanResult fewer = scan(index, sets, SetKind::all, {samples[0]});
    CHECK(fewer.matched_surfaces.size() <= one.matched_surfaces.size());
    for (const auto& s : fewer.matched_surfaces) CHECK(one.matched_surfaces.count(s) == 1);

    // index built for one selection cannot scan another
    EntitySets with_pre = sets;
    with_pre.all[0].in_pretraining = true;
    CHECK_THROWS_WITH(scan(index, with_pre, SetKind::private_set, samples),
                      Catch::Matchers::ContainsSubstring("does not match"));

    testutil::TempDir dir;
    std::string log_path = (dir.path / "matches.jsonl").string();
    save_match_log(one, log_path);
    std::string content = testutil::read_file(log_path);
    CHECK(std::count(content.begin(), content.end(), '\n') == 5);
}

TEST_CASE("extraction rates aggregate per type with an exact TOTAL row") {
    EntitySets sets;
    sets.all.push_back({"alice smith", "PERSON", 1, false});
    sets.all.push_back({"bob jones", "PERSON", 2, false});
    sets.all.push_back({"carol wong", "PERSON", 1, true});
    sets.all.push_back({"acme corp", "ORG", 3, false});
    sets.all.push_back({"bobtown", "GPE", 1, false});

    std::map<SetKind, ScanResult> scans;
    scans[SetKind::all].matched_surfaces = {"alice smith", "acme corp"};
    scans[SetKind::private_set].matched_surfaces = {"alice smith", "acme corp"};
    scans[SetKind::private_1eidetic].matched_surfaces = {"alice smith"};

    AuditReport report = extraction_rates(sets, scans, "full", "naive", 100);
    REQUIRE(report.setup == "full");
    REQUIRE(report.n_samples == 100);

    auto& all_cells = report.cells.at("all");
    CHECK(all_cells.at("PERSON").extracted == 1);
    CHECK(all_cells.at("PERSON").size == 3);
    CHECK(all_cells.at("ORG").extracted == 1);
    CHECK(all_cells.at("ORG").size == 1);
    CHECK(all_cells.at("GPE").size == 1);
    CHECK(all_cells.at("TOTAL").extracted == 2);
    CHECK(all_cells.at("TOTAL").size == 5);

    auto& priv = report.cells.at("private");
    CHECK(priv.at("TOTAL").size == 4);  // carol wong is public
    CHECK(priv.at("TOTAL").extracted == 2);

    auto& p1e = report.cells.at("private_1eidetic");
    CHECK(p1e.at("TOTAL").size == 2);  // alice smith and bobtown
    CHECK(p1e.at("TOTAL").extracted == 1);

    // display percentages round to 0.1 and derive exactly from the counts
    RateCell third{1, 3};
    CHECK(third.pct() == 33.3);
    RateCell two_thirds{2, 3};
    CHECK(two_thirds.pct() == 66.7);
    CHECK(RateCell{0, 0}.pct() == 0.0);

    nlohmann::json j = report_to_json(report);
    AuditReport back = report_from_json(j);
    REQUIRE(back.cells.size() == report.cells.size());
    for (const auto& [set_name, by_type] : report.cells)
        for (const auto& [type, cell] : by_type) {
            CHECK(back.cells.at(set_name).at(type).extracted == cell.extracted);
            CHECK(back.cells.at(set_name).at(type).size == cell.size);
        }
}
