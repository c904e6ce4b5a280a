#include "doctest.h"

#include <sstream>
#include <string>
#include <vector>

#include "restkit/region_tagger.hpp"
#include "test_support.hpp"

using namespace restkit;

namespace {

// "F7 T1 O4" -> 7 Format tags, 1 Thought, 4 Other
std::vector<RegionTag> run_length(const std::string& spec) {
    std::vector<RegionTag> out;
    std::istringstream ss(spec);
    std::string item;
    while (ss >> item) {
        RegionTag tag{};
        switch (item[0]) {
            case 'F': tag = RegionTag::Format; break;
            case 'N': tag = RegionTag::ToolName; break;
            case 'P': tag = RegionTag::Parameter; break;
            case 'T': tag = RegionTag::Thought; break;
            case 'O': tag = RegionTag::Other; break;
            default: REQUIRE(false);
        }
        const int count = std::stoi(item.substr(1));
        for (int i = 0; i < count; ++i) out.push_back(tag);
    }
    return out;
}

void check_tags(const std::string& raw, const std::string& expected_spec) {
    const ResponseTemplate tmpl;
    const std::vector<RegionTag> expected = run_length(expected_spec);
    const TaggedResponse tagged = tag_regions(raw, tmpl);
    REQUIRE(tagged.tags.size() == raw.size());
    REQUIRE(expected.size() == raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        INFO("char index ", i, " = '", raw[i], "'");
        CHECK(tagged.tags[i] == expected[i]);
    }
}

std::string random_garbage(Rng& rng) {
    static const char* pieces[] = {"<think>", "</think>", "<tool_call>", "</tool_call>",
                                   "{\"name\":\"f\"", "abc", "\"", "}", "{", ":", "1", " ", "\n"};
    std::string out;
    const int n = static_cast<int>(uniform01(rng) * 12);
    for (int i = 0; i < n; ++i) out += pieces[rng() % (sizeof(pieces) / sizeof(pieces[0]))];
    return out;
}

}  // namespace

TEST_SUITE("region_tagger") {

TEST_CASE("tokenize basics and round trip") {
    CHECK(tokenize("ab").tokens.size() == 2);
    CHECK(tokenize("").tokens.empty());
    const auto tok = tokenize("xy");
    CHECK(tok.char_map[0] == std::pair<std::size_t, std::size_t>{0, 1});
    CHECK(tok.char_map[1] == std::pair<std::size_t, std::size_t>{1, 2});

    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::string s;
        const int n = static_cast<int>(uniform01(rng) * 64);
        for (int i = 0; i < n; ++i) s.push_back(static_cast<char>(rng() % 256));
        CHECK(detokenize(tokenize(s).tokens) == s);
    }
}

// The five fixtures below were annotated by hand, character by character,
// before the tagger was written.

TEST_CASE("fixture A: canonical think + one call") {
    check_tags(R"(<think>x</think><tool_call>{"name":"f","arguments":{"a":1}}</tool_call>)",
               "F7 T1 F21 O4 F3 N1 F3 O9 F4 P1 F2 P1 F14");
}

TEST_CASE("fixture B: plain text is all Other") {
    check_tags("hello world", "O11");
}

TEST_CASE("fixture C: two calls, two blocks") {
    check_tags(
        "<think>plan A</think> <tool_call>{\"name\":\"get\",\"arguments\":{\"x\":1,\"y\":\"u\"}}"
        "</tool_call><tool_call>{\"name\":\"put\",\"arguments\":{}}</tool_call>",
        "F7 T6 F8 O1 F13 O4 F3 N3 F3 O9 F4 P1 F2 P1 F2 P1 F3 P1 F28 O4 F3 N3 F3 O9 F17");
}

TEST_CASE("fixture D: unparseable body degrades to Other") {
    check_tags("<think>t</think><tool_call>{\"name\": broken</tool_call>", "F7 T1 F19 O15 F12");
}

TEST_CASE("fixture E: unmatched opens tag only the delimiter") {
    check_tags("a<think>b <tool_call>c", "O1 F7 O2 F11 O1");
}

TEST_CASE("stray close delimiter is Format") {
    check_tags("x</think>y", "O1 F8 O1");
}

TEST_CASE("array-form body tags call objects like bare ones") {
    check_tags(R"(<tool_call>[{"name":"f","arguments":{"a":1}}]</tool_call>)",
               "F14 O4 F3 N1 F3 O9 F4 P1 F2 P1 F15");
}

TEST_CASE("both tool name spans tagged across two calls") {
    const ResponseTemplate tmpl;
    const std::string raw =
        "<tool_call>{\"name\":\"alpha\",\"arguments\":{}}</tool_call>"
        "<tool_call>{\"name\":\"beta\",\"arguments\":{}}</tool_call>";
    const TaggedResponse tagged = tag_regions(raw, tmpl);
    std::size_t name_count = 0;
    for (RegionTag t : tagged.tags)
        if (t == RegionTag::ToolName) ++name_count;
    CHECK(name_count == 5 + 4);  // "alpha" + "beta"
}

TEST_CASE("tag partition is total and idempotent under re-serialization") {
    const ResponseTemplate tmpl;
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const std::string raw = random_garbage(rng);
        const TaggedResponse tagged = tag_regions(raw, tmpl);
        REQUIRE(tagged.tags.size() == raw.size());
        std::size_t total = 0;
        std::array<std::size_t, kNumRegions> counts{};
        for (RegionTag t : tagged.tags) {
            counts[static_cast<std::size_t>(t)] += 1;
            ++total;
        }
        CHECK(total == tagged.tokens.size());

        const std::string round = detokenize(tokenize(raw).tokens);
        const TaggedResponse again = tag_regions(round, tmpl);
        CHECK(again.tags == tagged.tags);
    }
}

TEST_CASE("region entropy stats") {
    const ResponseTemplate tmpl;

    SUBCASE("single region mean") {
        const TaggedResponse tagged = tag_regions("abc", tmpl);  // all Other
        const RegionEntropy stats = region_entropy_stats(tagged, std::vector<double>{1.0, 2.0, 3.0});
        REQUIRE(stats.of(RegionTag::Other).mean_entropy.has_value());
        CHECK(*stats.of(RegionTag::Other).mean_entropy == doctest::Approx(2.0));
        CHECK(stats.of(RegionTag::Other).count == 3);
    }

    SUBCASE("absent region is flagged, not zero") {
        const TaggedResponse tagged = tag_regions("abc", tmpl);
        const RegionEntropy stats = region_entropy_stats(tagged, std::vector<double>{1.0, 2.0, 3.0});
        CHECK(!stats.of(RegionTag::Thought).mean_entropy.has_value());
        CHECK(stats.of(RegionTag::Thought).count == 0);
    }

    SUBCASE("mixed fixture, hand-computed means") {
        // <think>xy</think>z: F7 T2 F8 O1
        const TaggedResponse tagged = tag_regions("<think>xy</think>z", tmpl);
        std::vector<double> ent(18);
        for (std::size_t i = 0; i < ent.size(); ++i) ent[i] = static_cast<double>(i);
        const RegionEntropy stats = region_entropy_stats(tagged, ent);
        // Format tokens: 0..6 and 9..16 -> mean (0+..+6 + 9+..+16)/15 = (21+100)/15
        CHECK(*stats.of(RegionTag::Format).mean_entropy == doctest::Approx(121.0 / 15.0));
        // Thought tokens: 7,8 -> 7.5
        CHECK(*stats.of(RegionTag::Thought).mean_entropy == doctest::Approx(7.5));
        // Other: 17
        CHECK(*stats.of(RegionTag::Other).mean_entropy == doctest::Approx(17.0));
    }

    SUBCASE("length mismatch throws") {
        const TaggedResponse tagged = tag_regions("abc", tmpl);
        CHECK_THROWS_AS(region_entropy_stats(tagged, std::vector<double>{1.0}), LengthMismatch);
    }
}

}  // TEST_SUITE
