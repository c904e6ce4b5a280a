// Copyright 2026 The restkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "restkit/tool_data.hpp"
#include "restkit/util.hpp"

namespace restkit {

/// Token classes for gradient reweighting. Every token carries exactly one.
enum class RegionTag : int { Format = 0, ToolName = 1, Parameter = 2, Thought = 3, Other = 4 };

constexpr int kNumRegions = 5;

inline std::string_view region_name(RegionTag t) {
    switch (t) {
        case RegionTag::Format: return "format";
        case RegionTag::ToolName: return "name";
        case RegionTag::Parameter: return "parameter";
        case RegionTag::Thought: return "thought";
        case RegionTag::Other: return "other";
    }
    return "other";
}

inline std::optional<RegionTag> region_from_name(std::string_view s) {
    if (s == "format") return RegionTag::Format;
    if (s == "name") return RegionTag::ToolName;
    if (s == "parameter") return RegionTag::Parameter;
    if (s == "thought") return RegionTag::Thought;
    if (s == "other") return RegionTag::Other;
    return std::nullopt;
}

/// Byte-level tokenization: one token per byte, identity char map. Chosen so
/// character spans and token spans coincide; region semantics are unchanged.
struct TaggedResponse {
    std::vector<int> tokens;                                // byte values
    std::vector<RegionTag> tags;                            // one per token
    std::vector<std::pair<std::size_t, std::size_t>> char_map;  // [begin,end) per token
};

struct TokenizedText {
    std::vector<int> tokens;
    std::vector<std::pair<std::size_t, std::size_t>> char_map;
};

inline TokenizedText tokenize(std::string_view raw) {
    TokenizedText out;
    out.tokens.reserve(raw.size());
    out.char_map.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out.tokens.push_back(static_cast<unsigned char>(raw[i]));
        out.char_map.emplace_back(i, i + 1);
    }
    return out;
}

inline std::string detokenize(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    return out;
}

namespace detail {

// Minimal JSON lexer that records byte spans; nlohmann does the actual
// validation elsewhere, this only drives region assignment.
struct JsonTok {
    enum Kind { Punct, Str, Num, Lit } kind;
    std::size_t begin, end;  // absolute offsets, end exclusive
};

inline bool lex_json(std::string_view text, std::size_t base, std::vector<JsonTok>& out) {
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const char c = text[i];
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++i;
            continue;
        }
        if (c == '{' || c == '}' || c == '[' || c == ']' || c == ':' || c == ',') {
            out.push_back({JsonTok::Punct, base + i, base + i + 1});
            ++i;
            continue;
        }
        if (c == '"') {
            std::size_t j = i + 1;
            while (j < n) {
                if (text[j] == '\\') {
                    j += 2;
                    continue;
                }
                if (text[j] == '"') break;
                ++j;
            }
            if (j >= n) return false;  // unterminated string
            out.push_back({JsonTok::Str, base + i, base + j + 1});
            i = j + 1;
            continue;
        }
        if (c == '-' || (c >= '0' && c <= '9')) {
            std::size_t j = i + 1;
            while (j < n && (std::string_view("0123456789.eE+-").find(text[j]) != std::string_view::npos))
                ++j;
            out.push_back({JsonTok::Num, base + i, base + j});
            i = j;
            continue;
        }
        if (text.compare(i, 4, "true") == 0 || text.compare(i, 4, "null") == 0) {
            out.push_back({JsonTok::Lit, base + i, base + i + 4});
            i += 4;
            continue;
        }
        if (text.compare(i, 5, "false") == 0) {
            out.push_back({JsonTok::Lit, base + i, base + i + 5});
            i += 5;
            continue;
        }
        return false;  // not JSON
    }
    return true;
}

inline std::string_view str_content(std::string_view raw, const JsonTok& t) {
    return raw.substr(t.begin + 1, t.end - t.begin - 2);
}

// Structural walker over the lexed body. Assigns:
//   punctuation (braces, brackets, quotes, colons, commas) -> Format
//   the "name" value contents                              -> ToolName
//   key and value contents inside "arguments"              -> Parameter
//   anything else (incl. the literal name/arguments keys)  -> Other
struct BodyWalker {
    std::string_view raw;
    const std::vector<JsonTok>& toks;
    std::vector<RegionTag>& tags;
    std::size_t i = 0;

    bool done() const { return i >= toks.size(); }
    const JsonTok& cur() const { return toks[i]; }

    void mark(std::size_t b, std::size_t e, RegionTag tag) {
        for (std::size_t k = b; k < e && k < tags.size(); ++k) tags[k] = tag;
    }
    void mark_punct(const JsonTok& t) { mark(t.begin, t.end, RegionTag::Format); }
    void mark_string(const JsonTok& t, RegionTag content) {
        mark(t.begin, t.begin + 1, RegionTag::Format);
        mark(t.begin + 1, t.end - 1, content);
        mark(t.end - 1, t.end, RegionTag::Format);
    }

    bool is_punct(char c) const {
        return !done() && cur().kind == JsonTok::Punct && raw[cur().begin] == c;
    }

    // content: tag for non-structural characters within this value
    bool walk_value(RegionTag content) {
        if (done()) return false;
        const JsonTok& t = cur();
        switch (t.kind) {
            case JsonTok::Str:
                mark_string(t, content);
                ++i;
                return true;
            case JsonTok::Num:
            case JsonTok::Lit:
                mark(t.begin, t.end, content);
                ++i;
                return true;
            case JsonTok::Punct:
                if (raw[t.begin] == '{') return walk_object(content, /*top_level=*/false);
                if (raw[t.begin] == '[') return walk_array(content);
                return false;
        }
        return false;
    }

    bool walk_array(RegionTag content) {
        mark_punct(cur());
        ++i;  // '['
        if (is_punct(']')) {
            mark_punct(cur());
            ++i;
            return true;
        }
        while (true) {
            if (!walk_value(content)) return false;
            if (is_punct(',')) {
                mark_punct(cur());
                ++i;
                continue;
            }
            if (is_punct(']')) {
                mark_punct(cur());
                ++i;
                return true;
            }
            return false;
        }
    }

    // A top-level array holds call objects, not plain values.
    bool walk_call_array() {
        mark_punct(cur());
        ++i;  // '['
        if (is_punct(']')) {
            mark_punct(cur());
            ++i;
            return true;
        }
        while (true) {
            if (!done() && cur().kind == JsonTok::Punct && raw[cur().begin] == '{') {
                if (!walk_object(RegionTag::Other, /*top_level=*/true)) return false;
            } else if (!walk_value(RegionTag::Other)) {
                return false;
            }
            if (is_punct(',')) {
                mark_punct(cur());
                ++i;
                continue;
            }
            if (is_punct(']')) {
                mark_punct(cur());
                ++i;
                return true;
            }
            return false;
        }
    }

    // Top-level call objects treat the "name" and "arguments" members
    // specially; nested objects inherit `content` for keys and values.
    bool walk_object(RegionTag content, bool top_level) {
        mark_punct(cur());
        ++i;  // '{'
        if (is_punct('}')) {
            mark_punct(cur());
            ++i;
            return true;
        }
        while (true) {
            if (done() || cur().kind != JsonTok::Str) return false;
            const JsonTok key = cur();
            const std::string_view key_text = str_content(raw, key);
            mark_string(key, top_level ? RegionTag::Other : content);
            ++i;
            if (!is_punct(':')) return false;
            mark_punct(cur());
            ++i;
            if (top_level && key_text == "name") {
                if (!walk_value(RegionTag::ToolName)) return false;
            } else if (top_level && key_text == "arguments") {
                if (!walk_value(RegionTag::Parameter)) return false;
            } else {
                if (!walk_value(top_level ? RegionTag::Other : content)) return false;
            }
            if (is_punct(',')) {
                mark_punct(cur());
                ++i;
                continue;
            }
            if (is_punct('}')) {
                mark_punct(cur());
                ++i;
                return true;
            }
            return false;
        }
    }
};

// Tags one tool-call body in place; leaves everything Other when the body is
// not syntactically sound JSON of the expected shape.
inline void tag_call_body(std::string_view raw, std::size_t begin, std::size_t end,
                          std::vector<RegionTag>& tags) {
    std::vector<JsonTok> toks;
    if (!lex_json(raw.substr(begin, end - begin), begin, toks)) return;
    if (toks.empty()) return;

    std::vector<RegionTag> scratch(tags.begin(), tags.end());
    BodyWalker w{raw, toks, scratch};
    while (!w.done()) {
        bool ok = false;
        if (w.cur().kind == JsonTok::Punct && raw[w.cur().begin] == '[')
            ok = w.walk_call_array();
        else if (w.cur().kind == JsonTok::Punct && raw[w.cur().begin] == '{')
            ok = w.walk_object(RegionTag::Other, /*top_level=*/true);
        if (!ok) return;  // structure broke: keep body Other
    }
    tags = std::move(scratch);
}

inline void mark_range(std::vector<RegionTag>& tags, std::size_t b, std::size_t e, RegionTag t) {
    for (std::size_t k = b; k < e && k < tags.size(); ++k) tags[k] = t;
}

}  // namespace detail

/// Deterministic partition of a raw response into the four weight regions
/// plus Other. Malformed structure degrades gracefully: unmatched delimiters
/// are tagged Format, enclosed text stays Other. Whitespace between regions
/// is Other.
inline TaggedResponse tag_regions(std::string_view raw, const ResponseTemplate& tmpl) {
    TaggedResponse out;
    TokenizedText tok = tokenize(raw);
    out.tokens = std::move(tok.tokens);
    out.char_map = std::move(tok.char_map);
    out.tags.assign(raw.size(), RegionTag::Other);

    std::size_t pos = 0;
    while (pos < raw.size()) {
        const std::size_t think_at = raw.find(tmpl.think_open, pos);
        const std::size_t call_at = raw.find(tmpl.call_open, pos);
        if (think_at == std::string_view::npos && call_at == std::string_view::npos) break;

        if (think_at < call_at) {
            detail::mark_range(out.tags, think_at, think_at + tmpl.think_open.size(), RegionTag::Format);
            const std::size_t body = think_at + tmpl.think_open.size();
            const std::size_t close = raw.find(tmpl.think_close, body);
            if (close == std::string_view::npos) {
                pos = body;
                continue;
            }
            detail::mark_range(out.tags, body, close, RegionTag::Thought);
            detail::mark_range(out.tags, close, close + tmpl.think_close.size(), RegionTag::Format);
            pos = close + tmpl.think_close.size();
        } else {
            detail::mark_range(out.tags, call_at, call_at + tmpl.call_open.size(), RegionTag::Format);
            const std::size_t body = call_at + tmpl.call_open.size();
            const std::size_t close = raw.find(tmpl.call_close, body);
            if (close == std::string_view::npos) {
                pos = body;
                continue;
            }
            detail::tag_call_body(raw, body, close, out.tags);
            detail::mark_range(out.tags, close, close + tmpl.call_close.size(), RegionTag::Format);
            pos = close + tmpl.call_close.size();
        }
    }

    // Stray delimiters (e.g. a close without an open) still count as Format.
    for (const std::string* d : {&tmpl.think_open, &tmpl.think_close, &tmpl.call_open, &tmpl.call_close}) {
        std::size_t at = 0;
        while ((at = raw.find(*d, at)) != std::string_view::npos) {
            bool all_other = true;
            for (std::size_t k = at; k < at + d->size(); ++k)
                if (out.tags[k] != RegionTag::Other) {
                    all_other = false;
                    break;
                }
            if (all_other) detail::mark_range(out.tags, at, at + d->size(), RegionTag::Format);
            at += d->size();
        }
    }
    return out;
}

/// Per-region mean entropy. Regions with no tokens carry no mean at all;
/// absence is not zero entropy.
struct RegionStat {
    std::size_t count = 0;
    std::optional<double> mean_entropy;
};

struct RegionEntropy {
    std::array<RegionStat, kNumRegions> by_region;

    const RegionStat& of(RegionTag t) const { return by_region[static_cast<std::size_t>(t)]; }
    RegionStat& of(RegionTag t) { return by_region[static_cast<std::size_t>(t)]; }
};

inline RegionEntropy region_entropy_stats(const TaggedResponse& tagged,
                                          std::span<const double> per_token_entropy) {
    if (per_token_entropy.size() != tagged.tags.size())
        throw LengthMismatch("region_entropy_stats: entropy list vs token count");
    std::array<double, kNumRegions> sums{};
    std::array<std::size_t, kNumRegions> counts{};
    for (std::size_t i = 0; i < tagged.tags.size(); ++i) {
        const auto r = static_cast<std::size_t>(tagged.tags[i]);
        sums[r] += per_token_entropy[i];
        counts[r] += 1;
    }
    RegionEntropy out;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
        out.by_region[r].count = counts[r];
        if (counts[r] > 0) out.by_region[r].mean_entropy = sums[r] / static_cast<double>(counts[r]);
    }
    return out;
}

}  // namespace restkit
