#include "swapprobe/templates.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <nlohmann/json.hpp>

#include "swapprobe/errors.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

using json = nlohmann::json;

void ChatMarkers::validate() const {
    const std::pair<const char*, const std::string*> fields[] = {
        {"user_start", &user_start},         {"user_end", &user_end},
        {"response_start", &response_start}, {"response_end", &response_end},
        {"image_placeholder", &image_placeholder}};
    for (const auto& [name, value] : fields)
        if (value->empty()) throw MarkerError(std::string("marker '") + name + "' is empty");
    if (system_start.has_value() != system_end.has_value())
        throw MarkerError("system_start and system_end must be given together");
    if (system_start && (system_start->empty() || system_end->empty()))
        throw MarkerError("system markers must be non-empty");
    for (const auto& [name, value] : fields) {
        if (value == &image_placeholder) continue;
        if (value->find(image_placeholder) != std::string::npos)
            throw MarkerError(std::string("image placeholder occurs inside marker '") + name + "'");
    }
}

TemplateConfig parse_template_config(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("template config: ") + e.what());
    }
    TemplateConfig cfg;
    try {
        cfg.family = j.value("family", std::string("unnamed"));
        const auto& m = j.at("markers");
        cfg.markers.user_start = m.at("user_start").get<std::string>();
        cfg.markers.user_end = m.at("user_end").get<std::string>();
        cfg.markers.response_start = m.at("response_start").get<std::string>();
        cfg.markers.response_end = m.at("response_end").get<std::string>();
        cfg.markers.image_placeholder = m.at("image_placeholder").get<std::string>();
        if (m.contains("system_start")) cfg.markers.system_start = m["system_start"].get<std::string>();
        if (m.contains("system_end")) cfg.markers.system_end = m["system_end"].get<std::string>();
        cfg.markers.text_joiner = m.value("text_joiner", std::string(" "));
        if (j.contains("think_start")) cfg.think_start = j["think_start"].get<std::string>();
        if (j.contains("think_end")) cfg.think_end = j["think_end"].get<std::string>();
        cfg.raw_image_field = j.value("raw_image_field", std::string("images"));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("template config: ") + e.what());
    }
    cfg.markers.validate();
    return cfg;
}

TemplateConfig load_template_config(const std::filesystem::path& path) {
    return parse_template_config(read_text_file(path));
}

std::string_view to_string(SequenceSetting s) {
    switch (s) {
        case SequenceSetting::Standard: return "standard";
        case SequenceSetting::Probe: return "probe";
        case SequenceSetting::MultiTurn: return "multi_turn";
        case SequenceSetting::ProbeHighPplMeaningful: return "probe_high_ppl_meaningful";
        case SequenceSetting::ProbeHighPplMeaningless: return "probe_high_ppl_meaningless";
        case SequenceSetting::ProbeSystemTokenOnly: return "probe_system_token_only";
    }
    return "standard";
}

std::size_t RenderedSequence::image_count() const {
    return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [](const Segment& s) {
        return s.kind == SegmentKind::Image;
    }));
}

const std::string& RenderedSequence::image() const {
    for (const auto& s : segments)
        if (s.kind == SegmentKind::Image) return s.payload;
    throw Error("sequence has no image segment");
}

namespace {

Segment marker(const std::string& m) { return {SegmentKind::Text, m, true}; }
Segment text(const std::string& t) { return {SegmentKind::Text, t, false}; }
Segment image(const std::string& ref) { return {SegmentKind::Image, ref, false}; }

std::vector<Segment> user_turn(const ChatMarkers& m, const std::string& img, const std::string& question) {
    return {marker(m.user_start), image(img), text(question), marker(m.user_end)};
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

}  // namespace

RenderedSequence render_standard(const ChatMarkers& markers, const std::string& img,
                                 const std::string& question) {
    markers.validate();
    if (question.empty()) throw MarkerError("question must be non-empty");
    return {user_turn(markers, img, question), SequenceSetting::Standard, false};
}

RenderedSequence render_probe(const ChatMarkers& markers, const std::string& img,
                              const std::string& question, const std::string& r_a,
                              const std::string& p, SequenceSetting setting) {
    markers.validate();
    if (question.empty()) throw MarkerError("question must be non-empty");
    if (setting == SequenceSetting::Standard || setting == SequenceSetting::MultiTurn ||
        setting == SequenceSetting::ProbeSystemTokenOnly)
        throw MarkerError("render_probe requires a probe-family setting");
    RenderedSequence seq{user_turn(markers, img, question), setting, true};
    seq.segments.push_back(marker(markers.response_start));
    seq.segments.push_back(text(r_a));
    seq.segments.push_back(text(p));
    return seq;
}

RenderedSequence render_system_token_only(const ChatMarkers& markers, const std::string& img,
                                          const std::string& question, const std::string& r_a) {
    markers.validate();
    if (question.empty()) throw MarkerError("question must be non-empty");
    RenderedSequence seq{user_turn(markers, img, question), SequenceSetting::ProbeSystemTokenOnly, true};
    seq.segments.push_back(marker(markers.response_start));
    seq.segments.push_back(text(r_a));
    seq.segments.push_back(marker(markers.user_start));
    seq.segments.push_back(marker(markers.user_end));
    seq.segments.push_back(marker(markers.response_start));
    return seq;
}

RenderedSequence render_multi_turn(const ChatMarkers& markers, const std::string& img,
                                   const std::string& question, const std::string& r_a,
                                   const std::string& u) {
    markers.validate();
    if (question.empty()) throw MarkerError("question must be non-empty");
    if (u.empty()) throw MarkerError("user instruction must be non-empty");
    RenderedSequence seq{user_turn(markers, img, question), SequenceSetting::MultiTurn, false};
    seq.segments.push_back(marker(markers.response_start));
    seq.segments.push_back(text(r_a));
    seq.segments.push_back(marker(markers.response_end));
    seq.segments.push_back(marker(markers.user_start));
    seq.segments.push_back(text(u));
    seq.segments.push_back(marker(markers.user_end));
    return seq;
}

std::string flatten(const RenderedSequence& seq, const ChatMarkers& markers, bool generation_prompt) {
    std::string out;
    bool prev_free_text = false;
    for (const auto& s : seq.segments) {
        if (s.kind == SegmentKind::Image) {
            out += markers.image_placeholder;
            prev_free_text = false;
            continue;
        }
        if (s.marker) {
            out += s.payload;
            prev_free_text = false;
            continue;
        }
        if (s.payload.empty()) continue;
        if (prev_free_text && !out.empty() && !is_space(out.back()) && !is_space(s.payload.front()))
            out += markers.text_joiner;
        out += s.payload;
        prev_free_text = true;
    }
    if (generation_prompt && !seq.continuation) out += markers.response_start;
    return out;
}

std::vector<Segment> rescan(std::string_view flat, const ChatMarkers& markers) {
    std::vector<std::pair<const std::string*, bool>> tokens = {
        {&markers.user_start, true},     {&markers.user_end, true},
        {&markers.response_start, true}, {&markers.response_end, true},
        {&markers.image_placeholder, false}};
    if (markers.system_start) {
        tokens.emplace_back(&*markers.system_start, true);
        tokens.emplace_back(&*markers.system_end, true);
    }
    // Longest-first so that a marker that prefixes another never shadows it.
    std::stable_sort(tokens.begin(), tokens.end(),
                     [](const auto& a, const auto& b) { return a.first->size() > b.first->size(); });
    std::vector<Segment> out;
    std::string pending;
    auto flush = [&] {
        if (!pending.empty()) out.push_back({SegmentKind::Text, pending, false});
        pending.clear();
    };
    std::size_t i = 0;
    while (i < flat.size()) {
        bool matched = false;
        for (const auto& [tok, is_marker] : tokens) {
            if (flat.compare(i, tok->size(), *tok) == 0) {
                flush();
                if (is_marker)
                    out.push_back({SegmentKind::Text, *tok, true});
                else
                    out.push_back({SegmentKind::Image, *tok, false});
                i += tok->size();
                matched = true;
                break;
            }
        }
        if (!matched) pending.push_back(flat[i++]);
    }
    flush();
    return out;
}

std::vector<ChatTurn> to_chat_turns(const RenderedSequence& seq, const ChatMarkers& markers) {
    if (seq.continuation)
        throw ModeMismatch("sequence ends inside an open assistant turn; chat endpoints cannot continue it");
    std::vector<ChatTurn> turns;
    ChatTurn* current = nullptr;
    for (const auto& s : seq.segments) {
        if (s.marker) {
            if (s.payload == markers.user_start) {
                turns.push_back({"user", {}});
                current = &turns.back();
            } else if (s.payload == markers.response_start) {
                turns.push_back({"assistant", {}});
                current = &turns.back();
            } else if (markers.system_start && s.payload == *markers.system_start) {
                turns.push_back({"system", {}});
                current = &turns.back();
            } else {
                current = nullptr;
            }
            continue;
        }
        if (!current) throw MarkerError("segment outside of any turn");
        if (s.kind == SegmentKind::Text && s.payload.empty()) continue;
        current->content.push_back(s);
    }
    return turns;
}

std::string strip_think(std::string_view text, const TemplateConfig& config) {
    if (!config.think_start || !config.think_end || config.think_start->empty()) return std::string(text);
    const std::string& open = *config.think_start;
    const std::string& close = *config.think_end;
    std::size_t pos = 0;
    // Templates that pre-open the block leave only the closing tag in the output.
    const std::size_t first_close = text.find(close);
    if (first_close != std::string_view::npos && first_close < text.find(open))
        pos = first_close + close.size();
    std::string out;
    while (pos < text.size()) {
        const std::size_t b = text.find(open, pos);
        if (b == std::string_view::npos) {
            out.append(text.substr(pos));
            break;
        }
        out.append(text.substr(pos, b - pos));
        const std::size_t e = text.find(close, b + open.size());
        if (e == std::string_view::npos) break;
        pos = e + close.size();
    }
    return trim(out);
}

// -- prompt library ---------------------------------------------------------

TriggerLexicon::TriggerLexicon(std::vector<std::string> patterns) : patterns_(std::move(patterns)) {
    if (patterns_.empty()) throw PatternError("trigger pattern list is empty");
    for (const auto& p : patterns_) {
        try {
            compiled_.emplace_back(p, std::regex::ECMAScript | std::regex::icase);
        } catch (const std::regex_error& e) {
            throw PatternError("trigger pattern '" + p + "' does not compile: " + e.what());
        }
    }
}

std::optional<TriggerLexicon::Match> TriggerLexicon::first_match(std::string_view text) const {
    std::optional<Match> best;
    for (const auto& re : compiled_) {
        std::match_results<std::string_view::const_iterator> m;
        if (!std::regex_search(text.begin(), text.end(), m, re)) continue;
        const Match cand{static_cast<std::size_t>(m.position(0)), static_cast<std::size_t>(m.length(0))};
        if (!best || cand.offset < best->offset || (cand.offset == best->offset && cand.length > best->length))
            best = cand;
    }
    return best;
}

PromptLibrary PromptLibrary::defaults() {
    PromptLibrary lib;
    lib.reflection_default = "Wait, let me check the figure again to make sure I haven't made a mistake.";
    lib.user_instruction = "Check the image again and re-examine.";
    // variant 2 keeps its misspelling
    lib.reflection_variants = {
        "Actually, let me zoom in mentally on the image to verify the correctness.",
        "Hold on, let me validiate my thought process by looking at the figure again.",
        "Actually, let me review the fine details in the figure to be absolutely sure.",
        "I'd better look at the input again to confirm that this observation is correct.",
        "Let me pause and re-evaluate the entire figure to ensure my interpretation is sound.",
        "Actually, let me zoom in on the fine-grained details to verify this specific part.",
        "Let me scrutinize the figure one more time to confirm my initial impression.",
        "Wait, let me take a second look at the image to ensure I'm not misinterpreting it.",
        "I'd better double-check the visual input to avoid any potential perceptual errors.",
        "Let me double-check the image to make sure I didn't imagine that detail.",
    };
    lib.high_ppl_meaningful = "[VERIFICATION REQUIRED] Image hash mismatch. Manual re-inspection mandated.";
    lib.high_ppl_meaningless = "aF8#kLqP2^zX!c$vB5*nN1@mM0%hH&tT9(rR";
    lib.natural_triggers = TriggerLexicon({"\\bwait\\b", "\\blet me check\\b", "\\bdouble-check\\b",
                                           "\\bre-examine\\b", "\\blook at the image again\\b"});
    return lib;
}

const std::string& PromptLibrary::reflection(int variant_id) const {
    if (variant_id == 0) return reflection_default;
    if (variant_id < 0 || static_cast<std::size_t>(variant_id) > reflection_variants.size())
        throw ConfigError("unknown reflection prompt variant " + std::to_string(variant_id));
    return reflection_variants[static_cast<std::size_t>(variant_id - 1)];
}

PromptLibrary parse_prompt_library(std::string_view json_text) {
    PromptLibrary lib = PromptLibrary::defaults();
    json j;
    try {
        j = json::parse(json_text);
        if (j.contains("reflection_default")) lib.reflection_default = j["reflection_default"].get<std::string>();
        if (j.contains("user_instruction")) lib.user_instruction = j["user_instruction"].get<std::string>();
        if (j.contains("reflection_variants"))
            lib.reflection_variants = j["reflection_variants"].get<std::vector<std::string>>();
        if (j.contains("high_ppl_meaningful")) lib.high_ppl_meaningful = j["high_ppl_meaningful"].get<std::string>();
        if (j.contains("high_ppl_meaningless"))
            lib.high_ppl_meaningless = j["high_ppl_meaningless"].get<std::string>();
        if (j.contains("elicitation_system_prompt"))
            lib.elicitation_system_prompt = j["elicitation_system_prompt"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("prompt library: ") + e.what());
    }
    if (j.contains("natural_trigger_patterns"))
        lib.natural_triggers = TriggerLexicon(j["natural_trigger_patterns"].get<std::vector<std::string>>());
    if (lib.reflection_variants.empty()) throw ConfigError("prompt library needs at least one reflection variant");
    if (lib.user_instruction.empty()) throw ConfigError("user instruction must be non-empty");
    return lib;
}

PromptLibrary load_prompt_library(const std::filesystem::path& path) {
    return parse_prompt_library(read_text_file(path));
}

// -- context manipulation ---------------------------------------------------

bool is_canonical_retention(double fraction) {
    for (double f : {0.0, 0.25, 0.5, 0.75, 1.0})
        if (fraction == f) return true;
    return false;
}

std::string truncate_reasoning(std::string_view r_a, double fraction) {
    if (!(fraction > 0.0)) return {};
    if (fraction >= 1.0) return std::string(r_a);
    const auto words = split_words(r_a);
    // Guard against 0.7 * 10 = 7.000000000000001 rounding up to 8.
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(words.size()) - 1e-9));
    std::string out;
    for (std::size_t i = 0; i < keep && i < words.size(); ++i) {
        if (i) out.push_back(' ');
        out += words[i];
    }
    return out;
}

std::optional<std::size_t> find_natural_trigger(std::string_view r_a, const TriggerLexicon& lexicon) {
    if (lexicon.empty()) throw PatternError("trigger pattern list is empty");
    if (auto m = lexicon.first_match(r_a)) return m->offset;
    return std::nullopt;
}

}  // namespace swapprobe
