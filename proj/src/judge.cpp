#include "swapprobe/judge.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <regex>
#include <sstream>
#include <thread>

#include "swapprobe/errors.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(CorrectVs c) {
    switch (c) {
        case CorrectVs::AnswerA: return "answer_a";
        case CorrectVs::AnswerB: return "answer_b";
        case CorrectVs::Neither: return "neither";
    }
    return "neither";
}

std::string_view to_string(ErrorClass e) { return e == ErrorClass::SameAsStage1 ? "same_as_stage1" : "new_error"; }

std::string_view to_string(JudgeMode m) {
    switch (m) {
        case JudgeMode::Rule: return "rule";
        case JudgeMode::Llm: return "llm";
        case JudgeMode::Human: return "human";
    }
    return "rule";
}

std::string_view to_string(JudgeTask t) {
    switch (t) {
        case JudgeTask::Correctness: return "correctness";
        case JudgeTask::Detection: return "detection";
        case JudgeTask::SameError: return "same_error";
    }
    return "correctness";
}

std::string_view to_string(JudgeLabel l) {
    switch (l) {
        case JudgeLabel::Correct: return "CORRECT";
        case JudgeLabel::Incorrect: return "INCORRECT";
        case JudgeLabel::Detected: return "DETECTED";
        case JudgeLabel::NotDetected: return "NOT_DETECTED";
        case JudgeLabel::Same: return "SAME";
        case JudgeLabel::Different: return "DIFFERENT";
        case JudgeLabel::Abstain: return "ABSTAIN";
    }
    return "ABSTAIN";
}

JudgeMode parse_judge_mode(std::string_view s) {
    if (s == "rule") return JudgeMode::Rule;
    if (s == "llm") return JudgeMode::Llm;
    if (s == "human") return JudgeMode::Human;
    throw ConfigError("unknown judge mode '" + std::string(s) + "'");
}

namespace {

CorrectVs parse_correct_vs(std::string_view s) {
    if (s == "answer_a") return CorrectVs::AnswerA;
    if (s == "answer_b") return CorrectVs::AnswerB;
    return CorrectVs::Neither;
}

}  // namespace

bool Verdict::correct() const {
    if (setting == Setting::StandardOnA) return correct_vs == CorrectVs::AnswerA;
    if (scored_against_b(setting)) return correct_vs == CorrectVs::AnswerB;
    return false;
}

json to_json(const Verdict& v) {
    json j = {{"transcript_key", v.transcript_key},
              {"instance_id", v.instance_id},
              {"source", to_string(v.source)},
              {"setting", to_string(v.setting)},
              {"repeat", v.repeat},
              {"extracted_answer", v.extracted_answer},
              {"correct_vs", to_string(v.correct_vs)},
              {"abstained", v.abstained},
              {"judge_mode", to_string(v.judge_mode)},
              {"judge_raw", v.judge_raw}};
    if (v.retention) j["retention"] = *v.retention;
    if (v.prompt_variant_id) j["prompt_variant_id"] = *v.prompt_variant_id;
    if (v.detected_change) j["detected_change"] = *v.detected_change;
    if (v.error_class) j["error_class"] = to_string(*v.error_class);
    return j;
}

Verdict verdict_from_json(const json& j) {
    Verdict v;
    v.transcript_key = j.at("transcript_key").get<std::string>();
    v.instance_id = j.at("instance_id").get<std::string>();
    v.source = parse_source(j.at("source").get<std::string>());
    v.setting = parse_setting(j.at("setting").get<std::string>());
    v.repeat = j.value("repeat", 0);
    v.extracted_answer = j.value("extracted_answer", std::string());
    v.correct_vs = parse_correct_vs(j.value("correct_vs", std::string("neither")));
    v.abstained = j.value("abstained", false);
    v.judge_mode = parse_judge_mode(j.value("judge_mode", std::string("rule")));
    v.judge_raw = j.value("judge_raw", std::string());
    if (j.contains("retention")) v.retention = j["retention"].get<double>();
    if (j.contains("prompt_variant_id")) v.prompt_variant_id = j["prompt_variant_id"].get<int>();
    if (j.contains("detected_change")) v.detected_change = j["detected_change"].get<bool>();
    if (j.contains("error_class"))
        v.error_class = j["error_class"].get<std::string>() == "same_as_stage1" ? ErrorClass::SameAsStage1
                                                                               : ErrorClass::NewError;
    return v;
}

void save_verdicts(const std::vector<Verdict>& vs, const fs::path& path) {
    std::string out;
    for (const auto& v : vs) out += to_json(v).dump() + "\n";
    write_file(path, out);
}

std::vector<Verdict> load_verdicts(const fs::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<Verdict> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        try {
            out.push_back(verdict_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(n, path.string() + ": " + e.what());
        }
    }
    return out;
}

// -- extraction -------------------------------------------------------------

namespace {

std::optional<std::string> last_boxed(std::string_view text) {
    const auto pos = text.rfind("\\boxed{");
    if (pos == std::string_view::npos) return std::nullopt;
    std::size_t i = pos + 7;
    int depth = 1;
    std::string out;
    for (; i < text.size(); ++i) {
        if (text[i] == '{') ++depth;
        if (text[i] == '}' && --depth == 0) return trim(out);
        out.push_back(text[i]);
    }
    return std::nullopt;
}

std::optional<std::string> last_answer_span(std::string_view text) {
    static const std::regex re(R"(\b(?:final\s+)?answer\s*(?:is\s*:?|:|=))", std::regex::icase);
    const std::string s(text);
    std::optional<std::size_t> start;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it)
        start = static_cast<std::size_t>(it->position() + it->length());
    if (!start) return std::nullopt;
    std::size_t end = s.size();
    for (std::size_t i = *start; i < s.size(); ++i) {
        if (s[i] == '\n') {
            end = i;
            break;
        }
        if (s[i] == '.' && (i + 1 == s.size() || std::isspace(static_cast<unsigned char>(s[i + 1])))) {
            end = i;
            break;
        }
    }
    std::string span = trim(std::string_view(s).substr(*start, end - *start));
    std::erase_if(span, [](char c) { return c == '*' || c == '$'; });
    span = trim(span);
    if (span.empty()) return std::nullopt;
    return span;
}

std::string last_option_letter(const std::string& span) {
    static const std::regex re(R"((?:^|[^A-Za-z0-9])([A-J])(?=$|[^A-Za-z0-9]))");
    std::string found;
    for (auto it = std::sregex_iterator(span.begin(), span.end(), re); it != std::sregex_iterator(); ++it)
        found = (*it)[1].str();
    return found;
}

std::string last_parenthesized_letter(const std::string& text) {
    static const std::regex re(R"(\(([A-J])\))");
    std::string found;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it)
        found = (*it)[1].str();
    return found;
}

std::string last_number(const std::string& text) {
    static const std::regex re(R"(-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+(?:\.\d+)?|-?\.\d+)");
    std::string found;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it)
        found = it->str();
    std::erase(found, ',');
    return found;
}

}  // namespace

std::string extract_answer(std::string_view text, AnswerFormat format) {
    std::optional<std::string> span = last_boxed(text);
    if (!span) span = last_answer_span(text);
    switch (format) {
        case AnswerFormat::MultipleChoice:
            if (span) {
                if (auto letter = last_option_letter(*span); !letter.empty()) return letter;
            }
            return last_parenthesized_letter(std::string(text));
        case AnswerFormat::FreeFormNumeric:
            if (span) {
                if (auto num = last_number(*span); !num.empty()) return num;
            }
            return last_number(std::string(text));
        case AnswerFormat::FreeFormText:
            return span ? *span : std::string();
    }
    return {};
}

CorrectVs score(std::string_view extracted, const ProbeInstance& inst) {
    if (trim(extracted).empty()) return CorrectVs::Neither;
    if (answers_equivalent(extracted, inst.answer_b, inst.answer_format)) return CorrectVs::AnswerB;
    if (answers_equivalent(extracted, inst.answer_a, inst.answer_format)) return CorrectVs::AnswerA;
    return CorrectVs::Neither;
}

bool mentions_image_change(std::string_view text) {
    static const std::regex re(
        R"(image\s+(?:has|have|appears\s+to\s+have|seems\s+to\s+have)\s+(?:been\s+)?(?:changed|replaced|swapped)|)"
        R"(image\s+(?:is|was)\s+(?:now\s+)?(?:different|replaced|swapped|changed)|)"
        R"((?:a|this\s+is\s+a)\s+(?:different|new|another)\s+(?:image|picture|figure)|)"
        R"(no\s+longer\s+(?:shows|matches|contains|depicts)|)"
        R"(does(?:n't|\s+not)\s+match\s+(?:the|my)\s+(?:earlier|previous|prior|original)|)"
        R"(not\s+the\s+same\s+(?:image|picture|figure))",
        std::regex::icase);
    const std::string s(text);
    return std::regex_search(s, re);
}

JudgeLabel parse_judge_label(std::string_view reply, JudgeTask task) {
    struct Pair {
        const char* pattern;
        JudgeLabel first;
        JudgeLabel second;
        const char* first_token;
    };
    static const Pair correctness{R"(\b(INCORRECT|CORRECT)\b)", JudgeLabel::Correct, JudgeLabel::Incorrect, "CORRECT"};
    static const Pair detection{R"(\b(NOT_DETECTED|DETECTED)\b)", JudgeLabel::Detected, JudgeLabel::NotDetected,
                                "DETECTED"};
    static const Pair same{R"(\b(SAME|DIFFERENT)\b)", JudgeLabel::Same, JudgeLabel::Different, "SAME"};
    const Pair& p = task == JudgeTask::Correctness ? correctness : task == JudgeTask::Detection ? detection : same;
    const std::regex re(p.pattern);
    const std::string s(reply);
    bool saw_first = false, saw_second = false;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it)
        ((*it)[1].str() == p.first_token ? saw_first : saw_second) = true;
    if (saw_first == saw_second) return JudgeLabel::Abstain;
    return saw_first ? p.first : p.second;
}

// -- judge prompts ----------------------------------------------------------

JudgePrompts JudgePrompts::defaults() {
    JudgePrompts p;
    p.correctness =
        "You are grading an answer to a question about an image.\n"
        "Question: {question}\n"
        "Reference answer: {reference}\n"
        "Candidate response: {candidate}\n\n"
        "Does the final answer in the candidate response match the reference answer?\n"
        "Respond with exactly CORRECT or INCORRECT.";
    p.detection =
        "A model answered the question below about an image. While it was reasoning, the image was replaced "
        "with an unrelated one.\n"
        "Question: {question}\n"
        "Response after the replacement: {candidate}\n\n"
        "Does the response explicitly notice that the image changed or no longer matches its earlier "
        "reasoning?\n"
        "Respond with exactly DETECTED or NOT_DETECTED.";
    p.same_error =
        "Two responses to the same question were both graded incorrect.\n"
        "Question: {question}\n"
        "First response: {reference}\n"
        "Second response: {candidate}\n\n"
        "Do both responses make the same error, reaching the same wrong answer for the same reason?\n"
        "Respond with exactly SAME or DIFFERENT.";
    return p;
}

JudgePrompts JudgePrompts::load(const fs::path& dir) {
    JudgePrompts p = defaults();
    auto read = [&](const char* name, std::string& dst) {
        const fs::path f = dir / name;
        if (fs::exists(f)) dst = read_text_file(f);
    };
    read("correctness.txt", p.correctness);
    read("detection.txt", p.detection);
    read("same_error.txt", p.same_error);
    return p;
}

const std::string& JudgePrompts::for_task(JudgeTask t) const {
    switch (t) {
        case JudgeTask::Correctness: return correctness;
        case JudgeTask::Detection: return detection;
        case JudgeTask::SameError: return same_error;
    }
    return correctness;
}

std::string fill_judge_prompt(std::string_view tmpl, std::string_view question, std::string_view reference,
                              std::string_view candidate) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size();) {
        bool replaced = false;
        for (const auto& [name, value] : {std::pair{std::string_view("{question}"), question},
                                          std::pair{std::string_view("{reference}"), reference},
                                          std::pair{std::string_view("{candidate}"), candidate}}) {
            if (tmpl.substr(i, name.size()) == name) {
                out += value;
                i += name.size();
                replaced = true;
                break;
            }
        }
        if (!replaced) out.push_back(tmpl[i++]);
    }
    return out;
}

JudgeResult LlmJudge::judge(const JudgeRequest& req) const {
    JudgeResult r;
    try {
        const auto prompt = fill_judge_prompt(prompts_.for_task(req.task), req.question, req.reference, req.candidate);
        r.raw = client_.chat_text({{"user", prompt}}, params_).text;
        r.label = parse_judge_label(r.raw, req.task);
    } catch (const Error& e) {
        r.raw = std::string("error: ") + e.what();
        r.label = JudgeLabel::Abstain;
    }
    return r;
}

std::vector<JudgeResult> LlmJudge::judge_many(const std::vector<JudgeRequest>& reqs, int max_in_flight) const {
    std::vector<JudgeResult> out(reqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < reqs.size(); i = next++) out[i] = judge(reqs[i]);
    };
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, max_in_flight)), reqs.size());
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    return out;
}

// -- judging a run ----------------------------------------------------------

namespace {

bool is_distinct(Setting s) { return s == Setting::DistinctProbe || s == Setting::DistinctMultiTurn; }

std::string visible_text(const std::string& text, const std::optional<TemplateConfig>& tmpl) {
    if (!tmpl) return text;
    std::string stripped = strip_think(text, *tmpl);
    return stripped.empty() ? text : stripped;
}

std::map<std::string, const ProbeInstance*> index_instances(const Manifest& m) {
    std::map<std::string, const ProbeInstance*> out;
    for (const auto& inst : m.instances) out[inst.id] = &inst;
    return out;
}

const ProbeInstance& instance_of(const std::map<std::string, const ProbeInstance*>& idx, const std::string& id) {
    const auto it = idx.find(id);
    if (it == idx.end()) throw IntegrityError({id}, "transcript refers to unknown instance '" + id + "'");
    return *it->second;
}

/// Positions of verdicts whose Stage-1 and Stage-2 answers are both wrong, paired
/// with the position of their Stage-1 verdict.
std::vector<std::pair<std::size_t, std::size_t>> error_class_pairs(const std::vector<Verdict>& vs) {
    std::map<std::pair<std::string, int>, std::size_t> stage1;
    for (std::size_t i = 0; i < vs.size(); ++i)
        if (vs[i].setting == Setting::StandardOnA) stage1[{vs[i].instance_id, vs[i].repeat}] = i;
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        const auto& v = vs[i];
        if (!is_two_stage(v.setting) || !scored_against_b(v.setting) || v.correct()) continue;
        const auto it = stage1.find({v.instance_id, v.repeat});
        if (it == stage1.end() || vs[it->second].correct()) continue;
        out.emplace_back(i, it->second);
    }
    return out;
}

}  // namespace

std::vector<Verdict> judge_transcripts(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                                       const JudgeOptions& options) {
    if (options.mode == JudgeMode::Llm && !options.llm) throw ConfigError("llm judge mode needs a judge endpoint");
    const auto idx = index_instances(manifest);
    std::vector<Verdict> vs;
    std::vector<std::string> texts;
    std::vector<const ProbeInstance*> insts;
    for (const auto& t : transcripts) {
        if (t.failed) continue;
        const auto& inst = instance_of(idx, t.instance_id);
        Verdict v;
        v.transcript_key = t.key();
        v.instance_id = t.instance_id;
        v.source = inst.source;
        v.setting = t.setting;
        v.repeat = t.repeat;
        v.retention = t.retention;
        v.prompt_variant_id = t.prompt_variant_id;
        v.judge_mode = options.mode;
        const std::string text = visible_text(t.scored_text(), options.tmpl);
        v.extracted_answer = extract_answer(text, inst.answer_format);
        v.correct_vs = is_distinct(t.setting) ? CorrectVs::Neither : score(v.extracted_answer, inst);
        if (is_distinct(t.setting) && options.mode != JudgeMode::Llm) v.detected_change = mentions_image_change(text);
        vs.push_back(std::move(v));
        texts.push_back(text);
        insts.push_back(&inst);
    }

    if (options.mode == JudgeMode::Llm) {
        std::vector<JudgeRequest> reqs;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < vs.size(); ++i) {
            const auto& v = vs[i];
            const auto& inst = *insts[i];
            if (is_distinct(v.setting)) {
                reqs.push_back({inst.question, "", texts[i], JudgeTask::Detection});
                where.push_back(i);
            } else if (v.correct_vs == CorrectVs::Neither && !v.extracted_answer.empty()) {
                const auto& reference = v.setting == Setting::StandardOnA ? inst.answer_a : inst.answer_b;
                reqs.push_back({inst.question, reference, texts[i], JudgeTask::Correctness});
                where.push_back(i);
            }
        }
        const auto results = options.llm->judge_many(reqs, options.max_in_flight);
        for (std::size_t k = 0; k < results.size(); ++k) {
            auto& v = vs[where[k]];
            v.judge_raw = results[k].raw;
            switch (results[k].label) {
                case JudgeLabel::Correct:
                    v.correct_vs = v.setting == Setting::StandardOnA ? CorrectVs::AnswerA : CorrectVs::AnswerB;
                    break;
                case JudgeLabel::Detected: v.detected_change = true; break;
                case JudgeLabel::NotDetected: v.detected_change = false; break;
                case JudgeLabel::Abstain: v.abstained = true; break;
                default: break;
            }
        }
    }

    const auto pairs = error_class_pairs(vs);
    if (options.mode == JudgeMode::Llm) {
        std::vector<JudgeRequest> reqs;
        for (const auto& [i, s1] : pairs) reqs.push_back({insts[i]->question, texts[s1], texts[i], JudgeTask::SameError});
        const auto results = options.llm->judge_many(reqs, options.max_in_flight);
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            auto& v = vs[pairs[k].first];
            if (!v.judge_raw.empty()) v.judge_raw += "\n";
            v.judge_raw += results[k].raw;
            if (results[k].label == JudgeLabel::Same)
                v.error_class = ErrorClass::SameAsStage1;
            else if (results[k].label == JudgeLabel::Different)
                v.error_class = ErrorClass::NewError;
            else
                v.abstained = true;
        }
    } else {
        for (const auto& [i, s1] : pairs) {
            auto& v = vs[i];
            if (options.mode == JudgeMode::Human) {
                const auto it = options.adjudications.find(v.transcript_key);
                if (it == options.adjudications.end())
                    v.abstained = true;
                else
                    v.error_class = it->second;
                continue;
            }
            const auto& fmt = insts[i]->answer_format;
            const bool same = !v.extracted_answer.empty() &&
                              answers_equivalent(v.extracted_answer, vs[s1].extracted_answer, fmt);
            v.error_class = same ? ErrorClass::SameAsStage1 : ErrorClass::NewError;
        }
    }
    return vs;
}

std::string export_adjudication(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                                const std::vector<Verdict>& verdicts) {
    const auto idx = index_instances(manifest);
    std::map<std::string, const Transcript*> by_key;
    for (const auto& t : transcripts) by_key[t.key()] = &t;
    std::string out;
    for (const auto& [i, s1] : error_class_pairs(verdicts)) {
        const auto& v = verdicts[i];
        const auto& first = verdicts[s1];
        const auto& inst = instance_of(idx, v.instance_id);
        json rec = {{"key", v.transcript_key},
                    {"instance_id", v.instance_id},
                    {"setting", to_string(v.setting)},
                    {"question", inst.question},
                    {"answer_a", inst.answer_a},
                    {"answer_b", inst.answer_b},
                    {"stage1_answer", first.extracted_answer},
                    {"stage2_answer", v.extracted_answer},
                    {"label", nullptr}};
        if (const auto it = by_key.find(first.transcript_key); it != by_key.end())
            rec["stage1_response"] = it->second->scored_text();
        if (const auto it = by_key.find(v.transcript_key); it != by_key.end())
            rec["stage2_response"] = it->second->scored_text();
        out += rec.dump() + "\n";
    }
    return out;
}

Adjudications parse_adjudication(std::string_view text) {
    Adjudications out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(n, e.what());
        }
        if (!j.contains("label") || j["label"].is_null()) continue;
        std::string label = trim(j["label"].get<std::string>());
        std::transform(label.begin(), label.end(), label.begin(), [](unsigned char c) { return std::toupper(c); });
        if (label == "SAME")
            out[j.at("key").get<std::string>()] = ErrorClass::SameAsStage1;
        else if (label == "DIFFERENT")
            out[j.at("key").get<std::string>()] = ErrorClass::NewError;
        else
            throw ParseError(n, "label must be SAME or DIFFERENT, got '" + label + "'");
    }
    return out;
}

}  // namespace swapprobe
