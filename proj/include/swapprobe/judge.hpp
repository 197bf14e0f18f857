#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/bench.hpp"
#include "swapprobe/inference.hpp"
#include "swapprobe/protocol.hpp"

namespace swapprobe {

enum class CorrectVs { AnswerA, AnswerB, Neither };
enum class ErrorClass { SameAsStage1, NewError };
enum class JudgeMode { Rule, Llm, Human };
enum class JudgeTask { Correctness, Detection, SameError };
enum class JudgeLabel { Correct, Incorrect, Detected, NotDetected, Same, Different, Abstain };

std::string_view to_string(CorrectVs c);
std::string_view to_string(ErrorClass e);
std::string_view to_string(JudgeMode m);
std::string_view to_string(JudgeTask t);
std::string_view to_string(JudgeLabel l);
JudgeMode parse_judge_mode(std::string_view s);

struct Verdict {
    std::string transcript_key;
    std::string instance_id;
    Source source = Source::Custom;
    Setting setting = Setting::StandardOnA;
    int repeat = 0;
    std::optional<double> retention;
    std::optional<int> prompt_variant_id;
    std::string extracted_answer;
    CorrectVs correct_vs = CorrectVs::Neither;
    std::optional<bool> detected_change;         // distinct-image control only
    std::optional<ErrorClass> error_class;       // both stages incorrect only
    bool abstained = false;                      // a judge task that applied produced no label
    JudgeMode judge_mode = JudgeMode::Rule;
    std::string judge_raw;

    /// Correct against the answer this setting is scored on (A for standard_on_a, B otherwise).
    bool correct() const;

    friend bool operator==(const Verdict&, const Verdict&) = default;
};

nlohmann::json to_json(const Verdict& v);
Verdict verdict_from_json(const nlohmann::json& j);
void save_verdicts(const std::vector<Verdict>& vs, const std::filesystem::path& path);
std::vector<Verdict> load_verdicts(const std::filesystem::path& path);

/// Final answer in `text`. Prefers the last \boxed{...} span, then the last
/// "answer is ..." / "Answer: ..." span. Multiple choice yields the last
/// standalone option letter, numeric the last number, text the span verbatim.
/// Returns "" when nothing can be extracted.
std::string extract_answer(std::string_view text, AnswerFormat format);

/// Rule-based comparison of an extracted answer with answer_b, then answer_a.
CorrectVs score(std::string_view extracted, const ProbeInstance& inst);

/// Phrases by which a response says the image is no longer the one it reasoned about.
bool mentions_image_change(std::string_view text);

/// Label in a constrained judge reply; Abstain unless exactly one of the task's labels occurs.
JudgeLabel parse_judge_label(std::string_view reply, JudgeTask task);

/// Prompt templates with {question}, {reference} and {candidate} placeholders.
struct JudgePrompts {
    std::string correctness;
    std::string detection;
    std::string same_error;

    static JudgePrompts defaults();
    /// Reads correctness.txt / detection.txt / same_error.txt from dir; missing files keep defaults.
    static JudgePrompts load(const std::filesystem::path& dir);
    const std::string& for_task(JudgeTask t) const;
};

std::string fill_judge_prompt(std::string_view tmpl, std::string_view question, std::string_view reference,
                              std::string_view candidate);

struct JudgeRequest {
    std::string question;
    std::string reference;
    std::string candidate;
    JudgeTask task = JudgeTask::Correctness;
};

struct JudgeResult {
    JudgeLabel label = JudgeLabel::Abstain;
    std::string raw;
};

class LlmJudge {
public:
    LlmJudge(InferenceClient client, InferenceParams params, JudgePrompts prompts)
        : client_(std::move(client)), params_(std::move(params)), prompts_(std::move(prompts)) {}

    /// Transport and server errors become Abstain.
    JudgeResult judge(const JudgeRequest& req) const;
    /// Order-preserving, at most max_in_flight concurrent calls.
    std::vector<JudgeResult> judge_many(const std::vector<JudgeRequest>& reqs, int max_in_flight) const;

private:
    InferenceClient client_;
    InferenceParams params_;
    JudgePrompts prompts_;
};

/// Human same/different labels keyed by transcript key.
using Adjudications = std::map<std::string, ErrorClass>;

struct JudgeOptions {
    JudgeMode mode = JudgeMode::Rule;
    const LlmJudge* llm = nullptr;  // required for JudgeMode::Llm
    int max_in_flight = 4;
    std::optional<TemplateConfig> tmpl;  // strips reasoning blocks before extraction
    Adjudications adjudications;          // used in JudgeMode::Human
};

/// One Verdict per non-failed transcript, in transcript order.
std::vector<Verdict> judge_transcripts(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                                       const JudgeOptions& options);

/// Records that need a same/different decision, for human adjudication.
std::string export_adjudication(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                                const std::vector<Verdict>& verdicts);
/// Reads {"key": ..., "label": "SAME" | "DIFFERENT"} lines; unlabeled lines are skipped.
Adjudications parse_adjudication(std::string_view text);

}  // namespace swapprobe
