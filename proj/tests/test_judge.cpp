#include <doctest.h>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/judge.hpp"

using namespace swapprobe;
using json = nlohmann::json;
using support::MockModel;
using support::TempDir;

namespace {

ProbeInstance numeric(const std::string& id, const std::string& a, const std::string& b) {
    ProbeInstance p;
    p.id = id;
    p.source = Source::MathVerse;
    p.question = "How long is the side?";
    p.answer_a = a;
    p.answer_b = b;
    p.answer_format = AnswerFormat::FreeFormNumeric;
    return p;
}

Transcript stage(const std::string& id, Setting s, const std::string& text, int repeat = 0) {
    Transcript t;
    t.instance_id = id;
    t.setting = s;
    t.repeat = repeat;
    if (s == Setting::StandardOnA) {
        t.r_a = text;
    } else {
        t.r_a = "earlier";
        t.r_b = text;
    }
    if (s == Setting::Probe) {
        t.retention = 1.0;
        t.prompt_variant_id = 0;
    }
    return t;
}

}  // namespace

TEST_CASE("answer extraction") {
    CHECK(extract_answer("so \\boxed{12} and later The answer is 14.", AnswerFormat::FreeFormNumeric) == "12");
    CHECK(extract_answer("The answer is 1,250 meters.", AnswerFormat::FreeFormNumeric) == "1250");
    CHECK(extract_answer("First 3, then 4. Final answer: 7.5", AnswerFormat::FreeFormNumeric) == "7.5");
    CHECK(extract_answer("the area is 9 and the perimeter is 12", AnswerFormat::FreeFormNumeric) == "12");
    CHECK(extract_answer("no numbers here", AnswerFormat::FreeFormNumeric).empty());
    CHECK(extract_answer("Comparing A and B, the answer is (C).", AnswerFormat::MultipleChoice) == "C");
    CHECK(extract_answer("I pick option (D) over (B)", AnswerFormat::MultipleChoice) == "B");
    CHECK(extract_answer("Answer: a right triangle\nmore text", AnswerFormat::FreeFormText) == "a right triangle");
    CHECK(extract_answer("\\boxed{\\frac{1}{2}}", AnswerFormat::FreeFormText) == "\\frac{1}{2}");
}

TEST_CASE("scoring prefers answer_b, then answer_a") {
    const auto inst = numeric("x", "5", "8");
    CHECK(score("8.0", inst) == CorrectVs::AnswerB);
    CHECK(score("5", inst) == CorrectVs::AnswerA);
    CHECK(score("6", inst) == CorrectVs::Neither);
    CHECK(score("", inst) == CorrectVs::Neither);
}

TEST_CASE("judge labels need exactly one match") {
    CHECK(parse_judge_label("CORRECT", JudgeTask::Correctness) == JudgeLabel::Correct);
    CHECK(parse_judge_label("The response is INCORRECT.", JudgeTask::Correctness) == JudgeLabel::Incorrect);
    CHECK(parse_judge_label("CORRECT or INCORRECT", JudgeTask::Correctness) == JudgeLabel::Abstain);
    CHECK(parse_judge_label("correct", JudgeTask::Correctness) == JudgeLabel::Abstain);
    CHECK(parse_judge_label("NOT_DETECTED", JudgeTask::Detection) == JudgeLabel::NotDetected);
    CHECK(parse_judge_label("DETECTED", JudgeTask::Detection) == JudgeLabel::Detected);
    CHECK(parse_judge_label("SAME", JudgeTask::SameError) == JudgeLabel::Same);
    CHECK(parse_judge_label("DIFFERENT", JudgeTask::SameError) == JudgeLabel::Different);
    CHECK(parse_judge_label("", JudgeTask::SameError) == JudgeLabel::Abstain);
}

TEST_CASE("change mentions") {
    CHECK(mentions_image_change("Hmm, the image has changed since I last looked."));
    CHECK(mentions_image_change("This is a different figure from before."));
    CHECK(mentions_image_change("The picture no longer shows a triangle."));
    CHECK_FALSE(mentions_image_change("Looking at the image again, the answer is 4."));
}

TEST_CASE("judge prompts fill placeholders once") {
    CHECK(fill_judge_prompt("Q={question} R={reference} C={candidate}", "{candidate}", "r", "c") ==
          "Q={candidate} R=r C=c");
    TempDir dir;
    write_file(dir / "detection.txt", "custom {candidate}");
    const auto p = JudgePrompts::load(dir.path());
    CHECK(p.detection == "custom {candidate}");
    CHECK(p.correctness == JudgePrompts::defaults().correctness);
    const auto shipped = JudgePrompts::load(support::source_path("config/judge"));
    CHECK(shipped.correctness == JudgePrompts::defaults().correctness);
    CHECK(shipped.detection == JudgePrompts::defaults().detection);
    CHECK(shipped.same_error == JudgePrompts::defaults().same_error);
}

TEST_CASE("rule judging of a run") {
    Manifest m;
    m.instances = {numeric("i1", "5", "8"), numeric("i2", "3", "9")};
    std::vector<Transcript> ts = {
        stage("i1", Setting::StandardOnA, "The answer is 5."),
        stage("i1", Setting::Probe, "The answer is 5."),             // anchored on A
        stage("i1", Setting::MultiTurn, "Looking again, the answer is 8."),
        stage("i2", Setting::StandardOnA, "The answer is 4."),       // wrong
        stage("i2", Setting::Probe, "The answer is 4."),             // same error
        stage("i2", Setting::MultiTurn, "The answer is 7."),         // new error
        stage("i2", Setting::DistinctProbe, "The image has changed, so I cannot answer."),
    };
    ts.push_back(stage("i2", Setting::Probe, "x"));
    ts.back().retention = 0.5;
    ts.back().failed = true;

    const auto vs = judge_transcripts(m, ts, {});
    REQUIRE(vs.size() == 7);
    CHECK(vs[0].correct());
    CHECK(vs[1].correct_vs == CorrectVs::AnswerA);
    CHECK_FALSE(vs[1].correct());
    CHECK_FALSE(vs[1].error_class.has_value());
    CHECK(vs[2].correct());
    CHECK_FALSE(vs[3].correct());
    CHECK(vs[4].error_class == ErrorClass::SameAsStage1);
    CHECK(vs[5].error_class == ErrorClass::NewError);
    CHECK(vs[6].detected_change == true);
    CHECK(vs[6].correct_vs == CorrectVs::Neither);
    for (const auto& v : vs) CHECK(v.judge_mode == JudgeMode::Rule);

    TempDir dir;
    save_verdicts(vs, dir / "v.jsonl");
    CHECK(load_verdicts(dir / "v.jsonl") == vs);
}

TEST_CASE("human adjudication") {
    Manifest m;
    m.instances = {numeric("i2", "3", "9")};
    std::vector<Transcript> ts = {stage("i2", Setting::StandardOnA, "The answer is 4."),
                                  stage("i2", Setting::Probe, "The answer is 4."),
                                  stage("i2", Setting::MultiTurn, "The answer is 7.")};
    const auto rule = judge_transcripts(m, ts, {});
    const std::string exported = export_adjudication(m, ts, rule);
    std::vector<json> lines;
    std::istringstream in(exported);
    for (std::string line; std::getline(in, line);) lines.push_back(json::parse(line));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0]["label"].is_null());
    CHECK(lines[0]["stage1_answer"] == "4");

    lines[0]["label"] = "DIFFERENT";
    const std::string labelled = lines[0].dump() + "\n" + lines[1].dump() + "\n";
    JudgeOptions opts;
    opts.mode = JudgeMode::Human;
    opts.adjudications = parse_adjudication(labelled);
    CHECK(opts.adjudications.size() == 1);
    const auto vs = judge_transcripts(m, ts, opts);
    CHECK(vs[1].error_class == ErrorClass::NewError);
    CHECK(vs[2].abstained);
    CHECK_FALSE(vs[2].error_class.has_value());
}

TEST_CASE("llm judge against a scripted endpoint") {
    auto opts = support::mock_options(mock::Behavior::Echo);
    opts.sentinel = "DETECTED";
    MockModel mock(opts);
    const LlmJudge judge(mock.client(EndpointMode::Chat), InferenceParams{.temperature = 0.0}, JudgePrompts::defaults());
    const auto r = judge.judge({"Q", "", "It changed.", JudgeTask::Detection});
    CHECK(r.label == JudgeLabel::Detected);
    CHECK(r.raw == "DETECTED");
    const json body = json::parse(mock.server().requests().at(0).body);
    CHECK(body["messages"].back()["content"].get<std::string>().find("It changed.") != std::string::npos);

    // the same reply is not a correctness label
    CHECK(judge.judge({"Q", "5", "five", JudgeTask::Correctness}).label == JudgeLabel::Abstain);

    const auto many = judge.judge_many(std::vector<JudgeRequest>(9, {"Q", "", "x", JudgeTask::Detection}), 3);
    REQUIRE(many.size() == 9);
    for (const auto& x : many) CHECK(x.label == JudgeLabel::Detected);

    EndpointConfig dead;
    dead.base_url = "http://127.0.0.1:1/v1";
    dead.max_retries = 0;
    const LlmJudge offline(InferenceClient(dead, support::synthetic_template()), {}, JudgePrompts::defaults());
    CHECK(offline.judge({"Q", "", "x", JudgeTask::Detection}).label == JudgeLabel::Abstain);
}

TEST_CASE("llm mode routes only undecided cases to the judge") {
    auto opts = support::mock_options(mock::Behavior::Echo);
    opts.sentinel = "CORRECT";
    MockModel mock(opts);
    const LlmJudge judge(mock.client(EndpointMode::Chat), {}, JudgePrompts::defaults());
    Manifest m;
    m.instances = {numeric("i1", "5", "8")};
    std::vector<Transcript> ts = {stage("i1", Setting::StandardOnA, "The answer is 5."),
                                  stage("i1", Setting::Probe, "The answer is eight, i.e. 8.0 cm, roughly 8.1")};
    JudgeOptions o;
    o.mode = JudgeMode::Llm;
    o.llm = &judge;
    const auto vs = judge_transcripts(m, ts, o);
    CHECK(mock.server().requests().size() == 1);
    CHECK(vs[0].correct());
    CHECK(vs[1].correct());
    CHECK(vs[1].judge_raw == "CORRECT");
    CHECK_THROWS_AS(judge_transcripts(m, ts, {.mode = JudgeMode::Llm}), ConfigError);
}

TEST_CASE("reasoning blocks are removed before extraction") {
    Manifest m;
    m.instances = {numeric("i1", "5", "8")};
    std::vector<Transcript> ts = {stage("i1", Setting::StandardOnA, "<think>maybe 8</think>The answer is 5.")};
    JudgeOptions o;
    o.tmpl = support::qwen_template();
    CHECK(judge_transcripts(m, ts, o)[0].extracted_answer == "5");
}
