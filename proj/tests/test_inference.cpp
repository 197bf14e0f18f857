#include <doctest.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "support.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/inference.hpp"
#include "swapprobe/synthetic.hpp"

using namespace swapprobe;
using json = nlohmann::json;
using support::MockModel;
using support::TempDir;

namespace {

const std::string kQ = "What is the value shown?";

std::string label_png(const TempDir& dir, const std::string& label) {
    const auto path = dir / ("img_" + label + ".png");
    save_png(synthetic::make_label_image(label, 5), path);
    return path.string();
}

}  // namespace

TEST_CASE("raw completion bodies carry the flattened prompt and images") {
    TempDir dir;
    const auto tmpl = support::synthetic_template();
    EndpointConfig e;
    e.base_url = "http://127.0.0.1:9/v1";
    e.model_name = "m";
    e.mode = EndpointMode::CompletionRaw;
    const InferenceClient client(e, tmpl);
    const std::string img = label_png(dir, "12");

    const auto probe = render_probe(tmpl.markers, img, kQ, "Some reasoning.", "Wait.");
    const json body = json::parse(client.request_body(probe, InferenceParams{}));
    CHECK(body["prompt"] == flatten(probe, tmpl.markers));
    CHECK(body["model"] == "m");
    CHECK(body["temperature"] == doctest::Approx(0.1));
    REQUIRE(body["images"].size() == 1);
    CHECK(body["images"][0].get<std::string>().rfind("data:image/png;base64,", 0) == 0);
    CHECK(client.request_path(probe) == "/completions");

    const auto standard = render_standard(tmpl.markers, img, kQ);
    const json sb = json::parse(client.request_body(standard, InferenceParams{}));
    CHECK(sb["prompt"] == flatten(standard, tmpl.markers) + tmpl.markers.response_start);
}

TEST_CASE("chat endpoints accept closed sequences and refuse continuations") {
    TempDir dir;
    const auto tmpl = support::synthetic_template();
    EndpointConfig e;
    e.base_url = "http://127.0.0.1:9/v1";
    e.mode = EndpointMode::Chat;
    const InferenceClient client(e, tmpl);
    const std::string img = label_png(dir, "7");

    CHECK_THROWS_AS(client.request_body(render_probe(tmpl.markers, img, kQ, "R", "P"), {}), ModeMismatch);

    const json body = json::parse(client.request_body(render_multi_turn(tmpl.markers, img, kQ, "R", "U"), {}));
    const auto& msgs = body["messages"];
    REQUIRE(msgs.size() == 3);
    CHECK(msgs[0]["role"] == "user");
    CHECK(msgs[0]["content"][0]["type"] == "image_url");
    CHECK(msgs[0]["content"][1]["text"] == kQ);
    CHECK(msgs[1] == json{{"role", "assistant"}, {"content", "R"}});
    CHECK(msgs[2] == json{{"role", "user"}, {"content", "U"}});
    CHECK(client.request_path(render_standard(tmpl.markers, img, kQ)) == "/chat/completions");
}

TEST_CASE("every request re-sends the full context") {
    TempDir dir;
    MockModel mock(support::mock_options(mock::Behavior::LabelPixel));
    const auto client = mock.client();
    const auto m = support::synthetic_template().markers;
    const std::string a = label_png(dir, "31");
    const std::string b = label_png(dir, "64");

    const auto r_a = client.generate(render_standard(m, a, kQ), {}).text;
    CHECK(r_a == mock::reasoning_for("31"));
    const auto probe = render_probe(m, b, kQ, r_a, "Wait.");
    const auto c = client.generate(probe, {});
    CHECK(c.text.find("64") != std::string::npos);

    const auto reqs = mock.server().requests();
    REQUIRE(reqs.size() == 2);
    const json second = json::parse(reqs[1].body);
    CHECK(second["prompt"] == flatten(probe, m));
    CHECK(second["images"].size() == 1);
    CHECK(second["images"][0] == image_url_for(b));
}

TEST_CASE("transient failures are retried") {
    TempDir dir;
    auto opts = support::mock_options(mock::Behavior::Echo);
    opts.fail_first = 2;
    MockModel mock(opts);
    const auto m = support::synthetic_template().markers;
    const auto c = mock.client().generate(render_standard(m, label_png(dir, "1"), kQ), {});
    CHECK(c.text == "SENTINEL");
    CHECK(c.attempts == 3);
    CHECK(c.retries() == 2);
}

TEST_CASE("client errors are not retried") {
    TempDir dir;
    auto opts = support::mock_options(mock::Behavior::Echo);
    opts.chat_only = true;
    MockModel mock(opts);
    const auto m = support::synthetic_template().markers;
    try {
        mock.client().generate(render_standard(m, label_png(dir, "1"), kQ), {});
        FAIL("expected ServerError");
    } catch (const ServerError& e) {
        CHECK(e.status() == 404);
    }
    CHECK(mock.server().requests().size() == 1);
}

TEST_CASE("unreachable endpoints raise TransportError after retries") {
    TempDir dir;
    EndpointConfig e;
    e.base_url = "http://127.0.0.1:1/v1";
    e.mode = EndpointMode::CompletionRaw;
    e.max_retries = 1;
    e.timeout_s = 1.0;
    e.backoff_base_s = 0.01;
    const InferenceClient client(e, support::synthetic_template());
    const auto m = support::synthetic_template().markers;
    CHECK_THROWS_AS(client.generate(render_standard(m, label_png(dir, "1"), kQ), {}), TransportError);
}

TEST_CASE("batches keep order, bound concurrency and isolate failures") {
    TempDir dir;
    auto opts = support::mock_options(mock::Behavior::LabelPixel);
    opts.fail_when_contains = "POISON";
    opts.latency_ms = [](std::size_t i, const std::string&) { return static_cast<int>((i * 37) % 23); };
    MockModel mock(opts);
    auto e = mock.endpoint();
    e.max_retries = 1;
    const InferenceClient client(e, support::synthetic_template());
    const auto m = support::synthetic_template().markers;

    std::vector<RenderedSequence> seqs;
    std::vector<std::string> labels;
    for (int i = 0; i < 24; ++i) {
        labels.push_back(std::to_string(100 + i));
        const std::string q = i == 5 ? "POISON question" : kQ;
        seqs.push_back(render_standard(m, label_png(dir, labels.back()), q));
    }
    const auto items = client.run_batch(seqs, {}, 4);
    REQUIRE(items.size() == seqs.size());
    for (int i = 0; i < 24; ++i) {
        if (i == 5) {
            CHECK_FALSE(items[i].ok());
            CHECK(items[i].error_kind == "TransportError");
            continue;
        }
        REQUIRE(items[i].ok());
        CHECK(items[i].completion->text == mock::reasoning_for(labels[i]));
    }
    CHECK(mock.server().max_concurrent() <= 4);
    CHECK(mock.server().max_concurrent() >= 2);
    CHECK_THROWS_AS(client.run_batch(seqs, {}, 0), ConfigError);
}

TEST_CASE("backoff is capped, jittered and deterministic") {
    EndpointConfig e;
    e.backoff_base_s = 1.0;
    e.backoff_factor = 2.0;
    e.backoff_cap_s = 5.0;
    for (int retry = 1; retry <= 6; ++retry) {
        const double nominal = std::min(5.0, std::pow(2.0, retry - 1));
        const double d = backoff_delay_s(e, retry, 42);
        CHECK(d >= 0.5 * nominal);
        CHECK(d <= nominal);
        CHECK(d == backoff_delay_s(e, retry, 42));
    }
}

TEST_CASE("endpoint configs never serialize literal secrets") {
    EndpointConfig e = endpoint_from_json({{"base_url", "http://h/v1"}, {"auth", "sk-secret"}});
    CHECK(to_json(e)["auth"] == "<redacted>");
    e.auth = "env:MY_KEY";
    CHECK(to_json(e)["auth"] == "env:MY_KEY");
    CHECK_THROWS_AS(endpoint_from_json({{"base_url", "http://h/v1"}, {"mode", "stream"}}), ConfigError);
    CHECK_THROWS_AS(params_from_json({{"temperature", -1}}), ConfigError);
}

TEST_CASE("audit log elides inline images") {
    TempDir dir;
    MockModel mock(support::mock_options(mock::Behavior::Echo));
    auto client = mock.client();
    client.set_audit_log(dir / "audit.jsonl");
    const auto m = support::synthetic_template().markers;
    client.generate(render_standard(m, label_png(dir, "9"), kQ), {});
    const std::string log = read_text_file(dir / "audit.jsonl");
    CHECK(log.find("data:image") == std::string::npos);
    CHECK(log.find("sha256:") != std::string::npos);
    CHECK(log.find("SENTINEL") != std::string::npos);
}
