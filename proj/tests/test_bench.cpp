#include <doctest.h>

#include "support.hpp"
#include "swapprobe/bench.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/image.hpp"
#include "swapprobe/synthetic.hpp"

using namespace swapprobe;
using support::TempDir;
namespace fs = std::filesystem;

namespace {

const char* kHeader = R"({"type":"header","version":"1"})";

std::string instance_line(const std::string& id, const std::string& a, const std::string& b,
                          const std::string& format = "free_form_numeric") {
    return R"({"type":"instance","id":")" + id + R"(","source":"MathVista","image_a":"a.png","image_b":"b.png",)" +
           R"("question":"Q?","answer_a":")" + a + R"(","answer_b":")" + b + R"(","answer_format":")" + format +
           R"(","resolution":[8,8]})";
}

}  // namespace

TEST_CASE("numeric answers canonicalize by value") {
    CHECK(answers_equivalent("5", "5.0", AnswerFormat::FreeFormNumeric));
    CHECK(answers_equivalent("1,234", "1234", AnswerFormat::FreeFormNumeric));
    CHECK(answers_equivalent("$12", "12", AnswerFormat::FreeFormNumeric));
    CHECK_FALSE(answers_equivalent("5", "6", AnswerFormat::FreeFormNumeric));
    CHECK(*parse_numeric("45°") == doctest::Approx(45.0));
    CHECK(*parse_numeric("12.5%") == doctest::Approx(12.5));
    CHECK_FALSE(parse_numeric("abc").has_value());
}

TEST_CASE("text and option answers canonicalize") {
    CHECK(canonical_answer("  The   Cat. ", AnswerFormat::FreeFormText) == "the cat");
    CHECK(canonical_answer("(b)", AnswerFormat::MultipleChoice) == "B");
    CHECK(canonical_answer("Option C", AnswerFormat::MultipleChoice) == "C");
    CHECK(answers_equivalent("a", "(A)", AnswerFormat::MultipleChoice));
}

TEST_CASE("manifest round-trips through serialization") {
    TempDir dir;
    const Manifest written = synthetic::write_manifest(dir.path(), {.instances = 6});
    const Manifest loaded = load_manifest(dir / "manifest.jsonl");
    CHECK(loaded.instances == written.instances);
    CHECK(fs::equivalent(loaded.image_root, dir.path()));

    const Manifest again = parse_manifest(serialize_manifest(loaded), dir.path(), {.check_images = false});
    CHECK(again.instances == loaded.instances);
}

TEST_CASE("malformed records report their line") {
    const std::string text = std::string(kHeader) + "\n" + instance_line("x1", "1", "2") + "\n{not json\n";
    try {
        parse_manifest(text, ".", {.check_images = false});
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse_manifest(instance_line("x1", "1", "2"), ".", {.check_images = false}), ParseError);
}

TEST_CASE("duplicate ids and equal answers are integrity errors") {
    const std::string dup = std::string(kHeader) + "\n" + instance_line("x1", "1", "2") + "\n" +
                            instance_line("x1", "3", "4") + "\n";
    CHECK_THROWS_AS(parse_manifest(dup, ".", {.check_images = false}), IntegrityError);

    const std::string same = std::string(kHeader) + "\n" + instance_line("x2", "5", "5.0") + "\n";
    try {
        parse_manifest(same, ".", {.check_images = false});
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        REQUIRE(e.ids().size() == 1);
        CHECK(e.ids()[0] == "x2");
    }
}

TEST_CASE("resolution mismatch names the offending instances") {
    TempDir dir;
    Manifest m = synthetic::write_manifest(dir.path(), {.instances = 3});
    save_png(Image(40, 30), dir / m.instances[1].image_b);
    m.instances[1].image_b_sha256.reset();
    save_manifest(m, dir / "manifest.jsonl");

    const auto check = validate_resolution(m.instances[1], m);
    CHECK_FALSE(check.pass);
    CHECK(check.b == Dimensions{40, 30});
    CHECK(validate_resolution(m.instances[0], m).pass);

    try {
        load_manifest(dir / "manifest.jsonl");
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(e.ids() == std::vector<std::string>{m.instances[1].id});
    }
    CHECK_NOTHROW(load_manifest(dir / "manifest.jsonl", {.check_images = false}));
}

TEST_CASE("content hashes are verified") {
    TempDir dir;
    Manifest m = synthetic::write_manifest(dir.path(), {.instances = 2});
    m.instances[0].image_a_sha256 = std::string(64, '0');
    save_manifest(m, dir / "manifest.jsonl");
    CHECK_THROWS_AS(load_manifest(dir / "manifest.jsonl"), IntegrityError);
}

TEST_CASE("truncated images fail to decode") {
    TempDir dir;
    const Bytes png = encode_png(synthetic::make_label_image("17", 3));
    CHECK(decode_image(png).width == 96);
    const Bytes cut(png.begin(), png.begin() + static_cast<std::ptrdiff_t>(png.size() / 2));
    CHECK_THROWS_AS(decode_image(cut), IoError);
    CHECK_THROWS_AS(load_image(dir / "missing.png"), IoError);
}

TEST_CASE("label images carry their label") {
    const Image img = synthetic::make_label_image("123", 9);
    CHECK(synthetic::read_label(img) == std::optional<std::string>("123"));
    CHECK_FALSE(synthetic::read_label(synthetic::make_unrelated_image(4)).has_value());
}

TEST_CASE("URIs pass through resolve") {
    Manifest m;
    m.image_root = "/data";
    CHECK(m.resolve("https://example.org/x.png") == "https://example.org/x.png");
    CHECK(m.resolve("x.png") == "/data/x.png");
}
