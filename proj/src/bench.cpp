#include "swapprobe/bench.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "swapprobe/errors.hpp"

namespace swapprobe {

using json = nlohmann::json;

std::string_view to_string(Source s) {
    switch (s) {
        case Source::MathVista: return "MathVista";
        case Source::MathVerse: return "MathVerse";
        case Source::MathVision: return "MathVision";
        case Source::MMMUPro: return "MMMU-Pro";
        case Source::Custom: return "Custom";
    }
    return "Custom";
}

std::string_view to_string(AnswerFormat f) {
    switch (f) {
        case AnswerFormat::MultipleChoice: return "multiple_choice";
        case AnswerFormat::FreeFormNumeric: return "free_form_numeric";
        case AnswerFormat::FreeFormText: return "free_form_text";
    }
    return "free_form_text";
}

Source parse_source(std::string_view s) {
    for (Source v : {Source::MathVista, Source::MathVerse, Source::MathVision, Source::MMMUPro,
                     Source::Custom})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown source '" + std::string(s) + "'");
}

AnswerFormat parse_answer_format(std::string_view s) {
    for (AnswerFormat v : {AnswerFormat::MultipleChoice, AnswerFormat::FreeFormNumeric,
                           AnswerFormat::FreeFormText})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown answer_format '" + std::string(s) + "'");
}

std::string Manifest::resolve(const std::string& ref) const {
    if (ref.find("://") != std::string::npos) {
        if (ref.rfind("file://", 0) == 0) return ref.substr(7);
        return ref;
    }
    const std::filesystem::path p(ref);
    if (p.is_absolute() || image_root.empty()) return p.string();
    return (image_root / p).string();
}

// -- canonicalization -------------------------------------------------------

namespace {

std::string collapse_whitespace(std::string_view s) {
    std::string out;
    for (const auto& w : split_words(s)) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

std::string canonical_text(std::string_view s) {
    std::string t = to_lower(collapse_whitespace(s));
    while (!t.empty() && (t.back() == '.' || t.back() == ',')) t.pop_back();
    return t;
}

std::string format_number(double v) {
    if (v == 0.0) v = 0.0;  // fold -0
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

std::optional<char> option_letter(std::string_view s) {
    std::string t = trim(s);
    while (!t.empty() && (t.front() == '(' || t.front() == '[')) t.erase(t.begin());
    if (t.empty()) return std::nullopt;
    const auto letter = static_cast<unsigned char>(t.front());
    if (std::isalpha(letter) && (t.size() == 1 || !std::isalnum(static_cast<unsigned char>(t[1]))))
        return static_cast<char>(std::toupper(letter));
    // "Option C", "choice (b)"
    const auto words = split_words(t);
    for (auto it = words.rbegin(); it != words.rend(); ++it) {
        std::string w = *it;
        std::erase_if(w, [](char c) { return c == '(' || c == ')' || c == '.' || c == ':'; });
        if (w.size() == 1 && std::isalpha(static_cast<unsigned char>(w[0])))
            return static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    }
    return std::nullopt;
}

}  // namespace

std::optional<double> parse_numeric(std::string_view s) {
    std::string t;
    for (char c : trim(s)) {
        if (c == ',' || c == '$' || c == ' ') continue;
        t.push_back(c);
    }
    std::size_t start = 0;
    if (!t.empty() && t[0] == '+') start = 1;
    double v = 0.0;
    const char* first = t.data() + start;
    const char* last = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr == first) return std::nullopt;
    std::string_view rest(ptr, static_cast<std::size_t>(last - ptr));
    // Allow trailing units that cannot be part of another number.
    if (!rest.empty() && (std::isdigit(static_cast<unsigned char>(rest[0])) || rest[0] == '.'))
        return std::nullopt;
    return v;
}

std::string canonical_answer(std::string_view answer, AnswerFormat format) {
    switch (format) {
        case AnswerFormat::FreeFormNumeric:
            if (auto v = parse_numeric(answer)) return format_number(*v);
            return canonical_text(answer);
        case AnswerFormat::MultipleChoice:
            if (auto c = option_letter(answer)) return std::string(1, *c);
            return canonical_text(answer);
        case AnswerFormat::FreeFormText:
            return canonical_text(answer);
    }
    return canonical_text(answer);
}

bool answers_equivalent(std::string_view lhs, std::string_view rhs, AnswerFormat format) {
    if (format == AnswerFormat::FreeFormNumeric) {
        auto a = parse_numeric(lhs);
        auto b = parse_numeric(rhs);
        if (a && b) return *a == *b;
    }
    return canonical_answer(lhs, format) == canonical_answer(rhs, format);
}

// -- manifest I/O -----------------------------------------------------------

namespace {

std::string require_string(const json& rec, const char* key, std::size_t line) {
    auto it = rec.find(key);
    if (it == rec.end()) throw ParseError(line, std::string("missing field '") + key + "'");
    if (!it->is_string()) throw ParseError(line, std::string("field '") + key + "' must be a string");
    return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& rec, const char* key, std::size_t line) {
    auto it = rec.find(key);
    if (it == rec.end() || it->is_null()) return std::nullopt;
    if (!it->is_string()) throw ParseError(line, std::string("field '") + key + "' must be a string");
    return it->get<std::string>();
}

ProbeInstance parse_instance(const json& rec, std::size_t line) {
    ProbeInstance inst;
    inst.id = require_string(rec, "id", line);
    try {
        inst.source = parse_source(require_string(rec, "source", line));
        inst.answer_format = parse_answer_format(require_string(rec, "answer_format", line));
    } catch (const ConfigError& e) {
        throw ParseError(line, e.what());
    }
    inst.image_a = require_string(rec, "image_a", line);
    inst.image_b = require_string(rec, "image_b", line);
    inst.question = require_string(rec, "question", line);
    inst.answer_a = require_string(rec, "answer_a", line);
    inst.answer_b = require_string(rec, "answer_b", line);
    auto res = rec.find("resolution");
    if (res == rec.end() || !res->is_array() || res->size() != 2 || !(*res)[0].is_number_integer() ||
        !(*res)[1].is_number_integer())
        throw ParseError(line, "field 'resolution' must be [width, height]");
    inst.resolution = {(*res)[0].get<int>(), (*res)[1].get<int>()};
    inst.image_a_sha256 = optional_string(rec, "image_a_sha256", line);
    inst.image_b_sha256 = optional_string(rec, "image_b_sha256", line);
    if (auto opts = rec.find("options"); opts != rec.end() && !opts->is_null()) {
        if (!opts->is_array()) throw ParseError(line, "field 'options' must be an array");
        for (const auto& o : *opts) {
            if (!o.is_string()) throw ParseError(line, "options must be strings");
            inst.options.push_back(o.get<std::string>());
        }
    }
    return inst;
}

json instance_to_json(const ProbeInstance& inst) {
    json j = {{"type", "instance"},
              {"id", inst.id},
              {"source", to_string(inst.source)},
              {"image_a", inst.image_a},
              {"image_b", inst.image_b},
              {"question", inst.question},
              {"answer_a", inst.answer_a},
              {"answer_b", inst.answer_b},
              {"answer_format", to_string(inst.answer_format)},
              {"resolution", {inst.resolution.width, inst.resolution.height}}};
    if (inst.image_a_sha256) j["image_a_sha256"] = *inst.image_a_sha256;
    if (inst.image_b_sha256) j["image_b_sha256"] = *inst.image_b_sha256;
    if (!inst.options.empty()) j["options"] = inst.options;
    return j;
}

bool is_local(const std::string& resolved) { return resolved.find("://") == std::string::npos; }

}  // namespace

std::vector<std::string> find_static_violations(const std::vector<ProbeInstance>& instances) {
    std::vector<std::string> bad;
    std::set<std::string> seen;
    for (const auto& inst : instances) {
        const bool duplicate = !seen.insert(inst.id).second;
        const bool same_answer = answers_equivalent(inst.answer_a, inst.answer_b, inst.answer_format);
        if (duplicate || same_answer || inst.id.empty()) bad.push_back(inst.id);
    }
    return bad;
}

ResolutionCheck validate_resolution(const ProbeInstance& inst, const Manifest& manifest) {
    ResolutionCheck check;
    check.recorded = inst.resolution;
    const Image a = load_image(manifest.resolve(inst.image_a));
    const Image b = load_image(manifest.resolve(inst.image_b));
    check.a = {a.width, a.height};
    check.b = {b.width, b.height};
    check.pass = check.a == check.b && check.a == check.recorded;
    if (!check.pass) {
        std::ostringstream ss;
        ss << inst.id << ": image_a " << check.a.width << "x" << check.a.height << ", image_b "
           << check.b.width << "x" << check.b.height << ", recorded " << check.recorded.width << "x"
           << check.recorded.height;
        check.message = ss.str();
    }
    return check;
}

Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                        const LoadOptions& opts) {
    Manifest m;
    bool have_header = false;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(line_no, std::string("malformed record: ") + e.what());
        }
        if (!rec.is_object()) throw ParseError(line_no, "record is not an object");
        const std::string type = rec.value("type", std::string(have_header ? "instance" : ""));
        if (!have_header) {
            if (type != "header") throw ParseError(line_no, "first record must be the header");
            m.version = require_string(rec, "version", line_no);
            const std::filesystem::path root = rec.value("image_root", std::string());
            if (root.empty()) m.image_root = base_dir;
            else m.image_root = root.is_absolute() ? root : base_dir / root;
            have_header = true;
            continue;
        }
        if (type == "header") throw ParseError(line_no, "duplicate header record");
        if (type != "instance") throw ParseError(line_no, "unknown record type '" + type + "'");
        m.instances.push_back(parse_instance(rec, line_no));
    }
    if (!have_header) throw ParseError(line_no == 0 ? 1 : line_no, "missing header record");

    if (auto bad = find_static_violations(m.instances); !bad.empty()) {
        std::string msg = "invariant violations (duplicate id or equal answers):";
        for (const auto& id : bad) msg += " " + id;
        throw IntegrityError(std::move(bad), msg);
    }

    if (opts.check_images) {
        std::vector<std::string> bad;
        std::string msg;
        for (const auto& inst : m.instances) {
            const std::string pa = m.resolve(inst.image_a);
            const std::string pb = m.resolve(inst.image_b);
            if (!is_local(pa) || !is_local(pb)) continue;
            const auto check = validate_resolution(inst, m);
            bool ok = check.pass;
            if (!ok) msg += " [" + check.message + "]";
            if (inst.image_a_sha256 && sha256_hex(read_file(pa)) != *inst.image_a_sha256) {
                ok = false;
                msg += " [" + inst.id + ": image_a content hash mismatch]";
            }
            if (inst.image_b_sha256 && sha256_hex(read_file(pb)) != *inst.image_b_sha256) {
                ok = false;
                msg += " [" + inst.id + ": image_b content hash mismatch]";
            }
            if (!ok) bad.push_back(inst.id);
        }
        if (!bad.empty()) throw IntegrityError(std::move(bad), "image integrity violations:" + msg);
    }
    return m;
}

Manifest load_manifest(const std::filesystem::path& path, const LoadOptions& opts) {
    const std::string text = read_text_file(path);
    return parse_manifest(text, path.parent_path(), opts);
}

std::string serialize_manifest(const Manifest& manifest) {
    std::string out;
    json header = {{"type", "header"},
                   {"version", manifest.version},
                   {"image_root", manifest.image_root.string()}};
    out += header.dump() + "\n";
    for (const auto& inst : manifest.instances) out += instance_to_json(inst).dump() + "\n";
    return out;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    write_file(path, serialize_manifest(manifest));
}

}  // namespace swapprobe
