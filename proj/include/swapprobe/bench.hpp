#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "swapprobe/image.hpp"

namespace swapprobe {

enum class Source { MathVista, MathVerse, MathVision, MMMUPro, Custom };
enum class AnswerFormat { MultipleChoice, FreeFormNumeric, FreeFormText };

std::string_view to_string(Source s);
std::string_view to_string(AnswerFormat f);
Source parse_source(std::string_view s);
AnswerFormat parse_answer_format(std::string_view s);

/// The four benchmark sources, in table order.
inline constexpr Source kBenchSources[] = {Source::MathVista, Source::MathVerse, Source::MathVision,
                                           Source::MMMUPro};

/// One benchmark triplet plus its two divergent ground truths.
struct ProbeInstance {
    std::string id;
    Source source = Source::Custom;
    std::string image_a;  // path relative to the manifest's image_root, or a URI
    std::string image_b;
    std::string question;
    std::string answer_a;
    std::string answer_b;
    AnswerFormat answer_format = AnswerFormat::FreeFormText;
    Dimensions resolution;
    std::optional<std::string> image_a_sha256;
    std::optional<std::string> image_b_sha256;
    std::vector<std::string> options;  // multiple-choice options, if stored separately

    friend bool operator==(const ProbeInstance&, const ProbeInstance&) = default;
};

struct Manifest {
    std::string version = "1";
    std::filesystem::path image_root;
    std::vector<ProbeInstance> instances;

    /// Resolves an image reference against image_root. URIs pass through.
    std::string resolve(const std::string& ref) const;

    friend bool operator==(const Manifest&, const Manifest&) = default;
};

// -- canonicalization -------------------------------------------------------

/// Deterministic local answer canonicalizer. Text: trim, collapse inner
/// whitespace, case-fold. Numeric: parse-and-reprint (so "5" and "5.0" agree);
/// falls back to the text rule when no number parses. Multiple choice: the
/// single option letter, upper-case.
std::string canonical_answer(std::string_view answer, AnswerFormat format);
bool answers_equivalent(std::string_view lhs, std::string_view rhs, AnswerFormat format);

/// Leading numeric value of s after stripping currency, thousands separators,
/// percent and degree signs.
std::optional<double> parse_numeric(std::string_view s);

// -- manifest I/O -----------------------------------------------------------

struct LoadOptions {
    bool check_images = true;  // decode every image and compare resolutions / hashes
};

/// Reads a line-delimited manifest (one header record, then one record per
/// instance). Relative image_root is resolved against the manifest's directory.
/// Throws ParseError, IntegrityError, or IoError.
Manifest load_manifest(const std::filesystem::path& path, const LoadOptions& opts = {});
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                        const LoadOptions& opts = {});

std::string serialize_manifest(const Manifest& manifest);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Invariants that need no image decoding: unique ids, distinct canonical answers.
/// Returns the offending ids (empty when clean).
std::vector<std::string> find_static_violations(const std::vector<ProbeInstance>& instances);

struct ResolutionCheck {
    bool pass = false;
    Dimensions a;
    Dimensions b;
    Dimensions recorded;
    std::string message;
};

/// Decodes both images; passes iff their pixel dimensions match each other and
/// the recorded resolution. Undecodable images throw IoError rather than fail.
ResolutionCheck validate_resolution(const ProbeInstance& inst, const Manifest& manifest);

}  // namespace swapprobe
