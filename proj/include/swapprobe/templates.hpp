#pragma once

#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace swapprobe {

/// Turn-boundary strings of one model family's chat template.
struct ChatMarkers {
    std::string user_start;
    std::string user_end;
    std::string response_start;
    std::string response_end;
    std::string image_placeholder;
    std::optional<std::string> system_start;
    std::optional<std::string> system_end;

    /// Inserted between two adjacent free-text segments (R_a and P) unless
    /// either side already carries whitespace at the seam.
    std::string text_joiner = " ";

    /// Throws MarkerError: empty marker, or placeholder embedded in a marker.
    void validate() const;
};

/// Everything loaded from a per-family template config file.
struct TemplateConfig {
    std::string family;
    ChatMarkers markers;
    std::optional<std::string> think_start;
    std::optional<std::string> think_end;
    /// Request field carrying images for raw completions (server convention).
    std::string raw_image_field = "images";
};

TemplateConfig load_template_config(const std::filesystem::path& path);
TemplateConfig parse_template_config(std::string_view json_text);

// -- rendered sequences -----------------------------------------------------

enum class SegmentKind { Text, Image };

struct Segment {
    SegmentKind kind = SegmentKind::Text;
    std::string payload;  // text, or an image reference for SegmentKind::Image
    bool marker = false;  // text segment holding a turn-boundary marker

    friend bool operator==(const Segment&, const Segment&) = default;
};

enum class SequenceSetting {
    Standard,
    Probe,
    MultiTurn,
    ProbeHighPplMeaningful,
    ProbeHighPplMeaningless,
    ProbeSystemTokenOnly,
};

std::string_view to_string(SequenceSetting s);

struct RenderedSequence {
    std::vector<Segment> segments;
    SequenceSetting setting = SequenceSetting::Standard;
    bool continuation = false;  // ends inside an open assistant turn

    std::size_t image_count() const;
    /// Reference carried by the (single) image segment.
    const std::string& image() const;

    friend bool operator==(const RenderedSequence&, const RenderedSequence&) = default;
};

/// [User_Start] image Q [User_End]
RenderedSequence render_standard(const ChatMarkers& markers, const std::string& image,
                                 const std::string& question);

/// [User_Start] image Q [User_End][Response_Start] R_a P  (assistant turn left open)
RenderedSequence render_probe(const ChatMarkers& markers, const std::string& image,
                              const std::string& question, const std::string& r_a,
                              const std::string& p,
                              SequenceSetting setting = SequenceSetting::Probe);

/// Probe with only the structural markers [User_Start][User_End][Response_Start]
/// injected after R_a, no text between them.
RenderedSequence render_system_token_only(const ChatMarkers& markers, const std::string& image,
                                          const std::string& question, const std::string& r_a);

/// [User_Start] image Q [User_End][Response_Start] R_a [Response_End][User_Start] U [User_End]
RenderedSequence render_multi_turn(const ChatMarkers& markers, const std::string& image,
                                   const std::string& question, const std::string& r_a,
                                   const std::string& u);

/// Concatenates segments into the exact prompt text; images become the
/// family's placeholder. With generation_prompt, a closed sequence gets a
/// trailing response_start so a raw completion opens the assistant turn.
std::string flatten(const RenderedSequence& seq, const ChatMarkers& markers,
                    bool generation_prompt = false);

/// Splits a flattened prompt back into marker / text / image segments.
std::vector<Segment> rescan(std::string_view flat, const ChatMarkers& markers);

/// Chat view of a closed sequence. Throws ModeMismatch for continuation sequences.
struct ChatTurn {
    std::string role;  // "system", "user", "assistant"
    std::vector<Segment> content;
};
std::vector<ChatTurn> to_chat_turns(const RenderedSequence& seq, const ChatMarkers& markers);

/// Removes every think_start ... think_end block (and an unterminated trailing one).
std::string strip_think(std::string_view text, const TemplateConfig& config);

// -- prompt library ---------------------------------------------------------

/// Compiled, case-insensitive trigger patterns.
class TriggerLexicon {
public:
    TriggerLexicon() = default;
    /// Throws PatternError on an empty list or a pattern that does not compile.
    explicit TriggerLexicon(std::vector<std::string> patterns);

    const std::vector<std::string>& patterns() const { return patterns_; }
    bool empty() const { return patterns_.empty(); }

    struct Match {
        std::size_t offset = 0;
        std::size_t length = 0;
    };
    /// Earliest match of any pattern (longest wins a tie).
    std::optional<Match> first_match(std::string_view text) const;

private:
    std::vector<std::string> patterns_;
    std::vector<std::regex> compiled_;
};

struct PromptLibrary {
    std::string reflection_default;
    std::string user_instruction;
    std::vector<std::string> reflection_variants;
    std::string high_ppl_meaningful;
    std::string high_ppl_meaningless;
    TriggerLexicon natural_triggers;
    /// System prompt used to elicit reflection from Instruct models; no default ships.
    std::optional<std::string> elicitation_system_prompt;

    static PromptLibrary defaults();

    /// Reflection prompt by id: 0 is the default P, 1..N index the variants.
    const std::string& reflection(int variant_id) const;
};

/// Defaults overlaid with the fields present in a JSON prompt file.
PromptLibrary load_prompt_library(const std::filesystem::path& path);
PromptLibrary parse_prompt_library(std::string_view json_text);

// -- context manipulation ---------------------------------------------------

bool is_canonical_retention(double fraction);

/// First ceil(fraction * W) whitespace-delimited words of r_a joined with single
/// spaces; fraction >= 1 returns r_a byte-identical. Fractions are clamped to [0, 1].
std::string truncate_reasoning(std::string_view r_a, double fraction);

/// Byte offset of the first natural reflection trigger in r_a.
std::optional<std::size_t> find_natural_trigger(std::string_view r_a, const TriggerLexicon& lexicon);

}  // namespace swapprobe
