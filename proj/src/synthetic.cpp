#include "swapprobe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "swapprobe/errors.hpp"

namespace swapprobe::synthetic {

namespace {

constexpr std::uint8_t kMagic0 = 0xA5;
constexpr std::uint8_t kMagic1 = 0x5A;

void fill_rect(Image& img, int x0, int y0, int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int y = std::max(1, y0); y < std::min(img.height, y0 + h); ++y)
        for (int x = std::max(0, x0); x < std::min(img.width, x0 + w); ++x) {
            auto* p = img.pixel(x, y);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
}

std::uint64_t label_hash(const std::string& label) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

Image make_label_image(const std::string& label, std::uint64_t scene_seed, int width, int height) {
    if (static_cast<int>(label.size()) + 2 > width || label.size() > 255)
        throw Error("label too long for image width");
    Image img(width, height);
    std::mt19937_64 rng(scene_seed);
    // Smooth background shared by both images of a pair.
    const int gx = static_cast<int>(rng() % 80) + 40;
    const int gy = static_cast<int>(rng() % 80) + 40;
    for (int y = 1; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            auto* p = img.pixel(x, y);
            p[0] = static_cast<std::uint8_t>(120 + gx * x / width);
            p[1] = static_cast<std::uint8_t>(110 + gy * y / height);
            p[2] = static_cast<std::uint8_t>(150);
        }
    // Scene furniture: a few rectangles at seed-dependent places.
    for (int k = 0; k < 4; ++k) {
        const int w = static_cast<int>(rng() % (width / 3)) + 6;
        const int h = static_cast<int>(rng() % (height / 3)) + 6;
        const int x = static_cast<int>(rng() % static_cast<std::uint64_t>(width - w));
        const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(height - h - 1)) + 1;
        const auto shade = static_cast<std::uint8_t>(rng() % 200 + 30);
        fill_rect(img, x, y, w, h, shade, static_cast<std::uint8_t>(255 - shade), 60);
    }
    // Answer-critical detail: a small marker whose position and size follow the label.
    const std::uint64_t lh = label_hash(label);
    const int mw = 6 + static_cast<int>(lh % 6);
    const int mx = static_cast<int>((lh >> 8) % static_cast<std::uint64_t>(width - mw));
    const int my = 1 + static_cast<int>((lh >> 16) % static_cast<std::uint64_t>(height - mw - 1));
    fill_rect(img, mx, my, mw, mw, 20, 20, 20);

    auto* head = img.pixel(0, 0);
    head[0] = kMagic0;
    head[1] = kMagic1;
    head[2] = static_cast<std::uint8_t>(label.size());
    for (std::size_t i = 0; i < label.size(); ++i) {
        auto* p = img.pixel(static_cast<int>(i) + 1, 0);
        p[0] = static_cast<std::uint8_t>(label[i]);
        p[1] = 0;
        p[2] = 0;
    }
    return img;
}

std::optional<std::string> read_label(const Image& image) {
    if (image.width < 1 || image.height < 1) return std::nullopt;
    const auto* head = image.pixel(0, 0);
    if (head[0] != kMagic0 || head[1] != kMagic1) return std::nullopt;
    const int n = head[2];
    if (n + 1 > image.width) return std::nullopt;
    std::string label;
    for (int i = 0; i < n; ++i) label.push_back(static_cast<char>(image.pixel(i + 1, 0)[0]));
    return label;
}

Image make_unrelated_image(std::uint64_t seed, int width, int height) {
    Image img(width, height);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 25.0);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            auto* p = img.pixel(x, y);
            const double base = 128 + 90 * std::sin(0.21 * x + 0.13 * y + static_cast<double>(seed % 17));
            for (int c = 0; c < 3; ++c)
                p[c] = static_cast<std::uint8_t>(std::clamp(base + noise(rng) + 20.0 * c, 0.0, 255.0));
        }
    return img;
}

Manifest write_manifest(const std::filesystem::path& dir, const ManifestOptions& opts) {
    std::filesystem::create_directories(dir / "images");
    Manifest m;
    m.version = "1";
    m.image_root = std::filesystem::absolute(dir);
    std::mt19937_64 rng(opts.seed);
    for (int i = 0; i < opts.instances; ++i) {
        ProbeInstance inst;
        char id[32];
        std::snprintf(id, sizeof id, "syn-%04d", i);
        inst.id = id;
        inst.source = kBenchSources[i % 4];
        const int a = static_cast<int>(rng() % 170) + 10;
        int b = static_cast<int>(rng() % 170) + 10;
        if (b == a) b = a + 7;
        inst.answer_a = std::to_string(a);
        inst.answer_b = std::to_string(b);
        inst.answer_format = AnswerFormat::FreeFormNumeric;
        inst.question = "What is the value shown by the marked element in figure " + std::to_string(i) + "?";
        inst.image_a = "images/" + inst.id + "_a.png";
        inst.image_b = "images/" + inst.id + "_b.png";
        inst.resolution = {opts.width, opts.height};
        const std::uint64_t scene = opts.seed * 1000003ULL + static_cast<std::uint64_t>(i);
        const Bytes pa = encode_png(make_label_image(inst.answer_a, scene, opts.width, opts.height));
        const Bytes pb = encode_png(make_label_image(inst.answer_b, scene, opts.width, opts.height));
        write_file(dir / inst.image_a, std::string_view(reinterpret_cast<const char*>(pa.data()), pa.size()));
        write_file(dir / inst.image_b, std::string_view(reinterpret_cast<const char*>(pb.data()), pb.size()));
        inst.image_a_sha256 = sha256_hex(pa);
        inst.image_b_sha256 = sha256_hex(pb);
        m.instances.push_back(std::move(inst));
    }
    Manifest portable = m;
    portable.image_root = ".";
    save_manifest(portable, dir / "manifest.jsonl");
    return m;
}

std::vector<std::string> write_unrelated_pool(const std::filesystem::path& dir, int count, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> paths;
    for (int i = 0; i < count; ++i) {
        const auto path = std::filesystem::absolute(dir / ("unrelated_" + std::to_string(i) + ".png"));
        save_png(make_unrelated_image(seed + static_cast<std::uint64_t>(i)), path);
        paths.push_back(path.string());
    }
    return paths;
}

}  // namespace swapprobe::synthetic
