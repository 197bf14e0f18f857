#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <random>
#include <string>

#include "swapprobe/bench.hpp"
#include "swapprobe/inference.hpp"
#include "swapprobe/mock_server.hpp"
#include "swapprobe/templates.hpp"
#include "swapprobe/util.hpp"

namespace support {

namespace fs = std::filesystem;

inline fs::path source_path(const std::string& rel) { return fs::path(SWAPPROBE_SOURCE_DIR) / rel; }

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("swapprobe-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline swapprobe::TemplateConfig synthetic_template() {
    return swapprobe::load_template_config(source_path("config/templates/synthetic.json"));
}

inline swapprobe::TemplateConfig qwen_template() {
    return swapprobe::load_template_config(source_path("config/templates/qwen2vl.json"));
}

inline swapprobe::mock::Options mock_options(swapprobe::mock::Behavior b) {
    swapprobe::mock::Options o;
    o.behavior = b;
    o.tmpl = synthetic_template();
    return o;
}

/// Mock model on a free port for the lifetime of the object.
class MockModel {
public:
    explicit MockModel(swapprobe::mock::Options opts) : server_(std::move(opts)) { server_.start(); }

    swapprobe::EndpointConfig endpoint(swapprobe::EndpointMode mode = swapprobe::EndpointMode::CompletionRaw) const {
        swapprobe::EndpointConfig e;
        e.base_url = server_.base_url();
        e.model_name = "mock";
        e.mode = mode;
        e.max_retries = 3;
        e.timeout_s = 10.0;
        e.backoff_base_s = 0.01;
        e.backoff_cap_s = 0.05;
        return e;
    }

    swapprobe::InferenceClient client(swapprobe::EndpointMode mode = swapprobe::EndpointMode::CompletionRaw) const {
        return swapprobe::InferenceClient(endpoint(mode), synthetic_template());
    }

    swapprobe::mock::Server& server() { return server_; }

private:
    swapprobe::mock::Server server_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace support
