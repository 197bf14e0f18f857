// swapprobe-mock: scripted OpenAI-compatible model server and synthetic benchmark writer.

#include <iostream>

#include <CLI11.hpp>

#include "swapprobe/errors.hpp"
#include "swapprobe/mock_server.hpp"
#include "swapprobe/synthetic.hpp"
#include "swapprobe/templates.hpp"

using namespace swapprobe;

int main(int argc, char** argv) {
    CLI::App app{"Mock model server and synthetic benchmark for swapprobe"};
    app.require_subcommand(1);

    std::string behavior = "label_pixel";
    std::string template_path;
    std::string host = "127.0.0.1";
    int port = 8000;
    bool chat_only = false;
    auto* serve = app.add_subcommand("serve", "Serve a scripted model");
    serve->add_option("--behavior", behavior, "label_pixel | anchored | echo")->capture_default_str();
    serve->add_option("--template", template_path, "Template config used to parse raw prompts")
        ->required()
        ->check(CLI::ExistingFile);
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();
    serve->add_flag("--chat-only", chat_only, "Reject the raw completions route");

    std::string out_dir;
    synthetic::ManifestOptions synth_opts;
    int pool = 10;
    auto* synth = app.add_subcommand("synth", "Write a synthetic label-pixel benchmark");
    synth->add_option("--out", out_dir, "Output directory")->required();
    synth->add_option("--instances", synth_opts.instances)->capture_default_str();
    synth->add_option("--seed", synth_opts.seed)->capture_default_str();
    synth->add_option("--pool", pool, "Unrelated images for the distinct-image control")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*serve) {
            mock::Options opts;
            opts.behavior = mock::parse_behavior(behavior);
            opts.tmpl = load_template_config(template_path);
            opts.chat_only = chat_only;
            mock::Server server(std::move(opts));
            std::cerr << "mock (" << behavior << ") on http://" << host << ':' << port << "/v1\n";
            server.listen_blocking(host, port);
        } else if (*synth) {
            const auto manifest = synthetic::write_manifest(out_dir, synth_opts);
            const auto images = synthetic::write_unrelated_pool(std::filesystem::path(out_dir) / "unrelated", pool,
                                                                synth_opts.seed + 1000);
            std::cout << "wrote " << manifest.instances.size() << " instances and " << images.size()
                      << " unrelated images to " << out_dir << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
