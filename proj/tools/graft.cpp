// SPDX-License-Identifier: Apache-2.0
//
// graft: command-line front end for the language-grafting pipeline.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "graft/cli_commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"graft: adapt a base causal language model to a new language"};
    app.require_subcommand(1);

    graft::cli::register_all(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const graft::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const graft::verify_mismatch& e) {
        std::fprintf(stderr, "verification mismatch: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
