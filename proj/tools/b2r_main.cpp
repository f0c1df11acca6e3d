// Command-line entry point. Subcommands are registered in cli.hpp.
#include "b2r/cli.hpp"

int main(int argc, char** argv) {
    return b2r::cli::run_cli(argc, argv);
}
