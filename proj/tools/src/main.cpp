#include "sidlab_cli/commands.hpp"

int main(int argc, char** argv) { return sidlab::cli::run_cli(argc, argv); }
