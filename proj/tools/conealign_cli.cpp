#include "conealign/cli.hpp"

int main(int argc, char** argv) { return conealign::cli::run_cli(argc, argv); }
