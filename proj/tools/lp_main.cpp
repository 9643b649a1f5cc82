#include "lp/cli.hpp"

int main(int argc, char** argv) { return lp::cli::run(argc, argv); }
