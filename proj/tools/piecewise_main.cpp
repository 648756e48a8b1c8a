#include "piecewise/cli.hpp"

int main(int argc, char** argv) { return piecewise::cli::main(argc, argv); }
