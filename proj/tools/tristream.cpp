#include "tristream/cli.hpp"

int main(int argc, char** argv) { return tristream::cli::run(argc, argv); }
