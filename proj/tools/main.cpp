#include "jepolab/cli.hpp"

int main(int argc, char** argv) { return jepolab::cli::run(argc, argv); }
