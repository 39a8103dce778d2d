#include "siftgraph/cli.hpp"

int main(int argc, char** argv) { return siftgraph::run_cli(argc, argv); }
