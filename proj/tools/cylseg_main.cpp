#include "cylseg/cli.hpp"

int main(int argc, char** argv) { return cylseg::cli_main(argc, argv); }
