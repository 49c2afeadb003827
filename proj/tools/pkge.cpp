#include "pkge/cli.hpp"

int main(int argc, char** argv) { return pkge::run_cli(argc, argv); }
