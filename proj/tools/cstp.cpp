#include "cstp/cli.hpp"

int main(int argc, char** argv) { return cstp::run_cli(argc, argv); }
