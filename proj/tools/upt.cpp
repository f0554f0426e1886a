#include "upt/cli.hpp"

int main(int argc, char** argv) { return upt::run_cli(argc, argv); }
