#include "spooflab/cli.hpp"

int main(int argc, char** argv) { return spooflab::run_command(argc, argv); }
