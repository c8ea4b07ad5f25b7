#include "pwc/cli.hpp"

int main(int argc, char** argv) { return pwc::cli_main(argc, argv); }
