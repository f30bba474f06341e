#include "s2moe/cli.hpp"

int main(int argc, char** argv) { return s2moe::run_cli(argc, argv); }
