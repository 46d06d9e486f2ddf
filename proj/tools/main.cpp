#include "syrenets/cli.hpp"

int main(int argc, char** argv) { return syrenets::run_cli(argc, argv); }
