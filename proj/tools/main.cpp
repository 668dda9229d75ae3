#include "cordseg/cli.hpp"

int main(int argc, char** argv) { return cordseg::run_cli(argc, argv); }
