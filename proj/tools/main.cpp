#include "radvit/cli.hpp"

int main(int argc, char** argv) { return radvit::run_cli(argc, argv); }
