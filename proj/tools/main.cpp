#include "perfinf/experiments.hpp"

int main(int argc, char** argv) { return perfinf::cli_main(argc, argv); }
