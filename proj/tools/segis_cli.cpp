#include "segis/cli.hpp"

int main(int argc, char** argv) { return segis::cli::run(argc, argv); }
