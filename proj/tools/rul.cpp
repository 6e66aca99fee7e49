#include "rul/cli.hpp"

int main(int argc, char** argv) { return rul::cli::run(argc, argv); }
