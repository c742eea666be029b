#include "salperc/cli.hpp"

int main(int argc, char** argv) { return salperc::cli::run(argc, argv); }
