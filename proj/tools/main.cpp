#include "cli.hpp"

int main(int argc, char** argv) { return mgn::cli::run(argc, argv); }
