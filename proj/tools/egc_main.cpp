#include "egc/cli.hpp"

int main(int argc, char** argv) { return egc::cli::run(argc, argv); }
