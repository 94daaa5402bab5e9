#include "fcal/cli.hpp"

int main(int argc, char** argv) { return fcal::cli::run(argc, argv); }
