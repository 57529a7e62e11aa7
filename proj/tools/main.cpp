#include "cli.hpp"

int main(int argc, char** argv) { return adaptsp::cli::run(argc, argv); }
