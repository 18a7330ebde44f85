#include "fisformer/cli.hpp"

int main(int argc, char** argv) { return fisformer::cli::run(argc, argv); }
