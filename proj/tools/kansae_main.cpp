#include "kansae/cli.hpp"

int main(int argc, char** argv) { return kansae::cli::run(argc, argv); }
